#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "parseq/chain.hpp"
#include "parseq/random.hpp"

using namespace parseq;

namespace {

struct Fixture {
  DiffusionSchedule schedule;
  TimestepSubsequence sub;
  GaussianOptimalPredictor predictor;
  oracle::Coef coef;

  static Fixture make(int T, int S, Eigen::Index D, double eta, std::uint64_t seed) {
    auto schedule = make_linear_beta_schedule(T, 1e-4, 0.02, eta);
    auto sub = select_subsequence(T, S, SubsequenceKind::linear);
    auto rng = rng_stream(seed, "fixture");
    Vector mu = standard_normal(rng, D);
    Vector var = (standard_normal(rng, D).array().abs() + 0.25).matrix();
    GaussianOptimalPredictor p(mu, var, schedule);
    auto coef = oracle::coef(oracle::linear_betas(T, 1e-4, 0.02), sub.indices);
    return {schedule, sub, p, coef};
  }

  oracle::Eps eps() const {
    return [this](const Vector& x, int t) { return oracle::gaussian_eps(x, schedule.alpha_bar(t), predictor.mu(), predictor.var()); };
  }
};

double max_abs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(DdimStep, ZeroPredictorScalesState) {
  const auto s = make_linear_beta_schedule(10, 1e-4, 0.02);
  ZeroPredictor p(2);
  const Vector x{{1.5, -2.0}};
  for (int t = 1; t <= 10; ++t) {
    EXPECT_TRUE(ddim_step(x, t, s, p).isApprox(std::sqrt(s.alpha_bar(t - 1) / s.alpha_bar(t)) * x, 1e-15));
  }
}

TEST(DdimStep, ConstantPredictorExample) {
  // alpha_bar(1) = 0.9, alpha_bar(2) = 0.8
  const DiffusionSchedule s({0.1, 1.0 - 0.8 / 0.9}, 0.0);
  ConstantPredictor p(Vector::Ones(1));
  const double got = ddim_step(Vector::Ones(1), 2, s, p)[0];
  EXPECT_NEAR(got, std::sqrt(1.125) + (std::sqrt(0.1) - std::sqrt(0.225)), 1e-15);
  EXPECT_NEAR(got, 0.902546, 1e-6);
}

TEST(DdimStep, ZeroNoiseOnlyChangesC1) {
  const auto s0 = make_linear_beta_schedule(20, 1e-4, 0.02, 0.0);
  const auto s1 = s0.with_eta(1.0);
  ConstantPredictor p(Vector{{0.7, -0.2}});
  const Vector x{{0.4, 1.1}};
  const Vector zero = Vector::Zero(2);
  for (int t = 2; t <= 20; ++t) {
    const Vector diff = ddim_step(x, t, s1, p, &zero) - ddim_step(x, t, s0, p);
    EXPECT_TRUE(diff.isApprox((s1.c1(t) - s0.c1(t)) * p.predict(x, t), 1e-12));
  }
}

TEST(Rollout, ZeroPredictorTelescopes) {
  const auto s = make_linear_beta_schedule(50, 1e-4, 0.02);
  ZeroPredictor p(3);
  Chain chain(s, select_subsequence(50, 50, SubsequenceKind::linear), p);
  const Vector xT{{1.0, -2.0, 0.5}};
  const auto states = chain.rollout(xT);
  EXPECT_TRUE(states.col(49).isApprox(xT / std::sqrt(s.alpha_bar(50)), 1e-12));
}

TEST(Rollout, SingleStepIsDdimStep) {
  auto f = Fixture::make(10, 1, 3, 0.0, 2);
  Chain chain(f.schedule, f.sub, f.predictor);
  const Vector xT = sample_xT(1, 3);
  const auto states = chain.rollout(xT);
  ASSERT_EQ(states.cols(), 1);
  // a one-element subsequence jumps straight from t = 10 to the boundary
  const double a = f.schedule.alpha_bar(10);
  const Vector want = xT / std::sqrt(a) + c1_between(1.0, a, 0.0) * f.predictor.predict(xT, 10);
  EXPECT_TRUE(states.col(0).isApprox(want, 1e-14));
}

TEST(Rollout, MatchesIndependentLoop) {
  for (double eta : {0.0, 0.5, 1.0}) {
    auto f = Fixture::make(1000, 25, 4, eta, 3);
    Chain chain(f.schedule, f.sub, f.predictor);
    const Vector xT = sample_xT(3, 4);
    const NoiseStack noise = sample_noise(3, 4, 25);
    const auto got = chain.rollout(xT, &noise);
    const auto want = oracle::rollout(f.coef, eta, f.eps(), xT, &noise.eps);
    EXPECT_LE(max_abs(got, want), 1e-10);
  }
}

// Pinned output of a T=5, D=2 Gaussian chain (values frozen from the
// independent rollout loop above).
TEST(Rollout, GoldenGaussianT5) {
  const auto s = make_linear_beta_schedule(5, 1e-4, 0.02);
  GaussianOptimalPredictor p(Vector{{0.5, -1.0}}, Vector{{2.0, 0.5}}, s);
  Chain chain(s, select_subsequence(5, 5, SubsequenceKind::linear), p);
  const Vector xT{{0.3, -0.8}};
  const auto got = chain.rollout(xT);
  const auto coef = oracle::coef(oracle::linear_betas(5, 1e-4, 0.02), {1, 2, 3, 4, 5});
  const auto want = oracle::rollout(
      coef, 0.0, [&](const Vector& x, int t) { return oracle::gaussian_eps(x, s.alpha_bar(t), p.mu(), p.var()); }, xT, nullptr);
  EXPECT_LE(max_abs(got, want), 1e-14);
  Eigen::MatrixXd golden(2, 5);
  golden << 0.3041421285328017, 0.30730123473044924, 0.30946516053316786, 0.31067731939279963, 0.31070232025447658,
      -0.81192630690563694, -0.82107589113417379, -0.82738933596401987, -0.8310084525409005, -0.83108379270019084;
  EXPECT_LE(max_abs(got, golden), 1e-12);
}

TEST(Rollout, NonFiniteIsDivergence) {
  const auto s = make_linear_beta_schedule(10, 1e-4, 0.02);
  ConstantPredictor p(Vector::Constant(1, std::numeric_limits<double>::infinity()));
  Chain chain(s, select_subsequence(10, 5, SubsequenceKind::linear), p);
  try {
    chain.rollout(Vector::Ones(1));
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.where(), 10);
  }
}

TEST(HTilde, RolloutIsFixedPoint) {
  for (double eta : {0.0, 1.0}) {
    auto f = Fixture::make(1000, 100, 8, eta, 4);
    Chain chain(f.schedule, f.sub, f.predictor);
    const Vector xT = sample_xT(4, 8);
    const NoiseStack noise = sample_noise(4, 8, 100);
    const auto roll = chain.rollout(xT, &noise);
    EXPECT_LE(max_abs(chain.h_tilde(roll, xT, &noise), roll), 1e-10);
    EXPECT_EQ(chain.h_tilde(roll, xT, &noise), roll);  // same arithmetic as step
    EXPECT_LE(chain.residual(roll, xT, &noise).norm, 1e-10);
  }
}

TEST(HTilde, MatchesLiteralDoubleSum) {
  for (double eta : {0.0, 0.5}) {
    for (int S : {1, 7, 30}) {
      auto f = Fixture::make(1000, S, 3, eta, 5 + S);
      Chain chain(f.schedule, f.sub, f.predictor);
      auto rng = rng_stream(S, "stack");
      const Eigen::MatrixXd stack = standard_normal(rng, 3, S);
      const Vector xT = sample_xT(S, 3);
      const NoiseStack noise = sample_noise(S, 3, S);
      const auto got = chain.h_tilde(stack, xT, &noise);
      const auto want = oracle::h_tilde(f.coef, eta, f.eps(), stack, xT, &noise.eps);
      EXPECT_LE(max_abs(got, want), 1e-9 * std::max(1.0, want.cwiseAbs().maxCoeff())) << "S=" << S << " eta=" << eta;
    }
  }
}

TEST(HTilde, ZeroPredictorIsConstantInStack) {
  const auto s = make_linear_beta_schedule(100, 1e-4, 0.02);
  ZeroPredictor p(2);
  const auto sub = select_subsequence(100, 10, SubsequenceKind::linear);
  Chain chain(s, sub, p);
  const Vector xT{{1.0, 2.0}};
  auto rng = rng_stream(0, "stack");
  const auto out = chain.h_tilde(standard_normal(rng, 2, 10), xT);
  EXPECT_EQ(out, chain.h_tilde(chain.zero_init(), xT));
  for (int k = 0; k < 10; ++k) {
    const int t = chain.timestep_of_column(k);
    EXPECT_TRUE(out.col(k).isApprox(std::sqrt(s.alpha_bar(t) / s.alpha_bar(100)) * xT, 1e-13));
  }
}

TEST(HTilde, FirstRowExactAfterOneApplication) {
  auto f = Fixture::make(1000, 20, 4, 0.0, 6);
  Chain chain(f.schedule, f.sub, f.predictor);
  const Vector xT = sample_xT(6, 4);
  auto rng = rng_stream(6, "stack");
  const auto once = chain.h_tilde(100 * standard_normal(rng, 4, 20), xT);
  EXPECT_LE((once.col(0) - chain.rollout(xT).col(0)).cwiseAbs().maxCoeff(), 1e-12);
}

// S applications from any finite stack reproduce the rollout.
TEST(HTilde, LowerTriangularExactness) {
  for (int S : {1, 5, 25, 100}) {
    for (Eigen::Index D : {1, 8, 64}) {
      const auto s = make_linear_beta_schedule(1000, 1e-4, 0.02);
      const auto mlp = MlpPredictor::random(D, {16}, 1000, static_cast<std::uint64_t>(S * 100 + D));
      auto f = Fixture::make(1000, S, D, 0.0, static_cast<std::uint64_t>(S + D));
      const NoisePredictor* preds[] = {&f.predictor, &mlp};
      for (const NoisePredictor* p : preds) {
        Chain chain(s, f.sub, *p);
        const Vector xT = sample_xT(static_cast<std::uint64_t>(S), D);
        auto rng = rng_stream(static_cast<std::uint64_t>(D), "stack");
        Eigen::MatrixXd x = 10 * standard_normal(rng, D, S);
        for (int i = 0; i < S; ++i) x = chain.h_tilde(x, xT);
        const auto roll = chain.rollout(xT);
        EXPECT_LE(max_abs(x, roll), 1e-8 * std::max(1.0, roll.cwiseAbs().maxCoeff() / 100)) << "S=" << S << " D=" << D;
      }
    }
  }
}

TEST(Residual, TinyExample) {
  const DiffusionSchedule s({0.02}, 0.0);
  ZeroPredictor p(1);
  Chain chain(s, select_subsequence(1, 1, SubsequenceKind::linear), p);
  const auto r = chain.residual(Eigen::MatrixXd::Zero(1, 1), Vector::Ones(1));
  EXPECT_NEAR(r.g(0, 0), 1 / std::sqrt(0.98), 1e-15);
  EXPECT_NEAR(r.norm, 1.01015, 1e-5);
}

TEST(Residual, StackPlusResidualIsHTilde) {
  auto f = Fixture::make(1000, 10, 3, 0.0, 7);
  Chain chain(f.schedule, f.sub, f.predictor);
  auto rng = rng_stream(7, "stack");
  const Eigen::MatrixXd stack = standard_normal(rng, 3, 10);
  const Vector xT = sample_xT(7, 3);
  const auto r = chain.residual(stack, xT);
  // exact up to the rounding of one add and one subtract
  const Eigen::MatrixXd h = chain.h_tilde(stack, xT);
  EXPECT_LE(max_abs(stack + r.g, h), 4 * std::numeric_limits<double>::epsilon() * std::max(h.cwiseAbs().maxCoeff(), stack.cwiseAbs().maxCoeff()));
}

TEST(HTilde, ShapeErrors) {
  auto f = Fixture::make(100, 10, 3, 0.0, 1);
  Chain chain(f.schedule, f.sub, f.predictor);
  EXPECT_THROW(chain.h_tilde(Eigen::MatrixXd::Zero(3, 9), Vector::Zero(3)), ShapeError);
  EXPECT_THROW(chain.h_tilde(Eigen::MatrixXd::Zero(3, 10), Vector::Zero(2)), ShapeError);
  const NoiseStack bad = NoiseStack::zeros(3, 4);
  EXPECT_THROW(chain.h_tilde(Eigen::MatrixXd::Zero(3, 10), Vector::Zero(3), &bad), ShapeError);
  EXPECT_THROW(chain.h_tilde_vjp(Eigen::MatrixXd::Zero(3, 10), Vector::Zero(3), Eigen::MatrixXd::Zero(2, 10)), ShapeError);
}

TEST(HTilde, EtaZeroBitIdentical) {
  auto f = Fixture::make(1000, 30, 5, 0.0, 8);
  Chain chain(f.schedule, f.sub, f.predictor);
  auto rng = rng_stream(8, "stack");
  const Eigen::MatrixXd stack = standard_normal(rng, 5, 30);
  const Vector xT = sample_xT(8, 5);
  const NoiseStack zero = NoiseStack::zeros(5, 30);
  const NoiseStack random = sample_noise(8, 5, 30);
  EXPECT_EQ(chain.h_tilde(stack, xT, &zero), chain.h_tilde(stack, xT));
  // sigma is exactly zero, so even a non-zero stack leaves no trace
  EXPECT_EQ(chain.h_tilde(stack, xT, &random), chain.h_tilde(stack, xT));
  EXPECT_EQ(chain.rollout(xT, &random), chain.rollout(xT));
}

TEST(HTilde, ThreadCountDoesNotChangeBits) {
  auto f = Fixture::make(1000, 50, 8, 1.0, 9);
  const auto mlp = MlpPredictor::random(8, {16, 16}, 1000, 9);
  auto rng = rng_stream(9, "stack");
  const Eigen::MatrixXd stack = standard_normal(rng, 8, 50);
  const Vector xT = sample_xT(9, 8);
  const NoiseStack noise = sample_noise(9, 8, 50);
  const Eigen::MatrixXd u = standard_normal(rng, 8, 50);
  Chain base(f.schedule, f.sub, mlp);
  const auto h0 = base.h_tilde(stack, xT, &noise);
  const auto v0 = base.h_tilde_vjp(stack, xT, u);
  for (std::size_t threads : {1u, 2u, 8u}) {
    WorkerPool pool(threads);
    Chain chain(f.schedule, f.sub, mlp, &pool);
    EXPECT_EQ(chain.h_tilde(stack, xT, &noise), h0);
    const auto v = chain.h_tilde_vjp(stack, xT, u);
    EXPECT_EQ(v.cotangent_stack, v0.cotangent_stack);
    EXPECT_EQ(v.cotangent_xT, v0.cotangent_xT);
  }
}

TEST(HTildeVjp, ZeroPredictor) {
  const auto s = make_linear_beta_schedule(100, 1e-4, 0.02);
  ZeroPredictor p(2);
  Chain chain(s, select_subsequence(100, 6, SubsequenceKind::linear), p);
  auto rng = rng_stream(1, "u");
  const Eigen::MatrixXd u = standard_normal(rng, 2, 6);
  const auto v = chain.h_tilde_vjp(chain.zero_init(), Vector::Ones(2), u);
  EXPECT_EQ(v.cotangent_stack, Eigen::MatrixXd::Zero(2, 6));
  Vector want = Vector::Zero(2);
  for (int k = 0; k < 6; ++k) want += std::sqrt(s.alpha_bar(chain.timestep_of_column(k)) / s.alpha_bar(100)) * u.col(k);
  EXPECT_TRUE(v.cotangent_xT.isApprox(want, 1e-13));
}

TEST(HTildeVjp, ZeroCotangent) {
  auto f = Fixture::make(100, 5, 2, 0.0, 2);
  Chain chain(f.schedule, f.sub, f.predictor);
  const auto v = chain.h_tilde_vjp(chain.zero_init(), Vector::Ones(2), Eigen::MatrixXd::Zero(2, 5));
  EXPECT_EQ(v.cotangent_stack, Eigen::MatrixXd::Zero(2, 5));
  EXPECT_EQ(v.cotangent_xT, Vector::Zero(2));
}

TEST(HTildeVjp, MatchesFiniteDifferences) {
  auto f = Fixture::make(1000, 3, 2, 0.0, 10);
  const auto mlp = MlpPredictor::random(2, {8}, 1000, 10);
  const NoisePredictor* preds[] = {&f.predictor, &mlp};
  for (const NoisePredictor* p : preds) {
    for (int S : {3, 8}) {
      const auto sub = select_subsequence(1000, S, SubsequenceKind::linear);
      Chain chain(f.schedule, sub, *p);
      auto rng = rng_stream(static_cast<std::uint64_t>(S), "vjp");
      const Eigen::MatrixXd stack = standard_normal(rng, 2, S);
      const Vector xT = sample_xT(10, 2);
      const Eigen::MatrixXd u = standard_normal(rng, 2, S);
      const auto v = chain.h_tilde_vjp(stack, xT, u);
      const Eigen::MatrixXd fd_stack = oracle::fd_vjp([&](const Eigen::MatrixXd& s) { return chain.h_tilde(s, xT); }, stack, u);
      const Eigen::MatrixXd fd_xT = oracle::fd_vjp([&](const Eigen::MatrixXd& x) { return chain.h_tilde(stack, x.col(0)); }, xT, u);
      const Eigen::Map<const Vector> got_s(v.cotangent_stack.data(), v.cotangent_stack.size());
      const Eigen::Map<const Vector> want_s(fd_stack.data(), fd_stack.size());
      EXPECT_LE(oracle::max_rel_err(got_s, want_s), 1e-5) << "S=" << S;
      EXPECT_LE(oracle::max_rel_err(v.cotangent_xT, fd_xT.col(0)), 1e-5) << "S=" << S;
      // the x_0 column never feeds back
      EXPECT_EQ(v.cotangent_stack.col(S - 1), Vector::Zero(2));
    }
  }
}
