#include <cmath>

#include <gtest/gtest.h>

#include "parseq/random.hpp"
#include "parseq/sampler.hpp"

using namespace parseq;

namespace {

struct GaussChain {
  DiffusionSchedule schedule;
  GaussianOptimalPredictor predictor;
  Chain chain;

  GaussChain(int S, Eigen::Index D, double eta, std::uint64_t seed)
      : schedule(make_linear_beta_schedule(1000, 1e-4, 0.02, eta)),
        predictor(make_predictor(D, seed, schedule)),
        chain(schedule, select_subsequence(1000, S, SubsequenceKind::linear), predictor) {}

  static GaussianOptimalPredictor make_predictor(Eigen::Index D, std::uint64_t seed, const DiffusionSchedule& s) {
    auto rng = rng_stream(seed, "fixture");
    Vector mu = standard_normal(rng, D);
    Vector var = (standard_normal(rng, D).array().abs() + 0.25).matrix();
    return GaussianOptimalPredictor(mu, var, s);
  }
};

SolverConfig config(SolverMethod m, int max_iters, double tol) {
  SolverConfig c;
  c.method = m;
  c.max_iters = max_iters;
  c.tol = tol;
  return c;
}

}  // namespace

TEST(SolverConfig, Defaults) {
  const auto d = SolverConfig::for_eta(0.0);
  EXPECT_EQ(d.max_iters, 15);
  EXPECT_EQ(d.history_m, 5);
  EXPECT_EQ(d.tol, 1e-3);
  EXPECT_EQ(d.ridge_lambda, 1e-4);
  EXPECT_EQ(d.mixing_beta, 1.0);
  EXPECT_EQ(SolverConfig::for_eta(0.5).max_iters, 50);
}

TEST(SolverConfig, Validation) {
  auto bad = [](auto mutate) {
    SolverConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](SolverConfig& c) { c.max_iters = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SolverConfig& c) { c.history_m = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SolverConfig& c) { c.tol = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SolverConfig& c) { c.mixing_beta = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SolverConfig& c) { c.mixing_beta = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(parse_solver_method("broyden"), ConfigError);
}

TEST(Picard, ConstantMapConvergesInOne) {
  const auto s = make_linear_beta_schedule(100, 1e-4, 0.02);
  ZeroPredictor p(3);
  Chain chain(s, select_subsequence(100, 10, SubsequenceKind::linear), p);
  const Vector xT = Vector::Ones(3);
  for (auto m : {SolverMethod::picard, SolverMethod::anderson}) {
    const auto r = solve_chain(chain, xT, nullptr, config(m, 15, 1e-3), InitKind::zero);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.iters, 1);
    ASSERT_EQ(r.residuals.size(), 1u);
    EXPECT_EQ(r.residuals[0], 0.0);
    EXPECT_EQ(r.stack, chain.rollout(xT));
  }
}

TEST(Picard, FiveStepChainExact) {
  GaussChain g(5, 4, 0.0, 1);
  const Vector xT = sample_xT(1, 4);
  const auto r = solve_chain(g.chain, xT, nullptr, config(SolverMethod::picard, 5, 0.0), InitKind::zero);
  EXPECT_LE((r.stack - g.chain.rollout(xT)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(r.iters, 5);
}

TEST(Picard, BudgetOfOne) {
  GaussChain g(10, 4, 0.0, 2);
  const auto r = solve_chain(g.chain, sample_xT(2, 4), nullptr, config(SolverMethod::picard, 1, 1e-12), InitKind::zero);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iters, 1);
  EXPECT_EQ(r.residuals.size(), 1u);
}

TEST(Picard, FiniteConvergenceFromArbitraryInits) {
  for (int S : {1, 5, 25, 100}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      GaussChain g(S, 8, seed == 2 ? 1.0 : 0.0, seed);
      const Vector xT = sample_xT(seed, 8);
      const NoiseStack noise = sample_noise(seed, 8, S);
      auto rng = rng_stream(seed, "init");
      const Eigen::MatrixXd init = 50 * standard_normal(rng, 8, S);
      const auto r = solve_chain(g.chain, xT, &noise, config(SolverMethod::picard, S, 1e-8), init);
      EXPECT_TRUE(r.converged) << "S=" << S;
      EXPECT_LE(r.iters, S);
      EXPECT_LE(r.residuals.back(), 1e-8);
    }
  }
}

// Empirical: after S/2 iterations the Picard residuals do not grow.
TEST(Picard, ResidualsSettleAfterHalfway) {
  GaussChain g(40, 8, 0.0, 3);
  const auto r = solve_chain(g.chain, sample_xT(3, 8), nullptr, config(SolverMethod::picard, 40, 0.0), InitKind::zero);
  for (std::size_t i = 21; i < r.residuals.size(); ++i) EXPECT_LE(r.residuals[i], r.residuals[i - 1] + 1e-12);
}

TEST(Anderson, AffineMapBeatsPicard) {
  auto rng = rng_stream(4, "affine");
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(standard_normal(rng, 4, 4)).householderQ();
  const Vector lambdas{{0.9, -0.7, 0.5, 0.85}};
  const Eigen::MatrixXd A = Q * lambdas.asDiagonal() * Q.transpose();
  const Vector b = standard_normal(rng, 4);
  auto map = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd { return A * x + b; };
  const Eigen::MatrixXd init = Eigen::MatrixXd::Zero(4, 1);
  const auto pic = picard_solve(map, init, config(SolverMethod::picard, 1000, 1e-10));
  const auto and_ = anderson_solve(map, init, config(SolverMethod::anderson, 1000, 1e-10));
  ASSERT_TRUE(pic.converged);
  ASSERT_TRUE(and_.converged);
  EXPECT_LT(and_.iters, pic.iters);
  const Vector exact = (Eigen::MatrixXd::Identity(4, 4) - A).lu().solve(b);
  EXPECT_LE((and_.stack.col(0) - exact).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Anderson, BudgetOnGaussianChain) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    GaussChain g(100, 8, 0.0, seed);
    const auto r = solve_chain(g.chain, sample_xT(seed, 8), nullptr, SolverConfig::for_eta(0.0));
    EXPECT_TRUE(r.converged);
    EXPECT_LE(r.iters, 15);
  }
}

TEST(Anderson, AgreesWithPicard) {
  for (double eta : {0.0, 1.0}) {
    GaussChain g(30, 6, eta, 5);
    const Vector xT = sample_xT(5, 6);
    const NoiseStack noise = sample_noise(5, 6, 30);
    const auto a = solve_chain(g.chain, xT, &noise, config(SolverMethod::anderson, 200, 1e-10));
    const auto p = solve_chain(g.chain, xT, &noise, config(SolverMethod::picard, 30, 1e-10));
    ASSERT_TRUE(a.converged && p.converged);
    EXPECT_LE((a.stack - p.stack).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Solver, InitIsNotMutated) {
  GaussChain g(20, 4, 0.0, 6);
  const Vector xT = sample_xT(6, 4);
  auto rng = rng_stream(6, "init");
  const Eigen::MatrixXd init = standard_normal(rng, 4, 20);
  const Eigen::MatrixXd copy = init;
  for (auto m : {SolverMethod::picard, SolverMethod::anderson}) {
    solve_chain(g.chain, xT, nullptr, config(m, 20, 1e-8), init);
    EXPECT_EQ(init, copy);
  }
}

TEST(Solver, ResultInvariants) {
  GaussChain g(50, 4, 1.0, 7);
  const Vector xT = sample_xT(7, 4);
  const NoiseStack noise = sample_noise(7, 4, 50);
  for (auto m : {SolverMethod::picard, SolverMethod::anderson}) {
    for (int budget : {1, 3, 50}) {
      const auto r = solve_chain(g.chain, xT, &noise, config(m, budget, 1e-6));
      EXPECT_EQ(static_cast<int>(r.residuals.size()), r.iters);
      EXPECT_LE(r.iters, budget);
      if (r.converged) {
        EXPECT_LE(r.residuals.back(), 1e-6);
      }
      EXPECT_NEAR(g.chain.residual(r.stack, xT, &noise).norm, r.residuals.back(), 1e-12 * (1 + r.residuals.back()));
    }
  }
}

TEST(Solver, NonFiniteInitIsDivergence) {
  GaussChain g(5, 2, 0.0, 8);
  Eigen::MatrixXd init = Eigen::MatrixXd::Zero(2, 5);
  init(0, 0) = std::nan("");
  EXPECT_THROW(solve_chain(g.chain, Vector::Zero(2), nullptr, config(SolverMethod::picard, 5, 1e-3), init), DivergenceError);
  EXPECT_THROW(solve_chain(g.chain, Vector::Zero(2), nullptr, config(SolverMethod::anderson, 5, 1e-3), init), DivergenceError);
}

TEST(Solver, DivergingMapReportsIteration) {
  auto map = [](const Eigen::MatrixXd& x) -> Eigen::MatrixXd { return 1e200 * x.array() + 1.0; };
  try {
    picard_solve(map, Eigen::MatrixXd::Ones(2, 1), config(SolverMethod::picard, 10, 1e-3));
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.where(), 1);
  }
}

TEST(Anderson, SingularHistoryFallsBackToPicard) {
  // A map with identical residuals on every step makes F^T F rank one; with
  // the ridge switched off the normal system is singular.
  auto map = [](const Eigen::MatrixXd& x) -> Eigen::MatrixXd { return x.array() + 1.0; };
  SolverConfig c = config(SolverMethod::anderson, 4, 1e-12);
  c.ridge_lambda = 0.0;
  const auto r = anderson_solve(map, Eigen::MatrixXd::Zero(3, 1), c);
  EXPECT_FALSE(r.converged);
  EXPECT_GT(r.picard_fallbacks, 0);
  EXPECT_TRUE(r.stack.allFinite());
}

TEST(InitAblation, XTInitNoSlowerThanZero) {
  double sum_xt = 0, sum_zero = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GaussChain g(50, 8, 0.0, seed);
    const Vector xT = sample_xT(seed, 8);
    SolverConfig c = config(SolverMethod::anderson, 100, 1e-3);
    sum_xt += solve_chain(g.chain, xT, nullptr, c, InitKind::x_T).iters;
    sum_zero += solve_chain(g.chain, xT, nullptr, c, InitKind::zero).iters;
  }
  EXPECT_LE(sum_xt, sum_zero);
}
