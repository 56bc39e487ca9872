#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "parseq/errors.hpp"
#include "parseq/parallel.hpp"
#include "parseq/predictor.hpp"
#include "parseq/schedule.hpp"
#include "parseq/types.hpp"

namespace parseq {

// One full-chain transition x_t -> x_{t-1}:
//   x_{t-1} = sqrt(a_{t-1}/a_t) x_t + c1^{(t)} eps_theta(x_t, t) + sigma_t eps_t.
// `eps_t` may be null (deterministic step).
inline Vector ddim_step(const Vector& x_t, int t, const DiffusionSchedule& schedule, const NoisePredictor& predictor,
                        const Vector* eps_t = nullptr) {
  const double a_prev = schedule.alpha_bar(t - 1);
  const double a_cur = schedule.alpha_bar(t);
  const double sig = sigma_between(a_prev, a_cur, schedule.eta());
  Vector out = std::sqrt(a_prev / a_cur) * x_t + c1_between(a_prev, a_cur, sig) * predictor.predict(x_t, t);
  if (eps_t != nullptr) {
    require_dim(eps_t->size(), x_t.size(), "ddim_step (eps)");
    out += sig * *eps_t;
  }
  return out;
}

struct Residual {
  StateStack g;
  double norm = 0.0;
};

struct StackVjp {
  StateStack cotangent_stack;
  Vector cotangent_xT;
};

// The sampling chain over a timestep subsequence, viewed both as a sequential
// recurrence and as the joint fixed-point map h_tilde over the latent stack.
//
// Levels j = 0..S: level S is the injected x_T, level j < S lives in stack
// column S-1-j. Unrolling the recurrence gives, for every level L < S,
//   x_L = sqrt(a_L) * ( x_T / sqrt(a_S) + sum_{j=L+1}^{S} term_j / sqrt(a_{j-1}) ),
//   term_j = c1_j eps_theta(x_j, tau_j) + sigma_j eps_j.
// h_tilde evaluates that sum for all L with one serial scan, written as
//   new_L = sqrt(a_L / a_{L+1}) new_{L+1} + term_{L+1}
// so that the arithmetic matches `step` exactly and the rollout is a fixed
// point to the last bit.
//
// A null NoiseStack pointer means the deterministic chain (no sigma term).
class Chain {
 public:
  Chain(const DiffusionSchedule& schedule, const TimestepSubsequence& sub, const NoisePredictor& predictor,
        WorkerPool* pool = nullptr)
      : coef_(ChainCoefficients::build(schedule, sub)), predictor_(&predictor), pool_(pool), eta_(schedule.eta()) {}

  int length() const noexcept { return coef_.length(); }
  Eigen::Index dim() const noexcept { return predictor_->dim(); }
  double eta() const noexcept { return eta_; }
  const ChainCoefficients& coefficients() const noexcept { return coef_; }
  const NoisePredictor& predictor() const noexcept { return *predictor_; }

  // Timestep of the state stored in stack column k.
  int timestep_of_column(Eigen::Index k) const { return coef_.timesteps[static_cast<std::size_t>(length() - 1 - k)]; }

  // Transition j (level j -> j-1), 1 <= j <= S.
  Vector step(int j, const Vector& x, const Vector* eps = nullptr) const {
    if (j < 1 || j > length()) throw IndexError("chain step: transition " + std::to_string(j) + " outside [1," + std::to_string(length()) + "]");
    const auto u = static_cast<std::size_t>(j);
    return transition(u, x, predictor_->predict(x, coef_.timesteps[u]), eps);
  }

  // Sequential sampling: S applications of `step` from x_T.
  StateStack rollout(const Vector& x_T, const NoiseStack* noise = nullptr) const {
    check_inputs(nullptr, x_T, noise);
    const int S = length();
    StateStack out(dim(), S);
    Vector x = x_T;
    for (int j = S; j >= 1; --j) {
      const Eigen::Index col = S - j;
      if (noise != nullptr) {
        const Vector eps = noise->eps.col(col);
        x = step(j, x, &eps);
      } else {
        x = step(j, x);
      }
      if (!x.allFinite()) {
        throw DivergenceError("rollout: non-finite state at timestep " + std::to_string(coef_.timesteps[static_cast<std::size_t>(j)]),
                              coef_.timesteps[static_cast<std::size_t>(j)]);
      }
      out.col(col) = x;
    }
    return out;
  }

  StateStack h_tilde(const StateStack& stack, const Vector& x_T, const NoiseStack* noise = nullptr) const {
    check_inputs(&stack, x_T, noise);
    const int S = length();
    const std::vector<Vector> eps = predict_all(stack, x_T);
    StateStack out(dim(), S);
    Vector prev = x_T;
    for (int L = S - 1; L >= 0; --L) {
      const auto j = static_cast<std::size_t>(L + 1);
      const Eigen::Index col = S - 1 - L;
      if (noise != nullptr) {
        const Vector e = noise->eps.col(col);
        prev = transition(j, prev, eps[j], &e);
      } else {
        prev = transition(j, prev, eps[j], nullptr);
      }
      out.col(col) = prev;
    }
    if (!out.allFinite()) throw DivergenceError("h_tilde: non-finite output");
    return out;
  }

  Residual residual(const StateStack& stack, const Vector& x_T, const NoiseStack* noise = nullptr) const {
    Residual r;
    r.g = h_tilde(stack, x_T, noise) - stack;
    r.norm = r.g.norm();
    return r;
  }

  // u^T dh/dstack and u^T dh/dx_T at (stack, x_T). Noise enters h_tilde
  // additively and does not affect the Jacobian.
  //
  // Row L depends on stack level j (1 <= j <= S-1) through
  // sqrt(a_L / a_{j-1}) c1_j J_eps(x_j) for every L < j, so with prefix sums
  // P_m = sum_{L<=m} sqrt(a_L) u_L the cotangent of level j is
  // c1_j / sqrt(a_{j-1}) J_eps(x_j)^T P_{j-1}.
  StackVjp h_tilde_vjp(const StateStack& stack, const Vector& x_T, const StateStack& cotangent) const {
    check_inputs(&stack, x_T, nullptr);
    const int S = length();
    if (cotangent.rows() != dim() || cotangent.cols() != S) throw ShapeError("h_tilde_vjp: cotangent shape does not match the stack");

    std::vector<Vector> prefix(static_cast<std::size_t>(S));
    Vector running = Vector::Zero(dim());
    for (int L = 0; L < S; ++L) {
      running += coef_.sqrt_alpha[static_cast<std::size_t>(L)] * cotangent.col(S - 1 - L);
      prefix[static_cast<std::size_t>(L)] = running;
    }

    StackVjp out{StateStack::Zero(dim(), S), Vector()};
    std::vector<Vector> pulled(static_cast<std::size_t>(S) + 1);
    run_indexed(static_cast<std::size_t>(S), [&](std::size_t i) {
      const std::size_t j = i + 1;  // levels 1..S
      const Vector& x = j == static_cast<std::size_t>(S) ? x_T : Vector(stack.col(S - 1 - static_cast<Eigen::Index>(j)));
      const Vector u = (coef_.c1[j] / coef_.sqrt_alpha[j - 1]) * prefix[j - 1];
      pulled[j] = predictor_->vjp(x, coef_.timesteps[j], u);
    });
    for (int j = 1; j < S; ++j) out.cotangent_stack.col(S - 1 - j) = pulled[static_cast<std::size_t>(j)];
    out.cotangent_xT = prefix[static_cast<std::size_t>(S - 1)] / coef_.sqrt_alpha[static_cast<std::size_t>(S)] + pulled[static_cast<std::size_t>(S)];
    return out;
  }

  // Every state set to x_T.
  StateStack xT_init(const Vector& x_T) const { return x_T.replicate(1, length()); }
  StateStack zero_init() const { return StateStack::Zero(dim(), length()); }

 private:
  // sqrt(a_{j-1}/a_j) x + c1_j pred (+ sigma_j noise)
  Vector transition(std::size_t j, const Vector& x, const Vector& pred, const Vector* noise) const {
    Vector out = (coef_.sqrt_alpha[j - 1] / coef_.sqrt_alpha[j]) * x + coef_.c1[j] * pred;
    if (noise != nullptr) out += coef_.sigma[j] * *noise;
    return out;
  }

  void check_inputs(const StateStack* stack, const Vector& x_T, const NoiseStack* noise) const {
    require_dim(x_T.size(), dim(), "chain (x_T)");
    if (stack != nullptr && (stack->rows() != dim() || stack->cols() != length())) {
      throw ShapeError("chain: stack is " + std::to_string(stack->rows()) + "x" + std::to_string(stack->cols()) + ", expected " +
                       std::to_string(dim()) + "x" + std::to_string(length()));
    }
    if (noise != nullptr && (noise->dim() != dim() || noise->size() != length())) {
      throw ShapeError("chain: noise stack shape does not match the chain");
    }
  }

  // eps_theta at every level j = 1..S (index j of the result; index 0 unused).
  std::vector<Vector> predict_all(const StateStack& stack, const Vector& x_T) const {
    const int S = length();
    std::vector<Vector> eps(static_cast<std::size_t>(S) + 1);
    run_indexed(static_cast<std::size_t>(S), [&](std::size_t i) {
      const std::size_t j = i + 1;
      if (j == static_cast<std::size_t>(S)) {
        eps[j] = predictor_->predict(x_T, coef_.timesteps[j]);
      } else {
        eps[j] = predictor_->predict(stack.col(S - 1 - static_cast<Eigen::Index>(j)), coef_.timesteps[j]);
      }
    });
    return eps;
  }

  template <class Fn>
  void run_indexed(std::size_t n, Fn&& fn) const {
    if (pool_ != nullptr) {
      pool_->parallel_for(n, fn);
    } else {
      for (std::size_t i = 0; i < n; ++i) fn(i);
    }
  }

  ChainCoefficients coef_;
  const NoisePredictor* predictor_;
  WorkerPool* pool_;
  double eta_;
};

}  // namespace parseq
