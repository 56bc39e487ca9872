#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "parseq/chain.hpp"
#include "parseq/errors.hpp"
#include "parseq/types.hpp"

namespace parseq {

enum class LossKind { squared, unsquared };

// ||target - x0_hat||_F^2, or the plain norm for LossKind::unsquared.
inline double loss(const Vector& x0_target, const Vector& x0_hat, LossKind kind = LossKind::squared) {
  require_dim(x0_hat.size(), x0_target.size(), "loss");
  const double sq = (x0_target - x0_hat).squaredNorm();
  return kind == LossKind::squared ? sq : std::sqrt(sq);
}

// dL/dx0_hat.
inline Vector loss_gradient(const Vector& x0_target, const Vector& x0_hat, LossKind kind = LossKind::squared) {
  require_dim(x0_hat.size(), x0_target.size(), "loss_gradient");
  const Vector r = x0_hat - x0_target;
  if (kind == LossKind::squared) return 2.0 * r;
  const double n = r.norm();
  return n > 0.0 ? Vector(r / n) : Vector(Vector::Zero(r.size()));
}

enum class GradientKind { phantom, exact_ift, rollout_backprop };

inline std::string_view to_string(GradientKind k) {
  switch (k) {
    case GradientKind::phantom: return "phantom";
    case GradientKind::exact_ift: return "exact";
    case GradientKind::rollout_backprop: return "rollout";
  }
  return "?";
}

inline GradientKind parse_gradient_kind(std::string_view s) {
  if (s == "phantom") return GradientKind::phantom;
  if (s == "exact" || s == "exact_ift") return GradientKind::exact_ift;
  if (s == "rollout" || s == "rollout_backprop") return GradientKind::rollout_backprop;
  throw ConfigError("unknown gradient mode '" + std::string(s) + "'");
}

struct GradientMode {
  GradientKind kind = GradientKind::phantom;
  double tau = 0.1;
  double adjoint_tol = 1e-6;
  int adjoint_max_iters = -1;  // < 0 means S + 5

  void validate() const {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("gradient: tau must lie in (0,1]");
    if (!(adjoint_tol >= 0.0)) throw ConfigError("gradient: adjoint_tol must be >= 0");
  }
};

struct GradientResult {
  Vector grad;   // dL/dx_T
  double loss = 0.0;
  Vector x0;     // the output the loss was evaluated on
};

// Adjoint v of the linear system v (dh/dx - I) + dL/dx* = 0 and the
// per-iteration residuals ||v dh/dx + dL/dx* - v||.
struct AdjointWorkspace {
  StateStack v;
  std::vector<double> residuals;
  int iters = 0;
};

namespace detail {

inline StateStack seed_x0_row(const Chain& chain, const Vector& dl_dx0) {
  StateStack u = StateStack::Zero(chain.dim(), chain.length());
  u.col(chain.length() - 1) = dl_dx0;
  return u;
}

}  // namespace detail

// Damped one-step gradient: differentiate
//   y = tau * h_tilde(stack*; x_T) + (1 - tau) * stack*
// with stack* held constant and x_T the only leaf, so
//   dL/dx_T = tau * (dL/dy_0)^T dh_tilde_0 / dx_T.
inline GradientResult phantom_grad(const Chain& chain, const StateStack& stack_star, const Vector& x_T, const NoiseStack* noise,
                                   const Vector& target_x0, double tau, LossKind kind = LossKind::squared) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("phantom_grad: tau must lie in (0,1]");
  require_dim(target_x0.size(), chain.dim(), "phantom_grad (target)");
  const StateStack y = tau * chain.h_tilde(stack_star, x_T, noise) + (1.0 - tau) * stack_star;
  GradientResult out;
  out.x0 = y.col(chain.length() - 1);
  out.loss = loss(target_x0, out.x0, kind);
  const StateStack u = detail::seed_x0_row(chain, loss_gradient(target_x0, out.x0, kind));
  out.grad = tau * chain.h_tilde_vjp(stack_star, x_T, u).cotangent_xT;
  return out;
}

// Exact implicit gradient. The adjoint iteration v <- v dh/dx + dL/dx*
// terminates in at most S steps because dh/dx is strictly block-triangular.
inline GradientResult exact_ift_grad(const Chain& chain, const StateStack& stack_star, const Vector& x_T, const Vector& target_x0,
                                     const GradientMode& mode, LossKind kind = LossKind::squared, AdjointWorkspace* workspace = nullptr) {
  mode.validate();
  require_dim(target_x0.size(), chain.dim(), "exact_ift_grad (target)");
  const int max_iters = mode.adjoint_max_iters < 0 ? chain.length() + 5 : mode.adjoint_max_iters;
  GradientResult out;
  out.x0 = stack_star.col(chain.length() - 1);
  out.loss = loss(target_x0, out.x0, kind);
  const StateStack b = detail::seed_x0_row(chain, loss_gradient(target_x0, out.x0, kind));

  AdjointWorkspace local;
  AdjointWorkspace& ws = workspace != nullptr ? *workspace : local;
  ws = AdjointWorkspace{b, {}, 0};
  bool converged = false;
  for (int it = 1; it <= max_iters; ++it) {
    StateStack next = chain.h_tilde_vjp(stack_star, x_T, ws.v).cotangent_stack + b;
    const double r = (next - ws.v).norm();
    ws.v = std::move(next);
    ws.residuals.push_back(r);
    ws.iters = it;
    if (!ws.v.allFinite()) throw AdjointError("exact_ift_grad: non-finite adjoint at iteration " + std::to_string(it));
    if (r <= mode.adjoint_tol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw AdjointError("exact_ift_grad: adjoint did not converge in " + std::to_string(max_iters) + " iterations (last residual " +
                       std::to_string(ws.residuals.empty() ? 0.0 : ws.residuals.back()) + ")");
  }
  out.grad = chain.h_tilde_vjp(stack_star, x_T, ws.v).cotangent_xT;
  return out;
}

// Backpropagation through the sequential rollout (the naive baseline):
//   cot_j = sqrt(a_{j-1}/a_j) cot_{j-1} + c1_j J_eps(x_j)^T cot_{j-1}.
inline GradientResult rollout_backprop_grad(const Chain& chain, const Vector& x_T, const Vector& target_x0, const NoiseStack* noise,
                                            LossKind kind = LossKind::squared) {
  require_dim(target_x0.size(), chain.dim(), "rollout_backprop_grad (target)");
  const int S = chain.length();
  const StateStack states = chain.rollout(x_T, noise);
  const auto& c = chain.coefficients();
  GradientResult out;
  out.x0 = states.col(S - 1);
  out.loss = loss(target_x0, out.x0, kind);
  Vector cot = loss_gradient(target_x0, out.x0, kind);
  for (int j = 1; j <= S; ++j) {
    const auto u = static_cast<std::size_t>(j);
    const Vector x_j = j == S ? x_T : Vector(states.col(S - 1 - j));
    cot = (c.sqrt_alpha[u - 1] / c.sqrt_alpha[u]) * cot + c.c1[u] * chain.predictor().vjp(x_j, c.timesteps[u], cot);
  }
  out.grad = std::move(cot);
  return out;
}

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(Eigen::Index dim = 0, double learning_rate = 0.01)
      : m(Vector::Zero(dim)), v(Vector::Zero(dim)), lr(learning_rate) {}
};

// Bias-corrected Adam update of `param` in place.
inline void adam_step(AdamState& state, Vector& param, const Vector& grad) {
  require_dim(param.size(), state.m.size(), "adam_step (param)");
  require_dim(grad.size(), state.m.size(), "adam_step (grad)");
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  param.array() -= state.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + state.eps);
}

}  // namespace parseq
