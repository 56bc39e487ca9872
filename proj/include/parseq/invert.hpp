#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "parseq/chain.hpp"
#include "parseq/grad.hpp"
#include "parseq/random.hpp"
#include "parseq/sampler.hpp"
#include "parseq/solver.hpp"

namespace parseq {

struct InversionConfig {
  int epochs = 400;
  double lr = 0.01;
  GradientMode gradient;
  SolverConfig solver;
  double stop_loss = 0.0;  // stop as soon as the epoch loss is <= this
  std::uint64_t seed = 0;
  bool warm_start = true;  // reuse the previous epoch's stack* as the next solve's init
  LossKind loss_kind = LossKind::squared;

  void validate() const {
    if (epochs < 1) throw ConfigError("inversion: epochs must be >= 1");
    if (!(stop_loss >= 0.0)) throw ConfigError("inversion: stop_loss must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("inversion: lr must be > 0");
    gradient.validate();
    solver.validate();
  }
};

struct InversionRun {
  Vector x_T_hat;
  std::vector<double> loss_trace;
  double best_loss = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  NoiseStack noise;               // empty for deterministic runs
  std::vector<int> solver_iters;  // per epoch; empty for the naive method
  bool reached_stop = false;
};

namespace detail {

inline void record_loss(InversionRun& run, double l) {
  run.loss_trace.push_back(l);
  run.epochs_run = static_cast<int>(run.loss_trace.size());
  if (l < run.best_loss) run.best_loss = l;
}

inline void require_deterministic(const Chain& chain, const char* what) {
  if (chain.eta() != 0.0) throw ConfigError(std::string(what) + " requires eta = 0; use the stochastic variant");
}

// Shared epoch loop of the DEQ inversions. Only the current x_T estimate,
// one stack and the optimizer moments survive between epochs.
inline InversionRun invert_deq_impl(const Vector& x0_target, const InversionConfig& cfg, const Chain& chain, const NoiseStack* noise) {
  cfg.validate();
  require_dim(x0_target.size(), chain.dim(), "inversion target");
  if (cfg.gradient.kind == GradientKind::rollout_backprop) throw ConfigError("DEQ inversion takes phantom or exact gradients");
  InversionRun run;
  run.x_T_hat = sample_xT(cfg.seed, chain.dim());
  if (noise != nullptr) run.noise = *noise;
  AdamState adam(chain.dim(), cfg.lr);
  std::optional<StateStack> warm;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    FixedPointResult fp;
    const bool use_warm = cfg.warm_start && warm.has_value();
    try {
      fp = solve_chain(chain, run.x_T_hat, noise, cfg.solver, use_warm ? *warm : chain.xT_init(run.x_T_hat));
    } catch (const DivergenceError& e) {
      if (!use_warm) throw DivergenceError("epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
      try {
        fp = solve_chain(chain, run.x_T_hat, noise, cfg.solver, chain.xT_init(run.x_T_hat));
      } catch (const DivergenceError& e2) {
        throw DivergenceError("epoch " + std::to_string(epoch) + ": " + e2.what(), epoch);
      }
    }
    run.solver_iters.push_back(fp.iters);

    const GradientResult g = cfg.gradient.kind == GradientKind::phantom
                                 ? phantom_grad(chain, fp.stack, run.x_T_hat, noise, x0_target, cfg.gradient.tau, cfg.loss_kind)
                                 : exact_ift_grad(chain, fp.stack, run.x_T_hat, x0_target, cfg.gradient, cfg.loss_kind);
    record_loss(run, g.loss);
    if (g.loss <= cfg.stop_loss) {
      run.reached_stop = true;
      break;
    }
    adam_step(adam, run.x_T_hat, g.grad);
    if (!run.x_T_hat.allFinite()) throw DivergenceError("epoch " + std::to_string(epoch) + ": non-finite x_T estimate", epoch);
    warm = std::move(fp.stack);
  }
  return run;
}

}  // namespace detail

// Backpropagation through the full sequential rollout every epoch.
inline InversionRun invert_naive(const Vector& x0_target, const InversionConfig& cfg, const Chain& chain) {
  cfg.validate();
  detail::require_deterministic(chain, "invert_naive");
  require_dim(x0_target.size(), chain.dim(), "inversion target");
  InversionRun run;
  run.x_T_hat = sample_xT(cfg.seed, chain.dim());
  AdamState adam(chain.dim(), cfg.lr);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const GradientResult g = rollout_backprop_grad(chain, run.x_T_hat, x0_target, nullptr, cfg.loss_kind);
    detail::record_loss(run, g.loss);
    if (g.loss <= cfg.stop_loss) {
      run.reached_stop = true;
      break;
    }
    adam_step(adam, run.x_T_hat, g.grad);
  }
  return run;
}

inline InversionRun invert_deq(const Vector& x0_target, const InversionConfig& cfg, const Chain& chain) {
  detail::require_deterministic(chain, "invert_deq");
  return detail::invert_deq_impl(x0_target, cfg, chain, nullptr);
}

// The noise stack is drawn once (or supplied) and held fixed for every epoch.
inline InversionRun invert_deq_stochastic(const Vector& x0_target, const InversionConfig& cfg, const Chain& chain,
                                          const NoiseStack* noise = nullptr) {
  const NoiseStack drawn = noise != nullptr ? *noise : sample_noise(cfg.seed, chain.dim(), chain.length());
  if (drawn.dim() != chain.dim() || drawn.size() != chain.length()) throw ShapeError("invert_deq_stochastic: noise stack shape");
  return detail::invert_deq_impl(x0_target, cfg, chain, &drawn);
}

}  // namespace parseq
