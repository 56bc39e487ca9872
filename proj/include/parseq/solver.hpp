#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "parseq/errors.hpp"

namespace parseq {

enum class SolverMethod { picard, anderson };

inline std::string_view to_string(SolverMethod m) { return m == SolverMethod::picard ? "picard" : "anderson"; }

inline SolverMethod parse_solver_method(std::string_view s) {
  if (s == "picard") return SolverMethod::picard;
  if (s == "anderson") return SolverMethod::anderson;
  throw ConfigError("unknown solver method '" + std::string(s) + "'");
}

struct SolverConfig {
  SolverMethod method = SolverMethod::anderson;
  int max_iters = 15;
  double tol = 1e-3;  // on the absolute l2 residual of the flattened stack
  int history_m = 5;
  double mixing_beta = 1.0;
  double ridge_lambda = 1e-4;  // relative to the newest squared residual norm

  // 15 forward steps for the deterministic chain, 50 when eta > 0.
  static SolverConfig for_eta(double eta, SolverMethod method = SolverMethod::anderson) {
    SolverConfig cfg;
    cfg.method = method;
    cfg.max_iters = eta > 0.0 ? 50 : 15;
    return cfg;
  }

  void validate() const {
    if (max_iters < 1) throw ConfigError("solver: max_iters must be >= 1");
    if (history_m < 1) throw ConfigError("solver: history_m must be >= 1");
    if (!(tol >= 0.0)) throw ConfigError("solver: tol must be >= 0");
    if (!(mixing_beta > 0.0 && mixing_beta <= 1.0)) throw ConfigError("solver: mixing_beta must lie in (0,1]");
    if (!(ridge_lambda >= 0.0)) throw ConfigError("solver: ridge_lambda must be >= 0");
  }
};

// residuals[i] is ||map(x_{i+1}) - x_{i+1}||_2 for the (i+1)-th iterate; the
// returned stack is the last iterate, so converged implies its residual is
// residuals.back() <= tol.
struct FixedPointResult {
  Eigen::MatrixXd stack;
  std::vector<double> residuals;
  int iters = 0;
  bool converged = false;
  int picard_fallbacks = 0;  // Anderson steps replaced by a plain map step
};

namespace detail {

template <class Map>
Eigen::MatrixXd apply_map(Map& map, const Eigen::MatrixXd& x, int iter) {
  Eigen::MatrixXd g = map(x);
  if (g.rows() != x.rows() || g.cols() != x.cols()) throw ShapeError("fixed-point map changed the state shape");
  if (!g.allFinite()) throw DivergenceError("solver: non-finite map output at iteration " + std::to_string(iter), iter);
  return g;
}

}  // namespace detail

template <class Map>
FixedPointResult picard_solve(Map&& map, const Eigen::MatrixXd& init, const SolverConfig& cfg) {
  cfg.validate();
  if (!init.allFinite()) throw DivergenceError("picard: non-finite initial state", 0);
  FixedPointResult res;
  Eigen::MatrixXd x = init;
  Eigen::MatrixXd g = detail::apply_map(map, x, 0);
  for (int it = 1; it <= cfg.max_iters; ++it) {
    x = std::move(g);
    g = detail::apply_map(map, x, it);
    const double r = (g - x).norm();
    res.residuals.push_back(r);
    res.iters = it;
    if (r <= cfg.tol) {
      res.converged = true;
      break;
    }
  }
  res.stack = std::move(x);
  return res;
}

// Type-II Anderson acceleration. With history pairs (X_j, G_j = map(X_j)) and
// residuals F_j = G_j - X_j, the mixing weights solve
//   min ||F gamma||^2 + lambda ||gamma||^2   s.t.  sum(gamma) = 1,
// i.e. gamma = H^{-1} 1 / (1^T H^{-1} 1) with H = F^T F + lambda I, and
//   x+ = (1 - beta) X gamma + beta G gamma.
// lambda is scaled by ||F_newest||^2 so the ridge keeps the same relative
// weight as the residuals shrink.
template <class Map>
FixedPointResult anderson_solve(Map&& map, const Eigen::MatrixXd& init, const SolverConfig& cfg) {
  cfg.validate();
  if (!init.allFinite()) throw DivergenceError("anderson: non-finite initial state", 0);
  const Eigen::Index rows = init.rows(), cols = init.cols();
  const Eigen::Index n = init.size();
  auto flat = [](const Eigen::MatrixXd& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); };

  std::deque<Eigen::VectorXd> xs, gs;
  FixedPointResult res;
  Eigen::MatrixXd x = init;
  Eigen::MatrixXd g = detail::apply_map(map, x, 0);
  xs.emplace_back(flat(x));
  gs.emplace_back(flat(g));

  for (int it = 1; it <= cfg.max_iters; ++it) {
    const auto k = static_cast<Eigen::Index>(xs.size());
    Eigen::VectorXd next;
    bool mixed = false;
    if (k > 1) {
      Eigen::MatrixXd F(n, k);
      for (Eigen::Index j = 0; j < k; ++j) F.col(j) = gs[static_cast<std::size_t>(j)] - xs[static_cast<std::size_t>(j)];
      Eigen::MatrixXd H = F.transpose() * F;
      const double scale = H(k - 1, k - 1);
      if (scale > 0.0 && std::isfinite(scale)) {
        H.diagonal().array() += cfg.ridge_lambda * scale;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        const Eigen::VectorXd piv = ldlt.vectorD().cwiseAbs();
        if (ldlt.info() == Eigen::Success && piv.minCoeff() > 1e-14 * piv.maxCoeff()) {
          const Eigen::VectorXd alpha = ldlt.solve(Eigen::VectorXd::Ones(k));
          const double s = alpha.sum();
          if (alpha.allFinite() && std::abs(s) > 1e-300) {
            const Eigen::VectorXd gamma = alpha / s;
            Eigen::VectorXd xg = Eigen::VectorXd::Zero(n), gg = Eigen::VectorXd::Zero(n);
            for (Eigen::Index j = 0; j < k; ++j) {
              xg += gamma[j] * xs[static_cast<std::size_t>(j)];
              gg += gamma[j] * gs[static_cast<std::size_t>(j)];
            }
            next = (1.0 - cfg.mixing_beta) * xg + cfg.mixing_beta * gg;
            mixed = next.allFinite();
          }
        }
      }
      if (!mixed) ++res.picard_fallbacks;
    }
    if (!mixed) next = (1.0 - cfg.mixing_beta) * xs.back() + cfg.mixing_beta * gs.back();

    x = Eigen::Map<const Eigen::MatrixXd>(next.data(), rows, cols);
    g = detail::apply_map(map, x, it);
    const double r = (g - x).norm();
    res.residuals.push_back(r);
    res.iters = it;
    xs.emplace_back(flat(x));
    gs.emplace_back(flat(g));
    while (static_cast<int>(xs.size()) > cfg.history_m) {
      xs.pop_front();
      gs.pop_front();
    }
    if (r <= cfg.tol) {
      res.converged = true;
      break;
    }
  }
  res.stack = std::move(x);
  return res;
}

template <class Map>
FixedPointResult solve_fixed_point(Map&& map, const Eigen::MatrixXd& init, const SolverConfig& cfg) {
  return cfg.method == SolverMethod::picard ? picard_solve(map, init, cfg) : anderson_solve(map, init, cfg);
}

}  // namespace parseq
