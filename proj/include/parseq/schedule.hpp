#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "parseq/errors.hpp"

namespace parseq {

// Variance schedule over the full chain t = 1..T. Index 0 of `betas` and
// `alpha_bars` holds t = 1; alpha_bar(0) is the boundary value 1.
class DiffusionSchedule {
 public:
  DiffusionSchedule(std::vector<double> betas, double eta) : betas_(std::move(betas)), eta_(eta) {
    if (betas_.empty()) throw ConfigError("schedule: T must be >= 1");
    if (!(eta_ >= 0.0)) throw ConfigError("schedule: eta must be >= 0");
    alpha_bars_.reserve(betas_.size());
    double prod = kAlphaBarZero;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      const double b = betas_[i];
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("schedule: beta[" + std::to_string(i + 1) + "] outside (0,1)");
      prod *= (1.0 - b);
      alpha_bars_.push_back(prod);
    }
  }

  static constexpr double kAlphaBarZero = 1.0;

  int T() const noexcept { return static_cast<int>(betas_.size()); }
  double eta() const noexcept { return eta_; }
  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

  DiffusionSchedule with_eta(double eta) const { return DiffusionSchedule(betas_, eta); }

  // t in [0, T]; t = 0 is the fully denoised boundary.
  double alpha_bar(int t) const {
    if (t < 0 || t > T()) throw IndexError("alpha_bar: timestep " + std::to_string(t) + " outside [0," + std::to_string(T()) + "]");
    return t == 0 ? kAlphaBarZero : alpha_bars_[static_cast<std::size_t>(t - 1)];
  }

  // sigma_t(eta) for the full-chain transition t -> t-1, t in [1, T].
  double sigma(int t) const;
  // Coefficient on eps_theta^{(t)}(x_t) in the transition t -> t-1.
  double c1(int t) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  double eta_;
};

// sigma between two arbitrary levels (used on subsequences where the
// predecessor of tau_i is tau_{i-1}).
inline double sigma_between(double alpha_prev, double alpha_cur, double eta) {
  if (eta == 0.0) return 0.0;
  const double r1 = (1.0 - alpha_prev) / (1.0 - alpha_cur);
  const double r2 = 1.0 - alpha_cur / alpha_prev;
  return eta * std::sqrt(std::max(r1, 0.0)) * std::sqrt(std::max(r2, 0.0));
}

inline double c1_between(double alpha_prev, double alpha_cur, double sigma) {
  double radicand = 1.0 - alpha_prev - sigma * sigma;
  if (radicand < 0.0) {
    // rounding at the alpha_prev = 1 boundary lands a hair below zero
    if (radicand > -1e-14) {
      radicand = 0.0;
    } else {
      throw NumericDomainError("c1: negative radicand 1 - alpha_prev - sigma^2 = " + std::to_string(radicand));
    }
  }
  return std::sqrt(radicand) - std::sqrt(alpha_prev * (1.0 - alpha_cur) / alpha_cur);
}

inline double DiffusionSchedule::sigma(int t) const {
  if (t < 1 || t > T()) throw IndexError("sigma: timestep " + std::to_string(t) + " outside [1," + std::to_string(T()) + "]");
  return sigma_between(alpha_bar(t - 1), alpha_bar(t), eta_);
}

inline double DiffusionSchedule::c1(int t) const {
  if (t < 1 || t > T()) throw IndexError("c1: timestep " + std::to_string(t) + " outside [1," + std::to_string(T()) + "]");
  return c1_between(alpha_bar(t - 1), alpha_bar(t), sigma(t));
}

inline DiffusionSchedule make_linear_beta_schedule(int T, double beta_start, double beta_end, double eta = 0.0) {
  if (T < 1) throw ConfigError("make_linear_beta_schedule: T must be >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0)) throw ConfigError("make_linear_beta_schedule: beta_start must be > 0");
  if (!(beta_end < 1.0)) throw ConfigError("make_linear_beta_schedule: beta_end must be < 1");
  if (!(beta_start <= beta_end)) throw ConfigError("make_linear_beta_schedule: beta_start must be <= beta_end");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  return DiffusionSchedule(std::move(betas), eta);
}

enum class SubsequenceKind { linear, quadratic };

inline std::string_view to_string(SubsequenceKind k) { return k == SubsequenceKind::linear ? "linear" : "quadratic"; }

inline SubsequenceKind parse_subsequence_kind(std::string_view s) {
  if (s == "linear") return SubsequenceKind::linear;
  if (s == "quadratic") return SubsequenceKind::quadratic;
  throw ConfigError("unknown subsequence kind '" + std::string(s) + "'");
}

// Selected timesteps tau_1 < ... < tau_S, all in [1, T].
struct TimestepSubsequence {
  std::vector<int> indices;
  SubsequenceKind kind = SubsequenceKind::linear;

  int size() const noexcept { return static_cast<int>(indices.size()); }
};

// tau_i = floor(c i) with c = T/S, or floor(c i^2) with c = T/S^2 clamped to
// >= 1. Duplicates are dropped, so the quadratic variant may return fewer
// than S entries.
inline TimestepSubsequence select_subsequence(int T, int S, SubsequenceKind kind) {
  if (S < 1) throw ConfigError("select_subsequence: S must be >= 1");
  if (S > T) throw ConfigError("select_subsequence: S=" + std::to_string(S) + " exceeds T=" + std::to_string(T));
  TimestepSubsequence out;
  out.kind = kind;
  out.indices.reserve(static_cast<std::size_t>(S));
  const auto t64 = static_cast<std::int64_t>(T);
  const auto s64 = static_cast<std::int64_t>(S);
  for (std::int64_t i = 1; i <= s64; ++i) {
    std::int64_t tau = kind == SubsequenceKind::linear ? (t64 * i) / s64 : (t64 * i * i) / (s64 * s64);
    if (tau < 1) tau = 1;
    if (out.indices.empty() || out.indices.back() != static_cast<int>(tau)) out.indices.push_back(static_cast<int>(tau));
  }
  return out;
}

// Per-level coefficients of a (possibly shortened) chain. Level j = 0..S
// maps to timestep tau_j with tau_0 = 0 and tau_S the terminal x_T level.
// Transition j (for j = 1..S) takes level j to level j-1.
struct ChainCoefficients {
  std::vector<int> timesteps;   // size S+1
  std::vector<double> alpha;    // size S+1, alpha[0] = 1
  std::vector<double> sqrt_alpha;
  std::vector<double> sigma;    // size S+1, sigma[0] unused
  std::vector<double> c1;       // size S+1, c1[0] unused

  int length() const noexcept { return static_cast<int>(timesteps.size()) - 1; }

  static ChainCoefficients build(const DiffusionSchedule& schedule, const TimestepSubsequence& sub) {
    if (sub.indices.empty()) throw ConfigError("chain: empty timestep subsequence");
    ChainCoefficients c;
    c.timesteps.push_back(0);
    for (int tau : sub.indices) {
      if (tau < 1 || tau > schedule.T()) throw ConfigError("chain: subsequence entry " + std::to_string(tau) + " outside [1,T]");
      if (tau <= c.timesteps.back()) throw ConfigError("chain: subsequence must be strictly increasing");
      c.timesteps.push_back(tau);
    }
    const std::size_t n = c.timesteps.size();
    c.alpha.resize(n);
    c.sqrt_alpha.resize(n);
    c.sigma.assign(n, 0.0);
    c.c1.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      c.alpha[j] = schedule.alpha_bar(c.timesteps[j]);
      c.sqrt_alpha[j] = std::sqrt(c.alpha[j]);
    }
    for (std::size_t j = 1; j < n; ++j) {
      c.sigma[j] = sigma_between(c.alpha[j - 1], c.alpha[j], schedule.eta());
      c.c1[j] = c1_between(c.alpha[j - 1], c.alpha[j], c.sigma[j]);
    }
    return c;
  }
};

// Serializable description of a run's schedule.
struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double eta = 0.0;
  SubsequenceKind kind = SubsequenceKind::linear;
  int S = 1000;

  DiffusionSchedule schedule() const { return make_linear_beta_schedule(T, beta_start, beta_end, eta); }
  TimestepSubsequence subsequence() const { return select_subsequence(T, S, kind); }
};

}  // namespace parseq
