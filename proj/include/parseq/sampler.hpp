#pragma once

#include <string>
#include <string_view>

#include "parseq/chain.hpp"
#include "parseq/solver.hpp"

namespace parseq {

enum class InitKind { x_T, zero };

inline std::string_view to_string(InitKind k) { return k == InitKind::x_T ? "xT" : "zero"; }

inline InitKind parse_init_kind(std::string_view s) {
  if (s == "xT" || s == "x_T") return InitKind::x_T;
  if (s == "zero") return InitKind::zero;
  throw ConfigError("unknown init '" + std::string(s) + "'");
}

inline StateStack initial_stack(const Chain& chain, const Vector& x_T, InitKind init) {
  return init == InitKind::x_T ? chain.xT_init(x_T) : chain.zero_init();
}

// Solves stack = h_tilde(stack; x_T, noise) starting from `init`.
inline FixedPointResult solve_chain(const Chain& chain, const Vector& x_T, const NoiseStack* noise, const SolverConfig& cfg,
                                    const StateStack& init) {
  auto map = [&](const Eigen::MatrixXd& s) { return chain.h_tilde(s, x_T, noise); };
  return solve_fixed_point(map, init, cfg);
}

inline FixedPointResult solve_chain(const Chain& chain, const Vector& x_T, const NoiseStack* noise, const SolverConfig& cfg,
                                    InitKind init = InitKind::x_T) {
  return solve_chain(chain, x_T, noise, cfg, initial_stack(chain, x_T, init));
}

}  // namespace parseq
