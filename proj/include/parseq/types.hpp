#pragma once

#include <Eigen/Dense>

#include "parseq/errors.hpp"

namespace parseq {

using Vector = Eigen::VectorXd;

// Joint latent stack, one state per column: column k holds the latent k+1
// levels below x_T, so column 0 is x_{T-1} and column S-1 is x_0.
using StateStack = Eigen::MatrixXd;

// Injected noises, one column per transition, aligned with StateStack:
// column k is the draw used by the transition that produces column k.
struct NoiseStack {
  Eigen::MatrixXd eps;

  static NoiseStack zeros(Eigen::Index dim, Eigen::Index steps) { return {Eigen::MatrixXd::Zero(dim, steps)}; }
  Eigen::Index dim() const noexcept { return eps.rows(); }
  Eigen::Index size() const noexcept { return eps.cols(); }
};

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw ShapeError(std::string(what) + ": dimension " + std::to_string(got) + " does not match expected " + std::to_string(want));
  }
}

}  // namespace parseq
