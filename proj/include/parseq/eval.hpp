#pragma once

#include <cmath>
#include <string>

#include "parseq/errors.hpp"
#include "parseq/types.hpp"

namespace parseq {

struct MomentSummary {
  Vector mean;
  Vector var_diag;  // unbiased
  long n = 0;
};

// samples: one sample per column (D x n).
inline MomentSummary sample_moments(const Eigen::MatrixXd& samples) {
  const Eigen::Index n = samples.cols();
  if (n < 2) throw InsufficientDataError("sample_moments: need at least 2 samples, got " + std::to_string(n));
  MomentSummary s;
  s.n = static_cast<long>(n);
  s.mean = samples.rowwise().mean();
  const Eigen::MatrixXd centered = samples.colwise() - s.mean;
  s.var_diag = centered.rowwise().squaredNorm() / static_cast<double>(n - 1);
  return s;
}

// W2 between N(mu1, diag(var1)) and N(mu2, diag(var2)):
//   W2^2 = ||mu1 - mu2||^2 + sum_i (sqrt(var1_i) - sqrt(var2_i))^2.
inline double gaussian_w2(const Vector& mu1, const Vector& var1, const Vector& mu2, const Vector& var2) {
  require_dim(var1.size(), mu1.size(), "gaussian_w2 (var1)");
  require_dim(mu2.size(), mu1.size(), "gaussian_w2 (mu2)");
  require_dim(var2.size(), mu1.size(), "gaussian_w2 (var2)");
  if ((var1.array() < 0.0).any() || (var2.array() < 0.0).any()) throw NumericDomainError("gaussian_w2: negative variance");
  const double mean_term = (mu1 - mu2).squaredNorm();
  const double cov_term = (var1.array().sqrt() - var2.array().sqrt()).square().sum();
  return std::sqrt(mean_term + cov_term);
}

}  // namespace parseq
