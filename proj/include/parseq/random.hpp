#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "parseq/types.hpp"

namespace parseq {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Independent generator per (seed, purpose, counter). Adding a new purpose
// never shifts the draws of an existing one.
inline std::mt19937_64 rng_stream(std::uint64_t seed, std::string_view purpose, std::uint64_t counter = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ fnv1a(purpose)) + counter));
}

inline Eigen::MatrixXd standard_normal(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(rng);
  }
  return m;
}

inline Vector standard_normal(std::mt19937_64& rng, Eigen::Index n) { return standard_normal(rng, n, 1).col(0); }

inline NoiseStack sample_noise(std::uint64_t seed, Eigen::Index dim, Eigen::Index steps, std::uint64_t counter = 0) {
  auto rng = rng_stream(seed, "noise", counter);
  return {standard_normal(rng, dim, steps)};
}

inline Vector sample_xT(std::uint64_t seed, Eigen::Index dim, std::uint64_t counter = 0) {
  auto rng = rng_stream(seed, "x_T", counter);
  return standard_normal(rng, dim);
}

}  // namespace parseq
