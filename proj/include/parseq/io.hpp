#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parseq/eval.hpp"
#include "parseq/errors.hpp"
#include "parseq/predictor.hpp"
#include "parseq/schedule.hpp"
#include "parseq/types.hpp"

namespace parseq {

// Binary stack file:
//   "PSDQ1" | int64 S | int64 D | int64 T | float64 eta | S*D float64
// all little-endian, payload row-major with one row per state.
inline constexpr std::array<char, 5> kStackMagic{'P', 'S', 'D', 'Q', '1'};

struct StackFile {
  Eigen::MatrixXd states;  // D x S, column k = row k of the file
  std::int64_t T = 0;
  double eta = 0.0;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b.data(), 8);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path, const char* field) {
  std::array<unsigned char, 8> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw ParseError("'" + path + "': truncated while reading " + field);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

inline double get_f64(std::istream& in, const std::string& path, const char* field) {
  return std::bit_cast<double>(get_u64(in, path, field));
}

}  // namespace detail

inline void write_stack_binary(const std::string& path, const Eigen::MatrixXd& states, std::int64_t T, double eta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out.write(kStackMagic.data(), static_cast<std::streamsize>(kStackMagic.size()));
  detail::put_u64(out, static_cast<std::uint64_t>(states.cols()));
  detail::put_u64(out, static_cast<std::uint64_t>(states.rows()));
  detail::put_u64(out, static_cast<std::uint64_t>(T));
  detail::put_f64(out, eta);
  for (Eigen::Index k = 0; k < states.cols(); ++k) {
    for (Eigen::Index d = 0; d < states.rows(); ++d) detail::put_f64(out, states(d, k));
  }
  if (!out) throw ParseError("write to '" + path + "' failed");
}

inline StackFile read_stack_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::array<char, 5> magic{};
  if (!in.read(magic.data(), 5)) throw ParseError("'" + path + "': truncated while reading magic");
  if (magic != kStackMagic) throw ParseError("'" + path + "': bad magic (expected PSDQ1)");
  const auto S = static_cast<std::int64_t>(detail::get_u64(in, path, "S"));
  const auto D = static_cast<std::int64_t>(detail::get_u64(in, path, "D"));
  StackFile f;
  f.T = static_cast<std::int64_t>(detail::get_u64(in, path, "T"));
  f.eta = detail::get_f64(in, path, "eta");
  constexpr std::int64_t kMaxEntries = std::int64_t{1} << 32;
  if (S < 0 || D < 0 || (D > 0 && S > kMaxEntries / D)) throw ParseError("'" + path + "': implausible header S=" + std::to_string(S) + " D=" + std::to_string(D));
  f.states.resize(D, S);
  for (std::int64_t k = 0; k < S; ++k) {
    for (std::int64_t d = 0; d < D; ++d) f.states(d, k) = detail::get_f64(in, path, "payload");
  }
  return f;
}

// CSV with columns k,t,dim0..dim{D-1}; `timesteps[k]` labels row k.
inline void write_stack_csv(std::ostream& out, const Eigen::MatrixXd& states, const std::vector<int>& timesteps) {
  out << "k,t";
  for (Eigen::Index d = 0; d < states.rows(); ++d) out << ",dim" << d;
  out << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index k = 0; k < states.cols(); ++k) {
    out << k << ',' << (static_cast<std::size_t>(k) < timesteps.size() ? timesteps[static_cast<std::size_t>(k)] : -1);
    for (Eigen::Index d = 0; d < states.rows(); ++d) out << ',' << states(d, k);
    out << '\n';
  }
}

inline void write_residual_csv(std::ostream& out, const std::vector<double>& residuals) {
  out << "iter,residual_l2\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < residuals.size(); ++i) out << (i + 1) << ',' << residuals[i] << '\n';
}

inline nlohmann::json to_json(const ScheduleConfig& c) {
  return {{"T", c.T},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"eta", c.eta},
          {"subsequence", {{"kind", std::string(to_string(c.kind))}, {"S", c.S}}}};
}

inline ScheduleConfig schedule_config_from_json(const nlohmann::json& j) {
  const std::string ctx = "schedule";
  ScheduleConfig c;
  try {
    c.T = detail::require_field(j, "T", ctx).get<int>();
    c.beta_start = detail::require_field(j, "beta_start", ctx).get<double>();
    c.beta_end = detail::require_field(j, "beta_end", ctx).get<double>();
    c.eta = detail::require_field(j, "eta", ctx).get<double>();
    const auto& sub = detail::require_field(j, "subsequence", ctx);
    c.kind = parse_subsequence_kind(detail::require_field(sub, "kind", ctx + ".subsequence").get<std::string>());
    c.S = detail::require_field(sub, "S", ctx + ".subsequence").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ctx + ": " + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const MomentSummary& m) {
  return {{"mean", detail::from_vector(m.mean)}, {"var_diag", detail::from_vector(m.var_diag)}, {"n", m.n}};
}

}  // namespace parseq
