#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parseq/errors.hpp"
#include "parseq/schedule.hpp"
#include "parseq/types.hpp"

namespace parseq {

// Noise estimator eps_theta(x, t) plus its vector-Jacobian product.
// Implementations are immutable after construction; predict and vjp may be
// called concurrently from any number of threads.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  virtual Eigen::Index dim() const noexcept = 0;

  Vector predict(const Vector& x, int t) const {
    require_dim(x.size(), dim(), "predict");
    return do_predict(x, t);
  }

  // u^T * d eps_theta(x, t) / dx
  Vector vjp(const Vector& x, int t, const Vector& u) const {
    require_dim(x.size(), dim(), "vjp (x)");
    require_dim(u.size(), dim(), "vjp (u)");
    return do_vjp(x, t, u);
  }

 protected:
  virtual Vector do_predict(const Vector& x, int t) const = 0;
  virtual Vector do_vjp(const Vector& x, int t, const Vector& u) const = 0;
};

class ZeroPredictor final : public NoisePredictor {
 public:
  explicit ZeroPredictor(Eigen::Index dim) : dim_(dim) {}
  Eigen::Index dim() const noexcept override { return dim_; }

 protected:
  Vector do_predict(const Vector&, int) const override { return Vector::Zero(dim_); }
  Vector do_vjp(const Vector&, int, const Vector&) const override { return Vector::Zero(dim_); }

 private:
  Eigen::Index dim_;
};

class ConstantPredictor final : public NoisePredictor {
 public:
  explicit ConstantPredictor(Vector value) : value_(std::move(value)) {}
  Eigen::Index dim() const noexcept override { return value_.size(); }

 protected:
  Vector do_predict(const Vector&, int) const override { return value_; }
  Vector do_vjp(const Vector&, int, const Vector&) const override { return Vector::Zero(value_.size()); }

 private:
  Vector value_;
};

// MMSE noise estimate for data ~ N(mu, diag(var)): with
// x_t = sqrt(a) x_0 + sqrt(1-a) eps,
//   E[eps | x_t] = sqrt(1-a) (x_t - sqrt(a) mu) / (a var + 1 - a).
class GaussianOptimalPredictor final : public NoisePredictor {
 public:
  GaussianOptimalPredictor(Vector mu, Vector var_diag, const DiffusionSchedule& schedule)
      : mu_(std::move(mu)), var_(std::move(var_diag)), alpha_bars_(schedule.alpha_bars()) {
    require_dim(var_.size(), mu_.size(), "GaussianOptimalPredictor (var)");
    for (Eigen::Index i = 0; i < var_.size(); ++i) {
      if (!(var_[i] > 0.0)) throw ConfigError("GaussianOptimalPredictor: var[" + std::to_string(i) + "] must be > 0");
    }
  }

  Eigen::Index dim() const noexcept override { return mu_.size(); }
  const Vector& mu() const noexcept { return mu_; }
  const Vector& var() const noexcept { return var_; }

  // Diagonal of d eps / dx at timestep t.
  Vector jacobian_diag(int t) const {
    const double a = alpha(t);
    return (std::sqrt(1.0 - a) / (a * var_.array() + (1.0 - a))).matrix();
  }

 protected:
  Vector do_predict(const Vector& x, int t) const override {
    const double a = alpha(t);
    return (std::sqrt(1.0 - a) * (x.array() - std::sqrt(a) * mu_.array()) / (a * var_.array() + (1.0 - a))).matrix();
  }

  Vector do_vjp(const Vector&, int t, const Vector& u) const override {
    return (jacobian_diag(t).array() * u.array()).matrix();
  }

 private:
  double alpha(int t) const {
    if (t < 1 || t > static_cast<int>(alpha_bars_.size())) {
      throw IndexError("GaussianOptimalPredictor: timestep " + std::to_string(t) + " outside [1," + std::to_string(alpha_bars_.size()) + "]");
    }
    return alpha_bars_[static_cast<std::size_t>(t - 1)];
  }

  Vector mu_;
  Vector var_;
  std::vector<double> alpha_bars_;
};

// Fully connected tanh network on [x, t/T]; the output layer is linear.
class MlpPredictor final : public NoisePredictor {
 public:
  struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Vector bias;
  };

  MlpPredictor(std::vector<int> widths, std::vector<Layer> layers, int T)
      : widths_(std::move(widths)), layers_(std::move(layers)), T_(T) {
    if (widths_.size() < 2) throw SchemaError("mlp: widths needs at least input and output");
    if (layers_.size() + 1 != widths_.size()) throw SchemaError("mlp: expected " + std::to_string(widths_.size() - 1) + " layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].weight.rows() != widths_[l + 1] || layers_[l].weight.cols() != widths_[l]) {
        throw SchemaError("mlp: weights[" + std::to_string(l) + "] shape does not match widths");
      }
      if (layers_[l].bias.size() != widths_[l + 1]) throw SchemaError("mlp: biases[" + std::to_string(l) + "] size does not match widths");
    }
    if (widths_.front() != widths_.back() + 1) {
      throw SchemaError("mlp: input width must be output width + 1 (time scalar), got " + std::to_string(widths_.front()) + " and " +
                        std::to_string(widths_.back()));
    }
    if (T_ < 1) throw ConfigError("mlp: T must be >= 1");
  }

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static MlpPredictor random(Eigen::Index dim, const std::vector<int>& hidden, int T, std::uint64_t seed) {
    std::vector<int> widths;
    widths.push_back(static_cast<int>(dim) + 1);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(static_cast<int>(dim));
    std::mt19937_64 rng(seed);
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
      std::uniform_real_distribution<double> unif(-bound, bound);
      Layer layer{Eigen::MatrixXd(widths[l + 1], widths[l]), Vector(widths[l + 1])};
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = unif(rng);
      }
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = unif(rng);
      layers.push_back(std::move(layer));
    }
    return MlpPredictor(std::move(widths), std::move(layers), T);
  }

  Eigen::Index dim() const noexcept override { return widths_.back(); }
  const std::vector<int>& widths() const noexcept { return widths_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  int T() const noexcept { return T_; }

 protected:
  Vector do_predict(const Vector& x, int t) const override {
    Vector h = input(x, t);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = layers_[l].weight * h + layers_[l].bias;
      if (l + 1 < layers_.size()) h = h.array().tanh().matrix();
    }
    return h;
  }

  Vector do_vjp(const Vector& x, int t, const Vector& u) const override {
    // forward, keeping post-activation values of the hidden layers
    std::vector<Vector> acts;
    acts.reserve(layers_.size());
    Vector h = input(x, t);
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      h = (layers_[l].weight * h + layers_[l].bias).array().tanh().matrix();
      acts.push_back(h);
    }
    Vector g = u;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      g = layers_[l].weight.transpose() * g;
      if (l > 0) g = (g.array() * (1.0 - acts[l - 1].array().square())).matrix();
    }
    return g.head(dim());
  }

 private:
  Vector input(const Vector& x, int t) const {
    Vector in(x.size() + 1);
    in.head(x.size()) = x;
    in[x.size()] = static_cast<double>(t) / static_cast<double>(T_);
    return in;
  }

  std::vector<int> widths_;
  std::vector<Layer> layers_;
  int T_;
};

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path + "': " + e.what());
  }
}

inline const nlohmann::json& require_field(const nlohmann::json& j, const char* name, const std::string& ctx) {
  if (!j.is_object() || !j.contains(name)) throw ParseError(ctx + ": missing field '" + name + "'");
  return j.at(name);
}

inline Vector to_vector(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw ParseError("field '" + field + "' must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ParseError("field '" + field + "' must be an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline nlohmann::json from_vector(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

}  // namespace detail

// Weight file: {"widths":[...], "weights":[[row-major]...], "biases":[[...]...],
// "time_embed":"scalar_append"}. `expected_dim` < 0 skips the dimension check.
inline MlpPredictor load_mlp(const std::string& path, int T, Eigen::Index expected_dim = -1) {
  const nlohmann::json j = detail::read_json_file(path);
  const std::string ctx = "mlp file '" + path + "'";
  const auto& jw = detail::require_field(j, "widths", ctx);
  const auto& jweights = detail::require_field(j, "weights", ctx);
  const auto& jbiases = detail::require_field(j, "biases", ctx);
  const auto& jembed = detail::require_field(j, "time_embed", ctx);
  if (!jembed.is_string() || jembed.get<std::string>() != "scalar_append") {
    throw SchemaError(ctx + ": unsupported time_embed (expected \"scalar_append\")");
  }
  if (!jw.is_array()) throw ParseError(ctx + ": field 'widths' must be an array");
  std::vector<int> widths;
  for (const auto& w : jw) {
    if (!w.is_number_integer() || w.get<int>() < 1) throw ParseError(ctx + ": field 'widths' must hold positive integers");
    widths.push_back(w.get<int>());
  }
  if (!jweights.is_array() || !jbiases.is_array()) throw ParseError(ctx + ": fields 'weights' and 'biases' must be arrays");
  if (widths.size() < 2 || jweights.size() + 1 != widths.size() || jbiases.size() + 1 != widths.size()) {
    throw SchemaError(ctx + ": layer count does not match widths");
  }
  if (expected_dim >= 0 && widths.back() != expected_dim) {
    throw SchemaError(ctx + ": network output width " + std::to_string(widths.back()) + " does not match requested dimension " +
                      std::to_string(expected_dim));
  }
  std::vector<MlpPredictor::Layer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Vector flat = detail::to_vector(jweights[l], "weights");
    const Vector bias = detail::to_vector(jbiases[l], "biases");
    const Eigen::Index rows = widths[l + 1], cols = widths[l];
    if (flat.size() != rows * cols) throw SchemaError(ctx + ": weights[" + std::to_string(l) + "] has wrong element count");
    Eigen::MatrixXd w(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = flat[r * cols + c];
    }
    layers.push_back({std::move(w), bias});
  }
  return MlpPredictor(std::move(widths), std::move(layers), T);
}

inline void save_mlp(const MlpPredictor& p, const std::string& path) {
  nlohmann::json j;
  j["widths"] = p.widths();
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (const auto& layer : p.layers()) {
    nlohmann::json flat = nlohmann::json::array();
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) flat.push_back(layer.weight(r, c));
    }
    j["weights"].push_back(std::move(flat));
    j["biases"].push_back(detail::from_vector(layer.bias));
  }
  j["time_embed"] = "scalar_append";
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// Gaussian target file: {"mu":[...], "var":[...]}.
struct GaussianTarget {
  Vector mu;
  Vector var;
};

inline GaussianTarget load_gaussian_target(const std::string& path) {
  const nlohmann::json j = detail::read_json_file(path);
  const std::string ctx = "gaussian file '" + path + "'";
  GaussianTarget g{detail::to_vector(detail::require_field(j, "mu", ctx), "mu"), detail::to_vector(detail::require_field(j, "var", ctx), "var")};
  if (g.mu.size() == 0) throw SchemaError(ctx + ": empty mu");
  if (g.var.size() != g.mu.size()) throw SchemaError(ctx + ": mu and var lengths differ");
  return g;
}

inline void save_gaussian_target(const GaussianTarget& g, const std::string& path) {
  nlohmann::json j;
  j["mu"] = detail::from_vector(g.mu);
  j["var"] = detail::from_vector(g.var);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace parseq
