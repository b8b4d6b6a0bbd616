#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "learn/autograd.hpp"
#include "learn/random.hpp"

namespace learn::nn {

using ag::Var;

/// Ordered, named view over a model's learnable leaves. Names are stable
/// and double as checkpoint tensor keys.
class ParameterSet {
 public:
  void add(std::string name, Var v) { entries_.emplace_back(std::move(name), std::move(v)); }
  void extend(const std::string& prefix, const ParameterSet& other) {
    for (const auto& [n, v] : other.entries_) entries_.emplace_back(prefix + n, v);
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  bool grads_finite() const;

  std::map<std::string, Eigen::MatrixXd> snapshot() const;
  /// Copies values in by name; throws ShapeMismatch / ParseError on a
  /// missing or misshapen tensor.
  void load(const std::map<std::string, Eigen::MatrixXd>& tensors, const std::string& prefix = "");

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

/// Row-major affine layer: y = x W + b, x is n x in.
struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(int in, int out, Rng& rng, double gain = 1.0);
  Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }
  void register_into(ParameterSet& ps, const std::string& name) const;
};

struct LayerNorm {
  Var gamma;  // 1 x d
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
  void register_into(ParameterSet& ps, const std::string& name) const;
};

/// Multi-head attention over row-major token matrices.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int query_dim, int context_dim, int model_dim, int heads, Rng& rng);
  /// `mask` is queries x keys (0 / -inf), shared by every head.
  Var operator()(const Var& x, const Var& context, const Eigen::MatrixXd* mask = nullptr) const;
  void register_into(ParameterSet& ps, const std::string& name) const;
};

/// Convolution on channel x (B*H*W) maps; weight is out x (k*k*in) with
/// columns ordered (ky, kx, in).
struct Conv2d {
  Var weight;
  Var bias;  // out x 1
  int kernel = 3;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, Rng& rng, double gain = 1.0);
  Var operator()(const Var& x, int batch, int height, int width) const {
    return ag::conv2d(x, weight, bias, batch, height, width, kernel);
  }
  void register_into(ParameterSet& ps, const std::string& name) const;
};

struct GroupNorm {
  Var gamma;  // C x 1
  Var beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(int channels, int max_groups);
  Var operator()(const Var& x, int batch) const { return ag::group_norm(x, batch, groups, gamma, beta); }
  void register_into(ParameterSet& ps, const std::string& name) const;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

/// Decoupled-weight-decay Adam. Moments are keyed by parameter position in
/// the set it was constructed with.
class AdamW {
 public:
  AdamW(ParameterSet params, AdamWConfig cfg);
  void step();
  void zero_grad() { params_.zero_grad(); }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParameterSet params_;
  AdamWConfig cfg_;
  std::vector<Eigen::MatrixXd> m_, v_;
  long step_ = 0;
};

}  // namespace learn::nn
