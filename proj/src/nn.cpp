#include "learn/nn.hpp"

#include <cmath>

#include "learn/error.hpp"

namespace learn::nn {

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : entries_) v.zero_grad();
}

bool ParameterSet::grads_finite() const {
  for (const auto& [name, v] : entries_) {
    if (v.grad().size() && !v.grad().allFinite()) return false;
  }
  return true;
}

std::map<std::string, Eigen::MatrixXd> ParameterSet::snapshot() const {
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& [name, v] : entries_) out[name] = v.value();
  return out;
}

void ParameterSet::load(const std::map<std::string, Eigen::MatrixXd>& tensors, const std::string& prefix) {
  for (auto& [name, v] : entries_) {
    const auto it = tensors.find(prefix + name);
    if (it == tensors.end()) throw Error(ErrorCode::ParseError, "checkpoint is missing tensor " + prefix + name);
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor " + prefix + name + " has the wrong shape");
    }
    v.mutable_value() = it->second;
  }
}

Linear::Linear(int in, int out, Rng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / (in + out));
  Eigen::MatrixXd w(in, out);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
  weight = ag::parameter(std::move(w));
  bias = ag::parameter(Eigen::MatrixXd::Zero(1, out));
}

void Linear::register_into(ParameterSet& ps, const std::string& name) const {
  ps.add(name + ".weight", weight);
  ps.add(name + ".bias", bias);
}

LayerNorm::LayerNorm(int dim)
    : gamma(ag::parameter(Eigen::MatrixXd::Ones(1, dim))), beta(ag::parameter(Eigen::MatrixXd::Zero(1, dim))) {}

void LayerNorm::register_into(ParameterSet& ps, const std::string& name) const {
  ps.add(name + ".gamma", gamma);
  ps.add(name + ".beta", beta);
}

MultiHeadAttention::MultiHeadAttention(int query_dim, int context_dim, int model_dim, int num_heads, Rng& rng)
    : q(query_dim, model_dim, rng),
      k(context_dim, model_dim, rng),
      v(context_dim, model_dim, rng),
      o(model_dim, query_dim, rng),
      heads(num_heads) {
  if (num_heads <= 0 || model_dim % num_heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "attention width must be divisible by the head count");
  }
}

Var MultiHeadAttention::operator()(const Var& x, const Var& context, const Eigen::MatrixXd* mask) const {
  const Var qs = q(x);
  const Var ks = k(context);
  const Var vs = v(context);
  const Eigen::Index head_dim = qs.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  if (heads == 1) return o(ag::attention(qs, ks, vs, mask, scale));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    outs.push_back(ag::attention(ag::cols(qs, h * head_dim, head_dim), ag::cols(ks, h * head_dim, head_dim),
                                 ag::cols(vs, h * head_dim, head_dim), mask, scale));
  }
  return o(ag::hcat(outs));
}

void MultiHeadAttention::register_into(ParameterSet& ps, const std::string& name) const {
  q.register_into(ps, name + ".q");
  k.register_into(ps, name + ".k");
  v.register_into(ps, name + ".v");
  o.register_into(ps, name + ".o");
}

Conv2d::Conv2d(int in, int out, int k, Rng& rng, double gain) : kernel(k) {
  const double fan_in = static_cast<double>(in) * k * k;
  const double bound = gain * std::sqrt(3.0 / fan_in);
  Eigen::MatrixXd w(out, Eigen::Index(in) * k * k);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
  weight = ag::parameter(std::move(w));
  bias = ag::parameter(Eigen::MatrixXd::Zero(out, 1));
}

void Conv2d::register_into(ParameterSet& ps, const std::string& name) const {
  ps.add(name + ".weight", weight);
  ps.add(name + ".bias", bias);
}

GroupNorm::GroupNorm(int channels, int max_groups)
    : gamma(ag::parameter(Eigen::MatrixXd::Ones(channels, 1))), beta(ag::parameter(Eigen::MatrixXd::Zero(channels, 1))) {
  groups = std::max(1, std::min(max_groups, channels));
  while (channels % groups != 0) --groups;
}

void GroupNorm::register_into(ParameterSet& ps, const std::string& name) const {
  ps.add(name + ".gamma", gamma);
  ps.add(name + ".beta", beta);
}

AdamW::AdamW(ParameterSet params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, v] : params_.entries()) {
    m_.push_back(Eigen::MatrixXd::Zero(v.rows(), v.cols()));
    v_.push_back(Eigen::MatrixXd::Zero(v.rows(), v.cols()));
  }
}

void AdamW::step() {
  ++step_;
  double scale = 1.0;
  if (cfg_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, p] : params_.entries()) {
      if (p.grad().size()) sq += p.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var p = entries[i].second;
    if (p.grad().size() == 0) continue;
    const Eigen::MatrixXd g = p.grad() * scale;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Eigen::MatrixXd& value = p.mutable_value();
    value *= (1.0 - cfg_.lr * cfg_.weight_decay);
    value.array() -= cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace learn::nn
