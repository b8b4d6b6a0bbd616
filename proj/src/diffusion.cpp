#include "learn/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "learn/error.hpp"
#include "learn/loss_ops.hpp"
#include "learn/random.hpp"

namespace learn {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

NoiseSchedule NoiseSchedule::linear(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw Error(ErrorCode::InvalidConfig, "diffusion.num_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw Error(ErrorCode::InvalidConfig, "betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  if (num_steps == 1) {
    s.betas = Eigen::VectorXd::Constant(1, beta_start);
  } else {
    s.betas = Eigen::VectorXd::LinSpaced(num_steps, beta_start, beta_end);
  }
  s.alphas = (1.0 - s.betas.array()).matrix();
  s.alpha_bars.resize(num_steps);
  double acc = 1.0;
  for (int t = 0; t < num_steps; ++t) {
    acc *= s.alphas[t];
    s.alpha_bars[t] = acc;
  }
  return s;
}

Eigen::MatrixXd q_sample(const NoiseSchedule& s, const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise) {
  if (t < 0 || t >= s.num_steps) throw Error(ErrorCode::OutOfRange, "timestep " + std::to_string(t) + " out of range");
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols()) throw Error(ErrorCode::ShapeMismatch, "noise shape differs from x0");
  const double ab = s.alpha_bars[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

void UNetConfig::validate() const {
  if (channel_mult.empty()) throw Error(ErrorCode::InvalidConfig, "unet needs at least one level");
  if (image_size < 1 || base_channels < 1 || layout_dim < 1 || num_heads < 1 || max_groups < 1) {
    throw Error(ErrorCode::InvalidConfig, "unet sizes must be positive");
  }
  const int factor = 1 << (levels() - 1);
  if (image_size % factor != 0) {
    throw Error(ErrorCode::InvalidConfig, "image_size " + std::to_string(image_size) + " not divisible by " + std::to_string(factor));
  }
  std::set<int> sizes;
  for (int i = 0; i < levels(); ++i) {
    if (channel_mult[static_cast<std::size_t>(i)] < 1) throw Error(ErrorCode::InvalidConfig, "channel multipliers must be >= 1");
    const int ch = base_channels * channel_mult[static_cast<std::size_t>(i)];
    if (ch % num_heads != 0) throw Error(ErrorCode::InvalidConfig, "channels must be divisible by num_heads");
    sizes.insert(image_size >> i);
  }
  for (int r : attention_resolutions) {
    if (!sizes.count(r)) throw Error(ErrorCode::InvalidConfig, "attention resolution " + std::to_string(r) + " is not a feature-map size");
  }
}

nlohmann::json UNetConfig::to_json() const {
  return {{"image_size", image_size},
          {"base_channels", base_channels},
          {"channel_mult", channel_mult},
          {"attention_resolutions", std::vector<int>(attention_resolutions.begin(), attention_resolutions.end())},
          {"layout_dim", layout_dim},
          {"num_heads", num_heads},
          {"max_groups", max_groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  const auto res = j.at("attention_resolutions").get<std::vector<int>>();
  c.attention_resolutions = std::set<int>(res.begin(), res.end());
  c.layout_dim = j.at("layout_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.max_groups = j.at("max_groups").get<int>();
  c.validate();
  return c;
}

void DiffusionConfig::validate() const {
  unet.validate();
  if (beta_reference_steps < 0) throw Error(ErrorCode::InvalidConfig, "diffusion.beta_reference_steps must be >= 0");
  make_schedule();
}

NoiseSchedule DiffusionConfig::make_schedule() const {
  if (num_steps < 1) throw Error(ErrorCode::InvalidConfig, "diffusion.num_steps must be >= 1");
  const double scale = beta_reference_steps > 0 ? static_cast<double>(beta_reference_steps) / num_steps : 1.0;
  if (beta_end * scale >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "diffusion.num_steps=" + std::to_string(num_steps) +
                                              " is too few for beta_reference_steps=" +
                                              std::to_string(beta_reference_steps) + " (scaled beta_end >= 1)");
  }
  return NoiseSchedule::linear(num_steps, beta_start * scale, beta_end * scale);
}

nlohmann::json DiffusionConfig::to_json() const {
  return {{"unet", unet.to_json()},
          {"num_steps", num_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"beta_reference_steps", beta_reference_steps},
          {"use_layout", use_layout}};
}

DiffusionConfig DiffusionConfig::from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  c.unet = UNetConfig::from_json(j.at("unet"));
  c.num_steps = j.at("num_steps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  c.beta_reference_steps = j.at("beta_reference_steps").get<int>();
  c.use_layout = j.at("use_layout").get<bool>();
  c.validate();
  return c;
}

AttentionMask build_attention_mask(const Layout& layout, int resolution, int extra) {
  if (resolution < 1) throw Error(ErrorCode::OutOfRange, "mask resolution must be >= 1");
  if (extra < 0) throw Error(ErrorCode::OutOfRange, "extra token count must be >= 0");
  const auto n = static_cast<Eigen::Index>(layout.size());
  AttentionMask m;
  m.resolution = resolution;
  m.values = Eigen::MatrixXd::Constant(Eigen::Index(resolution) * resolution, n + extra + 1, kNegInf);
  for (int r = 0; r < resolution; ++r) {
    const double cy = (r + 0.5) / resolution;
    for (int c = 0; c < resolution; ++c) {
      const double cx = (c + 0.5) / resolution;
      const Eigen::Index p = Eigen::Index(r) * resolution + c;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (box_contains(layout.elements[static_cast<std::size_t>(i)].box, cx, cy)) m.values(p, i) = 0.0;
      }
    }
  }
  m.values.rightCols(extra + 1).setZero();
  return m;
}

Eigen::MatrixXd masked_cross_attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& layout_embs,
                                       const AttentionMask& mask) {
  if (q.cols() != layout_embs.cols()) throw Error(ErrorCode::ShapeMismatch, "query and layout dims differ");
  if (mask.values.rows() != q.rows() || mask.values.cols() != layout_embs.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "mask is " + std::to_string(mask.values.rows()) + "x" +
                                              std::to_string(mask.values.cols()) + ", expected " +
                                              std::to_string(q.rows()) + "x" + std::to_string(layout_embs.rows()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Eigen::MatrixXd logits = (q * layout_embs.transpose() + mask.values) * scale;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits * layout_embs;
}

Eigen::MatrixXd timestep_embedding(const std::vector<int>& timesteps, int dim) {
  const int half = dim / 2;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(timesteps.size()), dim);
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
      const double arg = timesteps[b] * freq;
      out(static_cast<Eigen::Index>(b), i) = std::sin(arg);
      out(static_cast<Eigen::Index>(b), half + i) = std::cos(arg);
    }
  }
  return out;
}

namespace {

ResBlock make_res_block(int in, int out, int temb_dim, int max_groups, Rng& rng) {
  ResBlock b;
  b.norm1 = nn::GroupNorm(in, max_groups);
  b.conv1 = nn::Conv2d(in, out, 3, rng);
  b.time_proj = nn::Linear(temb_dim, out, rng);
  b.norm2 = nn::GroupNorm(out, max_groups);
  b.conv2 = nn::Conv2d(out, out, 3, rng, 0.1);
  b.has_skip = in != out;
  if (b.has_skip) b.skip = nn::Conv2d(in, out, 1, rng);
  return b;
}

CrossAttentionBlock make_cross_block(int channels, int layout_dim, int heads, int max_groups, int res, Rng& rng) {
  CrossAttentionBlock b;
  b.norm = nn::GroupNorm(channels, max_groups);
  b.attn = nn::MultiHeadAttention(channels, layout_dim, channels, heads, rng);
  b.resolution = res;
  return b;
}

void register_res(const ResBlock& b, nn::ParameterSet& ps, const std::string& name) {
  b.norm1.register_into(ps, name + ".norm1");
  b.conv1.register_into(ps, name + ".conv1");
  b.time_proj.register_into(ps, name + ".time_proj");
  b.norm2.register_into(ps, name + ".norm2");
  b.conv2.register_into(ps, name + ".conv2");
  if (b.has_skip) b.skip.register_into(ps, name + ".skip");
}

void register_cross(const CrossAttentionBlock& b, nn::ParameterSet& ps, const std::string& name) {
  b.norm.register_into(ps, name + ".norm");
  b.attn.register_into(ps, name + ".attn");
}

}  // namespace

struct GeneratorModel::Trace {
  bool done = false;
  Eigen::MatrixXd first;
};

GeneratorModel::GeneratorModel(DiffusionConfig config, int text_dim, std::uint64_t seed)
    : config_(std::move(config)), text_dim_(text_dim) {
  config_.validate();
  if (text_dim < 1) throw Error(ErrorCode::InvalidConfig, "text_dim must be positive");
  schedule_ = config_.make_schedule();
  const UNetConfig& u = config_.unet;
  Rng rng(derive_seed(seed, "generator"));
  const int base = u.base_channels;
  const int temb = 4 * base;

  pos_proj_ = nn::Linear(4, text_dim, rng);
  layout_proj_ = nn::Linear(text_dim, u.layout_dim, rng);
  null_token_ = ag::parameter(rng.normal_matrix(1, u.layout_dim, 0.02));
  time_in_ = nn::Linear(base, temb, rng);
  time_out_ = nn::Linear(temb, temb, rng);
  conv_in_ = nn::Conv2d(3, base, 3, rng);

  int prev = base;
  for (int i = 0; i < u.levels(); ++i) {
    const int ch = base * u.channel_mult[static_cast<std::size_t>(i)];
    const int res = u.image_size >> i;
    down_blocks_.push_back(make_res_block(prev, ch, temb, u.max_groups, rng));
    if (u.attention_resolutions.count(res)) {
      down_attn_.emplace_back(make_cross_block(ch, u.layout_dim, u.num_heads, u.max_groups, res, rng));
    } else {
      down_attn_.emplace_back(std::nullopt);
    }
    prev = ch;
  }
  const int low_res = u.image_size >> (u.levels() - 1);
  mid1_ = make_res_block(prev, prev, temb, u.max_groups, rng);
  mid_attn_ = make_cross_block(prev, u.layout_dim, u.num_heads, u.max_groups, low_res, rng);
  mid2_ = make_res_block(prev, prev, temb, u.max_groups, rng);

  for (int i = u.levels() - 1; i >= 0; --i) {
    const int ch = base * u.channel_mult[static_cast<std::size_t>(i)];
    const int res = u.image_size >> i;
    up_blocks_.push_back(make_res_block(prev + ch, ch, temb, u.max_groups, rng));
    if (u.attention_resolutions.count(res)) {
      up_attn_.emplace_back(make_cross_block(ch, u.layout_dim, u.num_heads, u.max_groups, res, rng));
    } else {
      up_attn_.emplace_back(std::nullopt);
    }
    prev = ch;
  }
  out_norm_ = nn::GroupNorm(prev, u.max_groups);
  conv_out_ = nn::Conv2d(prev, 3, 3, rng, 0.0);
}

Conditioning GeneratorModel::condition(const Layout& layout, const EncoderHandle& enc,
                                       const std::vector<Embedding>& extra) const {
  Conditioning c;
  c.layout = layout;
  if (!config_.use_layout) c.layout.elements.clear();
  const auto n = static_cast<Eigen::Index>(c.layout.size());
  c.label_embeddings.resize(n, text_dim_);
  c.boxes.resize(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& el = c.layout.elements[static_cast<std::size_t>(i)];
    const Embedding e = encode_text(enc, el.label);
    if (e.size() != text_dim_) throw Error(ErrorCode::DimensionMismatch, "label embedding dimension differs from generator");
    c.label_embeddings.row(i) = e.transpose();
    c.boxes.row(i) = el.box.as_vector().transpose();
  }
  c.extra.resize(static_cast<Eigen::Index>(extra.size()), text_dim_);
  for (std::size_t i = 0; i < extra.size(); ++i) {
    if (extra[i].size() != text_dim_) throw Error(ErrorCode::DimensionMismatch, "extra token dimension differs from generator");
    c.extra.row(static_cast<Eigen::Index>(i)) = extra[i].transpose();
  }
  return c;
}

ag::Var GeneratorModel::layout_tokens(const Conditioning& c) const {
  std::vector<ag::Var> parts;
  if (c.label_embeddings.rows() > 0) {
    const ag::Var l = ag::constant(c.label_embeddings) + pos_proj_(ag::constant(c.boxes));
    parts.push_back(layout_proj_(l));
  }
  if (c.extra.rows() > 0) parts.push_back(layout_proj_(ag::constant(c.extra)));
  parts.push_back(null_token_);
  return parts.size() == 1 ? parts.front() : ag::vcat(parts);
}

ag::Var GeneratorModel::res_block(const ResBlock& b, const ag::Var& x, const ag::Var& temb, int batch, int res) const {
  ag::Var h = b.conv1(ag::silu(b.norm1(x, batch)), batch, res, res);
  h = ag::add_per_image(h, ag::transpose(b.time_proj(ag::silu(temb))), res * res);
  h = b.conv2(ag::silu(b.norm2(h, batch)), batch, res, res);
  const ag::Var skip = b.has_skip ? b.skip(x, batch, res, res) : x;
  return skip + h;
}

ag::Var GeneratorModel::cross_block(const CrossAttentionBlock& b, const ag::Var& x, const std::vector<ag::Var>& tokens,
                                    const std::vector<Conditioning>& conds, int batch, Trace* trace) const {
  const int pixels = b.resolution * b.resolution;
  const ag::Var normed = b.norm(x, batch);
  std::vector<ag::Var> outs;
  outs.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const auto& c = conds[static_cast<std::size_t>(i)];
    const AttentionMask mask = build_attention_mask(c.layout, b.resolution, static_cast<int>(c.extra.rows()));
    const ag::Var q = ag::transpose(ag::cols(normed, Eigen::Index(i) * pixels, pixels));
    const ag::Var a = b.attn(q, tokens[static_cast<std::size_t>(i)], &mask.values);
    if (trace && !trace->done && i == 0) trace->first = a.value();
    outs.push_back(ag::transpose(a));
  }
  if (trace) trace->done = true;
  return x + (outs.size() == 1 ? outs.front() : ag::hcat(outs));
}

ag::Var GeneratorModel::run(const ag::Var& x_t, const std::vector<int>& timesteps,
                            const std::vector<Conditioning>& conds, Trace* trace) const {
  const UNetConfig& u = config_.unet;
  const int batch = static_cast<int>(timesteps.size());
  const Eigen::Index pixels = Eigen::Index(u.image_size) * u.image_size;
  if (batch < 1 || static_cast<int>(conds.size()) != batch) {
    throw Error(ErrorCode::MismatchedLengths, "one timestep and one conditioning per image required");
  }
  if (x_t.rows() != 3 || x_t.cols() != pixels * batch) {
    throw Error(ErrorCode::BadShape, "x_t must be 3 x (B*" + std::to_string(pixels) + ")");
  }
  for (int t : timesteps) {
    if (t < 0 || t >= schedule_.num_steps) throw Error(ErrorCode::OutOfRange, "timestep " + std::to_string(t) + " out of range");
  }

  std::vector<ag::Var> tokens;
  tokens.reserve(conds.size());
  for (const auto& c : conds) tokens.push_back(layout_tokens(c));
  const ag::Var temb = time_out_(ag::silu(time_in_(ag::constant(timestep_embedding(timesteps, u.base_channels)))));

  int res = u.image_size;
  ag::Var h = conv_in_(x_t, batch, res, res);
  std::vector<ag::Var> skips;
  for (int i = 0; i < u.levels(); ++i) {
    h = res_block(down_blocks_[static_cast<std::size_t>(i)], h, temb, batch, res);
    if (const auto& a = down_attn_[static_cast<std::size_t>(i)]) h = cross_block(*a, h, tokens, conds, batch, trace);
    skips.push_back(h);
    if (i + 1 < u.levels()) {
      h = ag::avg_pool2(h, batch, res, res);
      res /= 2;
    }
  }
  h = res_block(mid1_, h, temb, batch, res);
  h = cross_block(mid_attn_, h, tokens, conds, batch, trace);
  h = res_block(mid2_, h, temb, batch, res);
  for (std::size_t k = 0; k < up_blocks_.size(); ++k) {
    h = ag::vcat({h, skips[skips.size() - 1 - k]});
    h = res_block(up_blocks_[k], h, temb, batch, res);
    if (const auto& a = up_attn_[k]) h = cross_block(*a, h, tokens, conds, batch, trace);
    if (k + 1 < up_blocks_.size()) {
      h = ag::upsample2(h, batch, res, res);
      res *= 2;
    }
  }
  const ag::Var v = conv_out_(ag::silu(out_norm_(h, batch)), batch, res, res);
  // The network output is read as v = sqrt(abar) eps - sqrt(1 - abar) x0,
  // which gives eps = sqrt(abar) v + sqrt(1 - abar) x_t.
  Eigen::MatrixXd a(1, x_t.cols()), b(1, x_t.cols());
  for (int i = 0; i < batch; ++i) {
    const double ab = schedule_.alpha_bars[timesteps[static_cast<std::size_t>(i)]];
    a.middleCols(i * pixels, pixels).setConstant(std::sqrt(ab));
    b.middleCols(i * pixels, pixels).setConstant(std::sqrt(1.0 - ab));
  }
  return ag::mul_row(v, ag::constant(a)) + ag::mul_row(x_t, ag::constant(b));
}

ag::Var GeneratorModel::predict_noise(const ag::Var& x_t, const std::vector<int>& timesteps,
                                      const std::vector<Conditioning>& conds) const {
  return run(x_t, timesteps, conds, nullptr);
}

Eigen::MatrixXd GeneratorModel::first_injection_output(const Eigen::MatrixXd& x_t, int timestep,
                                                       const Conditioning& cond) const {
  ag::NoGradGuard no_grad;
  Trace trace;
  run(ag::constant(x_t), {timestep}, {cond}, &trace);
  return trace.first;
}

nn::ParameterSet GeneratorModel::parameters() const {
  nn::ParameterSet ps;
  pos_proj_.register_into(ps, "pos_proj");
  layout_proj_.register_into(ps, "layout_proj");
  ps.add("null_token", null_token_);
  time_in_.register_into(ps, "time_in");
  time_out_.register_into(ps, "time_out");
  conv_in_.register_into(ps, "conv_in");
  for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
    register_res(down_blocks_[i], ps, "down" + std::to_string(i));
    if (down_attn_[i]) register_cross(*down_attn_[i], ps, "down" + std::to_string(i) + ".xattn");
  }
  register_res(mid1_, ps, "mid1");
  register_cross(mid_attn_, ps, "mid.xattn");
  register_res(mid2_, ps, "mid2");
  for (std::size_t i = 0; i < up_blocks_.size(); ++i) {
    register_res(up_blocks_[i], ps, "up" + std::to_string(i));
    if (up_attn_[i]) register_cross(*up_attn_[i], ps, "up" + std::to_string(i) + ".xattn");
  }
  out_norm_.register_into(ps, "out_norm");
  conv_out_.register_into(ps, "conv_out");
  return ps;
}

Eigen::MatrixXd to_model_space(const Image& image) { return (2.0 * image.planes().array() - 1.0).matrix(); }

Image from_model_space(int height, int width, const Eigen::MatrixXd& planes) {
  return Image::from_planes(height, width, ((planes.array() + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0).matrix());
}

ag::Var toy_image_embedding(const ag::Var& images, int batch, int height, int width, const EncoderHandle& enc) {
  if (!enc.differentiable()) throw Error(ErrorCode::BackendUnavailable, "image encoder is not differentiable");
  const Eigen::Index pixels = Eigen::Index(height) * width;
  if (images.rows() != 3 || images.cols() != pixels * batch) throw Error(ErrorCode::BadShape, "images must be 3 x (B*H*W)");
  Eigen::MatrixXd weights(1, 3);
  weights << 0.299, 0.587, 0.114;
  const ag::Var luma = ag::matmul(ag::constant(weights), images);
  const ag::Var pool_t = ag::constant(toy_pooling_matrix(height, width).transpose());
  const ag::Var proj_t = ag::constant(enc.image_projection().transpose());
  const ag::Var one = ag::constant(Eigen::MatrixXd::Ones(1, 1));
  std::vector<ag::Var> rows;
  for (int b = 0; b < batch; ++b) {
    const ag::Var pooled = ag::matmul(ag::cols(luma, b * pixels, pixels), pool_t);
    rows.push_back(ag::matmul(ag::hcat({pooled, one}), proj_t));
  }
  return ag::normalize_rows(rows.size() == 1 ? rows.front() : ag::vcat(rows));
}

namespace {

struct PreparedImage {
  Eigen::MatrixXd x0;
  Conditioning cond;
  Eigen::MatrixXd text;  // 1 x dim
};

std::vector<PreparedImage> prepare_images(const GeneratorModel& model, const std::vector<Sample>& dataset,
                                          const EncoderHandle& enc, LayoutSource source,
                                          const LayoutDecoderModel* decoder) {
  const int size = model.config().unet.image_size;
  if (source == LayoutSource::Decoder && decoder == nullptr) {
    throw Error(ErrorCode::InvalidConfig, "decoder layout source requires a layout decoder");
  }
  std::vector<PreparedImage> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    if (s.image.height() != size || s.image.width() != size) {
      throw Error(ErrorCode::BadShape, "record " + s.record.id + " is " + std::to_string(s.image.height()) + "x" +
                                           std::to_string(s.image.width()) + ", generator expects " +
                                           std::to_string(size) + "x" + std::to_string(size));
    }
    PreparedImage p;
    p.x0 = to_model_space(s.image);
    const Layout layout = source == LayoutSource::Decoder ? predict_layout(*decoder, s.record.caption, enc).layout
                                                          : s.record.layout();
    p.cond = model.condition(layout, enc);
    p.text = encode_text(enc, s.record.caption).transpose();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

std::vector<DiffusionStepLog> train_diffusion(GeneratorModel& model, const std::vector<Sample>& dataset,
                                              const EncoderHandle& enc, const DiffusionTrainConfig& cfg,
                                              const LayoutDecoderModel* decoder) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "diffusion training needs at least one record");
  if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.semantic_every < 1) {
    throw Error(ErrorCode::InvalidConfig, "steps >= 0, batch_size >= 1 and semantic_every >= 1 required");
  }
  if (cfg.lambda_semantic < 0.0) throw Error(ErrorCode::InvalidConfig, "lambda_semantic must be >= 0");
  if (cfg.lambda_semantic > 0.0 && !enc.differentiable()) {
    throw Error(ErrorCode::BackendUnavailable, "semantic loss needs a differentiable image encoder");
  }
  const auto prepared = prepare_images(model, dataset, enc, cfg.layout_source, decoder);
  const int size = model.config().unet.image_size;
  const Eigen::Index pixels = Eigen::Index(size) * size;
  const NoiseSchedule& sched = model.schedule();
  const int batch = std::min<int>(cfg.batch_size, static_cast<int>(dataset.size()));

  nn::AdamW optimizer(model.parameters(), cfg.adamw);
  Rng rng(derive_seed(cfg.seed, "diffusion-training"));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::vector<DiffusionStepLog> history;
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd x_t(3, pixels * batch), noise(3, pixels * batch), sqrt_ab(1, pixels * batch),
        sqrt_1mab(1, pixels * batch), text(batch, model.text_dim());
    std::vector<int> ts;
    std::vector<Conditioning> conds;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
        cursor = 0;
      }
      const auto& p = prepared[static_cast<std::size_t>(order[cursor++])];
      const int t = static_cast<int>(rng.uniform_int(0, sched.num_steps - 1));
      const Eigen::MatrixXd eps = rng.normal_matrix(3, pixels, 1.0);
      noise.middleCols(b * pixels, pixels) = eps;
      x_t.middleCols(b * pixels, pixels) = q_sample(sched, p.x0, t, eps);
      sqrt_ab.middleCols(b * pixels, pixels).setConstant(std::sqrt(sched.alpha_bars[t]));
      sqrt_1mab.middleCols(b * pixels, pixels).setConstant(std::sqrt(1.0 - sched.alpha_bars[t]));
      text.row(b) = p.text;
      ts.push_back(t);
      conds.push_back(p.cond);
    }

    const ag::Var x = ag::constant(x_t);
    const ag::Var pred = model.predict_noise(x, ts, conds);
    const ag::Var noise_loss = ag::mse(pred, noise);
    ag::Var total = noise_loss;
    DiffusionStepLog log;
    log.step = step;
    log.noise_mse = noise_loss.scalar();
    if (cfg.lambda_semantic > 0.0 && step % cfg.semantic_every == 0) {
      // One-step clean estimate x0 = (x_t - sqrt(1 - abar) eps) / sqrt(abar).
      const ag::Var x0_hat = ag::mul_row(x - ag::mul_row(pred, ag::constant(sqrt_1mab)),
                                         ag::constant(sqrt_ab.cwiseInverse()));
      const ag::Var sem = ag::semantic_alignment(text, toy_image_embedding(x0_hat, batch, size, size, enc));
      total = total + ag::scale(sem, cfg.lambda_semantic);
      log.semantic = sem.scalar();
      log.has_semantic = true;
    }
    log.total = total.scalar();
    if (!std::isfinite(log.total)) {
      throw Error(ErrorCode::NonFiniteLoss, "diffusion loss is not finite at step " + std::to_string(step));
    }
    history.push_back(log);
    optimizer.zero_grad();
    ag::backward(total);
    optimizer.step();
  }
  return history;
}

double evaluate_noise_loss(const GeneratorModel& model, const std::vector<Sample>& dataset, const EncoderHandle& enc,
                           std::uint64_t seed, int draws_per_sample) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "no records to evaluate");
  if (draws_per_sample < 1) throw Error(ErrorCode::InvalidConfig, "draws_per_sample must be >= 1");
  ag::NoGradGuard no_grad;
  const auto prepared = prepare_images(model, dataset, enc, LayoutSource::GroundTruth, nullptr);
  const NoiseSchedule& sched = model.schedule();
  const Eigen::Index pixels = prepared.front().x0.cols();
  Rng rng(derive_seed(seed, "noise-eval"));
  double total = 0.0;
  for (const auto& p : prepared) {
    Eigen::MatrixXd x_t(3, pixels * draws_per_sample), noise(3, pixels * draws_per_sample);
    std::vector<int> ts;
    for (int d = 0; d < draws_per_sample; ++d) {
      const int t = static_cast<int>(rng.uniform_int(0, sched.num_steps - 1));
      const Eigen::MatrixXd eps = rng.normal_matrix(3, pixels, 1.0);
      noise.middleCols(d * pixels, pixels) = eps;
      x_t.middleCols(d * pixels, pixels) = q_sample(sched, p.x0, t, eps);
      ts.push_back(t);
    }
    const std::vector<Conditioning> conds(static_cast<std::size_t>(draws_per_sample), p.cond);
    total += ag::mse(model.predict_noise(ag::constant(x_t), ts, conds), noise).scalar();
  }
  return total / static_cast<double>(prepared.size());
}

std::vector<int> respaced_timesteps(int schedule_steps, int num_steps) {
  if (num_steps < 1 || num_steps > schedule_steps) {
    throw Error(ErrorCode::InvalidSteps, "num_steps must be in [1, " + std::to_string(schedule_steps) + "], got " +
                                             std::to_string(num_steps));
  }
  std::vector<int> ts;
  if (num_steps == 1) return {schedule_steps - 1};
  for (int i = 0; i < num_steps; ++i) {
    ts.push_back(static_cast<int>(
        std::lround(static_cast<double>(num_steps - 1 - i) * (schedule_steps - 1) / (num_steps - 1))));
  }
  return ts;
}

Eigen::MatrixXd sample_planes(const NoiseSchedule& sched, Eigen::Index pixels, const NoisePredictor& predict,
                              std::uint64_t seed, int num_steps, bool ddim) {
  const std::vector<int> ts = respaced_timesteps(sched.num_steps, num_steps);
  Rng rng(derive_seed(seed, "sampler"));
  Eigen::MatrixXd x = rng.normal_matrix(3, pixels, 1.0);
  Eigen::MatrixXd x0 = x;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab = sched.alpha_bars[t];
    const double ab_prev = i + 1 < ts.size() ? sched.alpha_bars[ts[i + 1]] : 1.0;
    const Eigen::MatrixXd eps = predict(x, t);
    x0 = ((x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).cwiseMax(-1.0).cwiseMin(1.0);
    if (i + 1 == ts.size()) break;
    if (ddim) {
      const Eigen::MatrixXd eps_hat = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
    } else {
      const double beta = 1.0 - ab / ab_prev;
      const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
      const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
      const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
      x = c0 * x0 + ct * x + std::sqrt(var) * rng.normal_matrix(3, pixels, 1.0);
    }
  }
  return x0;
}

Image generate(const GeneratorModel& model, const Layout& layout, const EncoderHandle& enc, std::uint64_t seed,
               int num_steps, const SamplerOptions& options) {
  respaced_timesteps(model.schedule().num_steps, num_steps);
  ag::NoGradGuard no_grad;
  const int size = model.config().unet.image_size;
  const Conditioning cond = model.condition(layout, enc, options.extra_tokens);
  const NoisePredictor predict = [&](const Eigen::MatrixXd& x, int t) {
    return model.predict_noise(ag::constant(x), {t}, {cond}).value();
  };
  return from_model_space(size, size,
                          sample_planes(model.schedule(), Eigen::Index(size) * size, predict, seed, num_steps, options.ddim));
}

}  // namespace learn
