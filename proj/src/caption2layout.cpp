#include "learn/caption2layout.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "learn/error.hpp"
#include "learn/hungarian.hpp"
#include "learn/loss_ops.hpp"
#include "learn/random.hpp"

namespace learn {

void LayoutDecoderConfig::validate() const {
  if (max_tokens < 1) throw Error(ErrorCode::InvalidConfig, "layout.max_tokens must be >= 1");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "layout.embed_dim must be divisible by layout.num_heads");
  }
  if (num_layers < 0 || memory_tokens < 1 || ffn_mult < 1) throw Error(ErrorCode::InvalidConfig, "bad decoder depth/width");
  if (label_vocab.empty()) throw Error(ErrorCode::InvalidConfig, "label vocabulary is empty");
  std::set<std::string> unique(label_vocab.begin(), label_vocab.end());
  if (unique.size() != label_vocab.size()) throw Error(ErrorCode::InvalidConfig, "label vocabulary has duplicates");
  if (!(objectness_threshold >= 0.0)) throw Error(ErrorCode::InvalidConfig, "objectness threshold must be >= 0");
}

nlohmann::json LayoutDecoderConfig::to_json() const {
  return {{"max_tokens", max_tokens},   {"embed_dim", embed_dim},       {"num_layers", num_layers},
          {"num_heads", num_heads},     {"memory_tokens", memory_tokens}, {"ffn_mult", ffn_mult},
          {"label_vocab", label_vocab}, {"objectness_threshold", objectness_threshold}};
}

LayoutDecoderConfig LayoutDecoderConfig::from_json(const nlohmann::json& j) {
  LayoutDecoderConfig c;
  c.max_tokens = j.at("max_tokens").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.memory_tokens = j.at("memory_tokens").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.label_vocab = j.at("label_vocab").get<std::vector<std::string>>();
  c.objectness_threshold = j.at("objectness_threshold").get<double>();
  c.validate();
  return c;
}

LayoutDecoderModel::LayoutDecoderModel(LayoutDecoderConfig config, int text_dim, int region_dim, std::uint64_t seed)
    : config_(std::move(config)), text_dim_(text_dim), region_dim_(region_dim) {
  config_.validate();
  if (text_dim < 1 || region_dim < 1) throw Error(ErrorCode::InvalidConfig, "encoder dimensions must be positive");
  Rng rng(derive_seed(seed, "layout-decoder"));
  const int d = config_.embed_dim;
  text_proj_ = nn::Linear(text_dim, d * config_.memory_tokens, rng);
  queries_ = ag::parameter(rng.normal_matrix(config_.max_tokens, d, 1.0));
  for (int l = 0; l < config_.num_layers; ++l) {
    DecoderLayer layer;
    layer.norm_self = nn::LayerNorm(d);
    layer.norm_cross = nn::LayerNorm(d);
    layer.norm_ffn = nn::LayerNorm(d);
    layer.self_attn = nn::MultiHeadAttention(d, d, d, config_.num_heads, rng);
    layer.cross_attn = nn::MultiHeadAttention(d, d, d, config_.num_heads, rng);
    layer.ffn_in = nn::Linear(d, d * config_.ffn_mult, rng);
    layer.ffn_out = nn::Linear(d * config_.ffn_mult, d, rng);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = nn::LayerNorm(d);
  label_head_ = nn::Linear(d, static_cast<int>(config_.label_vocab.size()), rng);
  box_head_ = nn::Linear(d, 4, rng);
  // Near-zero objectness weights keep the untrained sigmoid at ~0.5.
  objectness_head_ = nn::Linear(d, 1, rng, 0.01);
  region_proj_ = nn::Linear(d, region_dim, rng);
}

ag::Var squash_boxes(const ag::Var& raw) {
  const ag::Var s = ag::sigmoid(raw);
  const ag::Var ones = ag::constant(Eigen::MatrixXd::Ones(raw.rows(), 1));
  const ag::Var x = ag::cols(s, 0, 1);
  const ag::Var y = ag::cols(s, 1, 1);
  const ag::Var w = ag::mul(ag::cols(s, 2, 1), ag::sub(ones, x));
  const ag::Var h = ag::mul(ag::cols(s, 3, 1), ag::sub(ones, y));
  return ag::hcat({x, y, w, h});
}

DecoderOutput LayoutDecoderModel::forward(const Embedding& text_embedding) const {
  if (text_embedding.size() != text_dim_) {
    throw Error(ErrorCode::DimensionMismatch, "text embedding is " + std::to_string(text_embedding.size()) +
                                                  "-d, decoder expects " + std::to_string(text_dim_));
  }
  const ag::Var text = ag::constant(text_embedding.transpose());
  const ag::Var memory = ag::reshape_rows(text_proj_(text), config_.embed_dim);
  ag::Var x = queries_;
  for (const auto& layer : layers_) {
    const ag::Var h = layer.norm_self(x);
    x = x + layer.self_attn(h, h);
    x = x + layer.cross_attn(layer.norm_cross(x), memory);
    x = x + layer.ffn_out(ag::gelu(layer.ffn_in(layer.norm_ffn(x))));
  }
  x = final_norm_(x);
  DecoderOutput out;
  out.tokens = x;
  out.label_logits = label_head_(x);
  out.boxes = squash_boxes(box_head_(x));
  out.objectness_logits = objectness_head_(x);
  return out;
}

nn::ParameterSet LayoutDecoderModel::parameters() const {
  nn::ParameterSet ps;
  text_proj_.register_into(ps, "text_proj");
  ps.add("queries", queries_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l);
    const auto& layer = layers_[l];
    layer.norm_self.register_into(ps, p + ".norm_self");
    layer.norm_cross.register_into(ps, p + ".norm_cross");
    layer.norm_ffn.register_into(ps, p + ".norm_ffn");
    layer.self_attn.register_into(ps, p + ".self_attn");
    layer.cross_attn.register_into(ps, p + ".cross_attn");
    layer.ffn_in.register_into(ps, p + ".ffn_in");
    layer.ffn_out.register_into(ps, p + ".ffn_out");
  }
  final_norm_.register_into(ps, "final_norm");
  label_head_.register_into(ps, "label_head");
  box_head_.register_into(ps, "box_head");
  objectness_head_.register_into(ps, "objectness_head");
  region_proj_.register_into(ps, "region_proj");
  return ps;
}

nn::ParameterSet LayoutDecoderModel::label_head_parameters() const {
  nn::ParameterSet ps;
  label_head_.register_into(ps, "label_head");
  return ps;
}

namespace {

Eigen::VectorXd sigmoid(const Eigen::MatrixXd& logits) { return (1.0 / (1.0 + (-logits.col(0).array()).exp())).matrix(); }

}  // namespace

PredictedLayout predict_layout(const LayoutDecoderModel& m, const std::string& prompt, const EncoderHandle& enc) {
  if (prompt.empty()) throw Error(ErrorCode::EmptyInput, "concept text is empty");
  ag::NoGradGuard no_grad;
  const DecoderOutput out = m.forward(encode_text(enc, prompt));
  const Eigen::VectorXd conf = sigmoid(out.objectness_logits.value());
  std::vector<int> order;
  for (int q = 0; q < conf.size(); ++q) {
    if (conf[q] >= m.config().objectness_threshold) order.push_back(q);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return conf[a] > conf[b]; });

  PredictedLayout pred;
  pred.layout.prompt = prompt;
  const auto& logits = out.label_logits.value();
  const auto& boxes = out.boxes.value();
  for (int q : order) {
    Eigen::Index label = 0;
    logits.row(q).maxCoeff(&label);
    pred.layout.elements.push_back(
        {m.config().label_vocab[static_cast<std::size_t>(label)], validate_box(boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3))});
    pred.confidence.push_back(conf[q]);
    pred.query_index.push_back(q);
  }
  return pred;
}

Embedding pool_global_embedding(const Eigen::MatrixXd& tokens, const std::vector<int>& rows) {
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(tokens.cols());
  if (rows.empty()) {
    mean = tokens.colwise().mean().transpose();
  } else {
    for (int r : rows) mean += tokens.row(r).transpose();
    mean /= static_cast<double>(rows.size());
  }
  const double n = mean.norm();
  if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "pooled layout embedding vanished");
  return mean / n;
}

LayoutTokens layout_token_embeddings(const LayoutDecoderModel& m, const std::string& prompt, const EncoderHandle& enc) {
  if (prompt.empty()) throw Error(ErrorCode::EmptyInput, "concept text is empty");
  ag::NoGradGuard no_grad;
  const DecoderOutput out = m.forward(encode_text(enc, prompt));
  const Eigen::VectorXd conf = sigmoid(out.objectness_logits.value());
  LayoutTokens lt;
  lt.tokens = out.tokens.value();
  for (int q = 0; q < conf.size(); ++q) {
    if (conf[q] >= m.config().objectness_threshold) lt.selected.push_back(q);
  }
  lt.global = pool_global_embedding(lt.tokens, lt.selected);
  return lt;
}

double mean_matched_iou(const Layout& predicted, const Layout& truth) {
  const auto n_true = static_cast<Eigen::Index>(truth.size());
  const auto n_pred = static_cast<Eigen::Index>(predicted.size());
  if (n_true == 0) return n_pred == 0 ? 1.0 : 0.0;
  if (n_pred == 0) return 0.0;
  Eigen::MatrixXd iou(n_true, n_pred);
  for (Eigen::Index i = 0; i < n_true; ++i)
    for (Eigen::Index j = 0; j < n_pred; ++j) iou(i, j) = box_iou(truth.elements[i].box, predicted.elements[j].box);
  double total = 0.0;
  if (n_true <= n_pred) {
    const auto a = hungarian_assignment(Eigen::MatrixXd::Ones(n_true, n_pred) - iou);
    for (Eigen::Index i = 0; i < n_true; ++i) total += iou(i, a[i]);
  } else {
    const Eigen::MatrixXd t = iou.transpose();
    const auto a = hungarian_assignment(Eigen::MatrixXd::Ones(n_pred, n_true) - t);
    for (Eigen::Index j = 0; j < n_pred; ++j) total += t(j, a[j]);
  }
  return total / static_cast<double>(n_true);
}

namespace {

struct PreparedRecord {
  Embedding text;
  std::vector<int> labels;
  Eigen::MatrixXd boxes;    // n x 4
  Eigen::MatrixXd regions;  // n x region_dim
  std::string group;
};

std::vector<PreparedRecord> prepare(const LayoutDecoderModel& m, const std::vector<Sample>& dataset,
                                    const EncoderHandle& enc) {
  std::map<std::string, int> vocab;
  for (std::size_t i = 0; i < m.config().label_vocab.size(); ++i) vocab[m.config().label_vocab[i]] = static_cast<int>(i);
  std::vector<PreparedRecord> out;
  for (const auto& s : dataset) {
    PreparedRecord p;
    p.text = encode_text(enc, s.record.caption);
    const auto n = std::min<std::size_t>(s.record.regions.size(), static_cast<std::size_t>(m.config().max_tokens));
    p.boxes.resize(static_cast<Eigen::Index>(n), 4);
    p.regions.resize(static_cast<Eigen::Index>(n), enc.image_dim());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = s.record.regions[i];
      const auto it = vocab.find(r.label);
      if (it == vocab.end()) throw Error(ErrorCode::InvalidConfig, "label '" + r.label + "' is not in the decoder vocabulary");
      p.labels.push_back(it->second);
      p.boxes.row(static_cast<Eigen::Index>(i)) = r.box.as_vector().transpose();
      p.regions.row(static_cast<Eigen::Index>(i)) = encode_region(enc, s.image, r.box).transpose();
    }
    p.group = s.record.concept_tags.empty() ? s.record.caption : s.record.concept_tags.front();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<int> match_queries(const PreparedRecord& rec, const DecoderOutput& out, const LayoutLossWeights& w) {
  const Eigen::Index n = rec.boxes.rows();
  if (n == 0) return {};
  const Eigen::MatrixXd& logits = out.label_logits.value();
  const Eigen::MatrixXd& boxes = out.boxes.value();
  const Eigen::Index queries = logits.rows();
  Eigen::MatrixXd probs = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  probs = probs.rowwise().sum().cwiseInverse().asDiagonal() * probs;
  Eigen::MatrixXd cost(n, queries);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index q = 0; q < queries; ++q) {
      const double l1 = (boxes.row(q) - rec.boxes.row(i)).cwiseAbs().sum();
      cost(i, q) = -w.match_label * probs(q, rec.labels[static_cast<std::size_t>(i)]) + w.match_box * l1;
    }
  }
  return hungarian_assignment(cost);
}

}  // namespace

std::vector<LayoutStepLog> train_layout_decoder(LayoutDecoderModel& m, const std::vector<Sample>& dataset,
                                                const EncoderHandle& enc, const LayoutLossWeights& weights,
                                                const OptimizerConfig& opt, const LayoutGradientHook& hook) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "layout decoder training needs at least one record");
  if (opt.steps < 0 || opt.batch_size < 1) throw Error(ErrorCode::InvalidConfig, "steps must be >= 0 and batch_size >= 1");
  weights.contrastive.validate();
  if (enc.text_dim() != m.text_dim() || enc.image_dim() != m.region_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "encoder dimensions do not match the decoder");
  }
  const auto prepared = prepare(m, dataset, enc);
  const auto& lc = weights.contrastive;
  const int batch = std::min<int>(opt.batch_size, static_cast<int>(dataset.size()));

  nn::AdamW optimizer(m.parameters(), opt.adamw);
  Rng rng(derive_seed(opt.seed, "layout-training"));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::vector<LayoutStepLog> history;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<int> picked;
    while (static_cast<int>(picked.size()) < batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
        cursor = 0;
      }
      picked.push_back(order[cursor++]);
    }

    std::vector<ag::Var> box_terms, label_terms, obj_terms, align_terms, globals, positives;
    std::map<std::string, std::vector<int>> groups;
    for (int idx : picked) {
      const auto& rec = prepared[static_cast<std::size_t>(idx)];
      const DecoderOutput out = m.forward(rec.text);
      const std::vector<int> matched = match_queries(rec, out, weights);
      Eigen::MatrixXd obj_target = Eigen::MatrixXd::Zero(out.objectness_logits.rows(), 1);
      for (int q : matched) obj_target(q, 0) = 1.0;
      obj_terms.push_back(ag::bce_with_logits(out.objectness_logits, obj_target));

      ag::Var global;
      if (!matched.empty()) {
        box_terms.push_back(ag::l1(ag::gather_rows(out.boxes, matched), rec.boxes));
        label_terms.push_back(ag::softmax_cross_entropy(ag::gather_rows(out.label_logits, matched), rec.labels));
        const ag::Var matched_tokens = ag::gather_rows(out.tokens, matched);
        align_terms.push_back(ag::token_alignment(m.project_to_regions(matched_tokens), ag::constant(rec.regions), lc.tau));
        global = ag::mean_rows(matched_tokens);
      } else {
        global = ag::mean_rows(out.tokens);
      }
      Embedding g = global.value().row(0).transpose();
      const Eigen::VectorXd mask = draw_nonvanishing_mask(g, lc, rng);
      groups[rec.group].push_back(static_cast<int>(globals.size()));
      positives.push_back(ag::mul(global, ag::constant(mask.transpose())));
      globals.push_back(std::move(global));
    }

    auto average = [](const std::vector<ag::Var>& terms) -> ag::Var {
      if (terms.empty()) return ag::constant(Eigen::MatrixXd::Zero(1, 1));
      ag::Var acc = terms.front();
      for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
      return ag::scale(acc, 1.0 / static_cast<double>(terms.size()));
    };

    const ag::Var anchors = ag::vcat(globals);
    const ag::Var box_loss = average(box_terms);
    const ag::Var label_loss = average(label_terms);
    const ag::Var obj_loss = average(obj_terms);
    const ag::Var align_loss = average(align_terms);
    const ag::Var contrast_loss = ag::layout_contrastive(anchors, ag::vcat(positives), lc.tau);
    std::vector<ag::Var> intra_terms;
    for (const auto& [name, members] : groups) {
      if (members.size() >= 2) intra_terms.push_back(ag::intra_concept(ag::gather_rows(anchors, members)));
    }
    const ag::Var intra_loss = average(intra_terms);

    std::vector<std::pair<double, ag::Var>> weighted = {
        {weights.box_l1, box_loss},      {weights.label_ce, label_loss},          {weights.objectness, obj_loss},
        {lc.lambda_align, align_loss},   {lc.lambda_laycontrast, contrast_loss}, {lc.lambda_intra, intra_loss},
    };
    ag::Var total = ag::constant(Eigen::MatrixXd::Zero(1, 1));
    for (const auto& [w, term] : weighted) {
      if (w != 0.0) total = total + ag::scale(term, w);
    }

    LayoutStepLog log;
    log.step = step;
    log.align = align_loss.scalar();
    log.laycontrast = contrast_loss.scalar();
    log.intra = intra_loss.scalar();
    log.layout = combined_layout_loss(log.laycontrast, log.intra, lc);
    log.box_l1 = box_loss.scalar();
    log.label_ce = label_loss.scalar();
    log.objectness = obj_loss.scalar();
    log.total = total.scalar();
    if (!std::isfinite(log.total)) {
      throw Error(ErrorCode::NonFiniteLoss, "layout decoder loss is not finite at step " + std::to_string(step));
    }
    history.push_back(log);

    optimizer.zero_grad();
    ag::backward(total);
    if (hook) hook(step, m);
    optimizer.step();
  }
  return history;
}

}  // namespace learn
