#include "learn/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "learn/error.hpp"
#include "learn/random.hpp"

namespace learn {

namespace {

void flatten(const nlohmann::json& j, const std::string& prefix, nlohmann::json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else {
      out[key] = *it;
    }
  }
}

bool compatible(const nlohmann::json& expected, const nlohmann::json& given) {
  if (expected.is_boolean()) return given.is_boolean();
  if (expected.is_number_float()) return given.is_number();
  if (expected.is_number_unsigned()) return given.is_number_unsigned() || (given.is_number_integer() && given.get<long long>() >= 0);
  if (expected.is_number_integer()) return given.is_number_integer();
  if (expected.is_string()) return given.is_string();
  if (expected.is_array()) return given.is_array();
  return false;
}

}  // namespace

RunConfig RunConfig::defaults() {
  const LossConfig loss;
  const LayoutDecoderConfig dec;
  const LayoutLossWeights w;
  const OptimizerConfig opt;
  const DiffusionConfig diff;
  const DiffusionTrainConfig dt;
  const EncoderConfig enc;
  RunConfig rc;
  auto& v = rc.values_;
  v["seed"] = std::uint64_t{0};
  v["encoder.kind"] = "toy";
  v["encoder.dim"] = enc.dim;
  v["encoder.seed"] = enc.seed;
  v["encoder.weights_path"] = enc.weights_path;
  v["loss.tau"] = loss.tau;
  v["loss.lambda_align"] = loss.lambda_align;
  v["loss.lambda_laycontrast"] = loss.lambda_laycontrast;
  v["loss.lambda_semantic"] = loss.lambda_semantic;
  v["loss.lambda_intra"] = loss.lambda_intra;
  v["loss.augment_mask_prob"] = loss.augment_mask_prob;
  v["loss.augment_dropout"] = loss.augment_dropout;
  v["layout.max_tokens"] = dec.max_tokens;
  v["layout.embed_dim"] = dec.embed_dim;
  v["layout.num_layers"] = dec.num_layers;
  v["layout.num_heads"] = dec.num_heads;
  v["layout.memory_tokens"] = dec.memory_tokens;
  v["layout.ffn_mult"] = dec.ffn_mult;
  v["layout.label_vocab"] = dec.label_vocab;
  v["layout.objectness_threshold"] = dec.objectness_threshold;
  v["layout.box_l1"] = w.box_l1;
  v["layout.label_ce"] = w.label_ce;
  v["layout.objectness"] = w.objectness;
  v["layout.match_label"] = w.match_label;
  v["layout.match_box"] = w.match_box;
  v["diffusion.image_size"] = diff.unet.image_size;
  v["diffusion.base_channels"] = diff.unet.base_channels;
  v["diffusion.channel_mult"] = diff.unet.channel_mult;
  v["diffusion.attention_resolutions"] =
      std::vector<int>(diff.unet.attention_resolutions.begin(), diff.unet.attention_resolutions.end());
  v["diffusion.layout_dim"] = diff.unet.layout_dim;
  v["diffusion.num_heads"] = diff.unet.num_heads;
  v["diffusion.max_groups"] = diff.unet.max_groups;
  v["diffusion.num_steps"] = diff.num_steps;
  v["diffusion.beta_start"] = diff.beta_start;
  v["diffusion.beta_end"] = diff.beta_end;
  v["diffusion.beta_reference_steps"] = diff.beta_reference_steps;
  v["diffusion.use_layout"] = diff.use_layout;
  v["diffusion.semantic_every"] = dt.semantic_every;
  v["diffusion.sample_steps"] = diff.num_steps;
  v["diffusion.layout_source"] = "ground-truth";
  v["train.layout_lr"] = opt.adamw.lr;
  v["train.diffusion_lr"] = dt.adamw.lr;
  v["train.weight_decay"] = opt.adamw.weight_decay;
  v["train.grad_clip"] = opt.adamw.grad_clip;
  v["train.layout_steps"] = opt.steps;
  v["train.layout_batch_size"] = opt.batch_size;
  v["train.diffusion_steps"] = dt.steps;
  v["train.diffusion_batch_size"] = dt.batch_size;
  return rc;
}

void RunConfig::set(const std::string& key, const nlohmann::json& value, const std::string& source) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::InvalidConfig, source + ": unknown config key '" + key + "'");
  if (!compatible(*it, value)) {
    throw Error(ErrorCode::InvalidConfig, source + ": key '" + key + "' expects " + it->type_name() + ", got " +
                                              value.type_name());
  }
  if (it->is_number_float()) {
    *it = value.get<double>();
  } else {
    *it = value;
  }
}

void RunConfig::merge(const nlohmann::json& j, const std::string& source) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, source + ": config must be a JSON object");
  nlohmann::json flat = nlohmann::json::object();
  flatten(j, "", flat);
  for (auto it = flat.begin(); it != flat.end(); ++it) set(it.key(), *it, source);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  merge(j, path.string());
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(ErrorCode::InvalidConfig, "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set(key, value, "--set");
}

const nlohmann::json& RunConfig::at(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  return *it;
}

std::string RunConfig::hash() const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << stable_hash(values_.dump());
  return os.str();
}

void RunConfig::validate() const {
  encoder_config(*this);
  loss_config(*this).validate();
  decoder_config(*this).validate();
  diffusion_config(*this).validate();
  diffusion_train_config(*this);
  layout_optimizer_config(*this);
}

EncoderConfig encoder_config(const RunConfig& rc) {
  EncoderConfig c;
  const auto kind = rc.get<std::string>("encoder.kind");
  if (kind == "toy") {
    c.kind = EncoderKind::Toy;
  } else if (kind == "pretrained") {
    c.kind = EncoderKind::Pretrained;
  } else {
    throw Error(ErrorCode::InvalidConfig, "encoder.kind must be 'toy' or 'pretrained'");
  }
  c.dim = rc.get<int>("encoder.dim");
  if (c.dim < 1) throw Error(ErrorCode::InvalidConfig, "encoder.dim must be >= 1");
  c.seed = rc.get<std::uint64_t>("encoder.seed");
  c.weights_path = rc.get<std::string>("encoder.weights_path");
  return c;
}

LossConfig loss_config(const RunConfig& rc) {
  LossConfig c;
  c.tau = rc.get<double>("loss.tau");
  c.lambda_align = rc.get<double>("loss.lambda_align");
  c.lambda_laycontrast = rc.get<double>("loss.lambda_laycontrast");
  c.lambda_semantic = rc.get<double>("loss.lambda_semantic");
  c.lambda_intra = rc.get<double>("loss.lambda_intra");
  c.augment_mask_prob = rc.get<double>("loss.augment_mask_prob");
  c.augment_dropout = rc.get<double>("loss.augment_dropout");
  c.validate();
  return c;
}

LayoutDecoderConfig decoder_config(const RunConfig& rc) {
  LayoutDecoderConfig c;
  c.max_tokens = rc.get<int>("layout.max_tokens");
  c.embed_dim = rc.get<int>("layout.embed_dim");
  c.num_layers = rc.get<int>("layout.num_layers");
  c.num_heads = rc.get<int>("layout.num_heads");
  c.memory_tokens = rc.get<int>("layout.memory_tokens");
  c.ffn_mult = rc.get<int>("layout.ffn_mult");
  c.label_vocab = rc.get<std::vector<std::string>>("layout.label_vocab");
  c.objectness_threshold = rc.get<double>("layout.objectness_threshold");
  c.validate();
  return c;
}

LayoutLossWeights layout_loss_weights(const RunConfig& rc) {
  LayoutLossWeights w;
  w.contrastive = loss_config(rc);
  w.box_l1 = rc.get<double>("layout.box_l1");
  w.label_ce = rc.get<double>("layout.label_ce");
  w.objectness = rc.get<double>("layout.objectness");
  w.match_label = rc.get<double>("layout.match_label");
  w.match_box = rc.get<double>("layout.match_box");
  return w;
}

namespace {
nn::AdamWConfig adamw(const RunConfig& rc, const std::string& lr_key) {
  nn::AdamWConfig a;
  a.lr = rc.get<double>(lr_key);
  a.weight_decay = rc.get<double>("train.weight_decay");
  a.grad_clip = rc.get<double>("train.grad_clip");
  if (!(a.lr > 0.0) || a.weight_decay < 0.0) throw Error(ErrorCode::InvalidConfig, "learning rate must be > 0, weight decay >= 0");
  return a;
}
}  // namespace

OptimizerConfig layout_optimizer_config(const RunConfig& rc) {
  OptimizerConfig o;
  o.adamw = adamw(rc, "train.layout_lr");
  o.steps = rc.get<int>("train.layout_steps");
  o.batch_size = rc.get<int>("train.layout_batch_size");
  o.seed = derive_seed(rc.seed(), "train-layout");
  if (o.steps < 0 || o.batch_size < 1) throw Error(ErrorCode::InvalidConfig, "train.layout_steps >= 0 and batch size >= 1 required");
  return o;
}

DiffusionConfig diffusion_config(const RunConfig& rc) {
  DiffusionConfig c;
  c.unet.image_size = rc.get<int>("diffusion.image_size");
  c.unet.base_channels = rc.get<int>("diffusion.base_channels");
  c.unet.channel_mult = rc.get<std::vector<int>>("diffusion.channel_mult");
  const auto res = rc.get<std::vector<int>>("diffusion.attention_resolutions");
  c.unet.attention_resolutions = std::set<int>(res.begin(), res.end());
  c.unet.layout_dim = rc.get<int>("diffusion.layout_dim");
  c.unet.num_heads = rc.get<int>("diffusion.num_heads");
  c.unet.max_groups = rc.get<int>("diffusion.max_groups");
  c.num_steps = rc.get<int>("diffusion.num_steps");
  c.beta_start = rc.get<double>("diffusion.beta_start");
  c.beta_end = rc.get<double>("diffusion.beta_end");
  c.beta_reference_steps = rc.get<int>("diffusion.beta_reference_steps");
  c.use_layout = rc.get<bool>("diffusion.use_layout");
  c.validate();
  return c;
}

DiffusionTrainConfig diffusion_train_config(const RunConfig& rc) {
  DiffusionTrainConfig t;
  t.adamw = adamw(rc, "train.diffusion_lr");
  t.steps = rc.get<int>("train.diffusion_steps");
  t.batch_size = rc.get<int>("train.diffusion_batch_size");
  t.seed = derive_seed(rc.seed(), "train-diffusion");
  t.lambda_semantic = rc.get<double>("loss.lambda_semantic");
  t.semantic_every = rc.get<int>("diffusion.semantic_every");
  const auto src = rc.get<std::string>("diffusion.layout_source");
  if (src == "ground-truth") {
    t.layout_source = LayoutSource::GroundTruth;
  } else if (src == "decoder") {
    t.layout_source = LayoutSource::Decoder;
  } else {
    throw Error(ErrorCode::InvalidConfig, "diffusion.layout_source must be 'ground-truth' or 'decoder'");
  }
  if (t.steps < 0 || t.batch_size < 1 || t.semantic_every < 1) {
    throw Error(ErrorCode::InvalidConfig, "diffusion steps >= 0, batch size >= 1, semantic_every >= 1 required");
  }
  return t;
}

}  // namespace learn
