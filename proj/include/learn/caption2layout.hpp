#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "learn/dataset.hpp"
#include "learn/encoders.hpp"
#include "learn/layout.hpp"
#include "learn/losses.hpp"
#include "learn/nn.hpp"

namespace learn {

struct LayoutDecoderConfig {
  int max_tokens = kDefaultMaxLayoutTokens;
  int embed_dim = 768;
  int num_layers = 4;
  int num_heads = 8;
  /// Rows the projected text embedding is split into for cross-attention.
  int memory_tokens = 4;
  int ffn_mult = 4;
  std::vector<std::string> label_vocab = {"ball", "block", "ramp", "magnet", "weight", "lever"};
  double objectness_threshold = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static LayoutDecoderConfig from_json(const nlohmann::json& j);
};

struct DecoderLayer {
  nn::LayerNorm norm_self, norm_cross, norm_ffn;
  nn::MultiHeadAttention self_attn, cross_attn;
  nn::Linear ffn_in, ffn_out;
};

/// Raw decoder outputs for one caption, one row per query.
struct DecoderOutput {
  ag::Var tokens;             // max_tokens x embed_dim
  ag::Var label_logits;       // max_tokens x |vocab|
  ag::Var boxes;              // max_tokens x 4, already squashed into valid boxes
  ag::Var objectness_logits;  // max_tokens x 1
};

class LayoutDecoderModel {
 public:
  LayoutDecoderModel(LayoutDecoderConfig config, int text_dim, int region_dim, std::uint64_t seed);

  const LayoutDecoderConfig& config() const { return config_; }
  int text_dim() const { return text_dim_; }
  int region_dim() const { return region_dim_; }

  DecoderOutput forward(const Embedding& text_embedding) const;
  /// Projects decoder tokens into the region-embedding space for token
  /// alignment.
  ag::Var project_to_regions(const ag::Var& tokens) const { return region_proj_(tokens); }

  nn::ParameterSet parameters() const;
  nn::ParameterSet label_head_parameters() const;

  void set_threshold(double t) { config_.objectness_threshold = t; }

 private:
  LayoutDecoderConfig config_;
  int text_dim_;
  int region_dim_;
  nn::Linear text_proj_;
  ag::Var queries_;
  std::vector<DecoderLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear label_head_, box_head_, objectness_head_, region_proj_;
};

/// Maps a sigmoid-squashed 4-vector s onto a valid box:
/// x = s0, y = s1, w = s2 (1 - x), h = s3 (1 - y).
ag::Var squash_boxes(const ag::Var& raw);

struct PredictedLayout {
  Layout layout;
  std::vector<double> confidence;
  std::vector<int> query_index;
};

PredictedLayout predict_layout(const LayoutDecoderModel& m, const std::string& prompt, const EncoderHandle& enc);

struct LayoutTokens {
  Eigen::MatrixXd tokens;  // max_tokens x embed_dim
  Embedding global;        // unit-norm pooled embedding
  std::vector<int> selected;
};

/// Mean over the given rows, unit-normalised. Empty `rows` pools all rows.
Embedding pool_global_embedding(const Eigen::MatrixXd& tokens, const std::vector<int>& rows);

LayoutTokens layout_token_embeddings(const LayoutDecoderModel& m, const std::string& prompt, const EncoderHandle& enc);

/// Weights for every term of the decoder objective. The contrastive terms
/// come from LossConfig; the remaining ones supervise matched queries.
struct LayoutLossWeights {
  LossConfig contrastive;
  double box_l1 = 5.0;
  double label_ce = 1.0;
  double objectness = 1.0;
  /// Hungarian cost = match_label * (-p(label)) + match_box * L1.
  double match_label = 1.0;
  double match_box = 5.0;
};

struct OptimizerConfig {
  nn::AdamWConfig adamw;
  int steps = 300;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct LayoutStepLog {
  int step = 0;
  double align = 0.0;
  double laycontrast = 0.0;
  double intra = 0.0;
  double layout = 0.0;  // laycontrast + lambda_intra * intra
  double box_l1 = 0.0;
  double label_ce = 0.0;
  double objectness = 0.0;
  double total = 0.0;

  friend bool operator==(const LayoutStepLog&, const LayoutStepLog&) = default;
};

/// Optional hook invoked after the backward pass of every step, before the
/// optimizer update. Used by tests to inspect gradients.
using LayoutGradientHook = std::function<void(int step, const LayoutDecoderModel&)>;

std::vector<LayoutStepLog> train_layout_decoder(LayoutDecoderModel& m, const std::vector<Sample>& dataset,
                                                const EncoderHandle& enc, const LayoutLossWeights& weights,
                                                const OptimizerConfig& opt, const LayoutGradientHook& hook = {});

/// Hungarian assignment of ground-truth boxes to predicted boxes on
/// (1 - IoU); unmatched ground truth scores 0. Returns mean IoU over ground
/// truth, or 1 when both are empty.
double mean_matched_iou(const Layout& predicted, const Layout& truth);

}  // namespace learn
