#pragma once

// Layout-conditioned pixel-space denoiser with masked cross-attention.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "learn/caption2layout.hpp"
#include "learn/dataset.hpp"
#include "learn/encoders.hpp"
#include "learn/image.hpp"
#include "learn/layout.hpp"
#include "learn/nn.hpp"

namespace learn {

struct NoiseSchedule {
  int num_steps = 0;
  Eigen::VectorXd betas;
  Eigen::VectorXd alphas;
  Eigen::VectorXd alpha_bars;

  static NoiseSchedule linear(int num_steps = 200, double beta_start = 1e-4, double beta_end = 0.02);
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, t in [0, num_steps).
Eigen::MatrixXd q_sample(const NoiseSchedule& s, const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise);

struct UNetConfig {
  int image_size = 32;
  int base_channels = 32;
  std::vector<int> channel_mult = {1, 2, 2, 2};
  std::set<int> attention_resolutions = {16, 8, 4};
  int layout_dim = 64;
  int num_heads = 4;
  int max_groups = 8;

  int levels() const { return static_cast<int>(channel_mult.size()); }
  void validate() const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

struct DiffusionConfig {
  UNetConfig unet;
  int num_steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  /// Betas are beta_start/beta_end scaled by reference / num_steps, so the
  /// endpoints describe a schedule of `reference` steps. 0 disables.
  int beta_reference_steps = 1000;
  /// false withholds every layout element from the generator (ablation);
  /// the null token and any extra global tokens are still attended.
  bool use_layout = true;

  void validate() const;
  NoiseSchedule make_schedule() const;
  nlohmann::json to_json() const;
  static DiffusionConfig from_json(const nlohmann::json& j);
};

struct AttentionMask {
  Eigen::MatrixXd values;  // (res*res) x (N + extra + 1), entries 0 or -inf
  int resolution = 0;
};

/// Cell p = r * res + c is unmasked for element i iff its centre
/// ((c + .5) / res, (r + .5) / res) lies in box i. `extra` always-open
/// columns follow the elements; the null-token column comes last.
AttentionMask build_attention_mask(const Layout& layout, int resolution, int extra = 0);

/// softmax((Q L^T + M) / sqrt(d)) L with keys and values both equal to L.
Eigen::MatrixXd masked_cross_attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& layout_embs,
                                       const AttentionMask& mask);

/// Everything the denoiser needs about one image's layout.
struct Conditioning {
  Layout layout;
  Eigen::MatrixXd label_embeddings;  // N x text_dim
  Eigen::MatrixXd boxes;             // N x 4
  Eigen::MatrixXd extra;             // E x text_dim global tokens, unmasked everywhere
};

struct ResBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2, skip;
  nn::Linear time_proj;
  bool has_skip = false;
};

struct CrossAttentionBlock {
  nn::GroupNorm norm;
  nn::MultiHeadAttention attn;
  int resolution = 0;
};

class GeneratorModel {
 public:
  GeneratorModel(DiffusionConfig config, int text_dim, std::uint64_t seed);

  const DiffusionConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  int text_dim() const { return text_dim_; }

  Conditioning condition(const Layout& layout, const EncoderHandle& enc,
                         const std::vector<Embedding>& extra = {}) const;

  /// (N + E + 1) x layout_dim keys/values: projected layout embeddings,
  /// projected extra tokens, then the learned null token.
  ag::Var layout_tokens(const Conditioning& c) const;

  /// Predicts noise for x_t given as 3 x (B*H*W) in [-1, 1].
  ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>& timesteps,
                        const std::vector<Conditioning>& conds) const;

  /// Cross-attention output (before the residual add) of the first
  /// injection site, as (H*W) x channels for a single image.
  Eigen::MatrixXd first_injection_output(const Eigen::MatrixXd& x_t, int timestep, const Conditioning& cond) const;

  nn::ParameterSet parameters() const;

 private:
  struct Trace;
  ag::Var run(const ag::Var& x_t, const std::vector<int>& timesteps, const std::vector<Conditioning>& conds,
              Trace* trace) const;
  ag::Var res_block(const ResBlock& b, const ag::Var& x, const ag::Var& temb, int batch, int res) const;
  ag::Var cross_block(const CrossAttentionBlock& b, const ag::Var& x, const std::vector<ag::Var>& tokens,
                      const std::vector<Conditioning>& conds, int batch, Trace* trace) const;

  DiffusionConfig config_;
  NoiseSchedule schedule_;
  int text_dim_;

  nn::Linear pos_proj_;     // 4 -> text_dim, learned box encoding
  nn::Linear layout_proj_;  // text_dim -> layout_dim
  ag::Var null_token_;      // 1 x layout_dim
  nn::Linear time_in_, time_out_;
  nn::Conv2d conv_in_;
  std::vector<ResBlock> down_blocks_;
  std::vector<std::optional<CrossAttentionBlock>> down_attn_;
  ResBlock mid1_, mid2_;
  CrossAttentionBlock mid_attn_;
  std::vector<ResBlock> up_blocks_;
  std::vector<std::optional<CrossAttentionBlock>> up_attn_;
  nn::GroupNorm out_norm_;
  nn::Conv2d conv_out_;
};

/// Sinusoidal embedding of integer timesteps, B x dim.
Eigen::MatrixXd timestep_embedding(const std::vector<int>& timesteps, int dim);

enum class LayoutSource { GroundTruth, Decoder };

struct DiffusionTrainConfig {
  nn::AdamWConfig adamw;
  int steps = 500;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double lambda_semantic = 1.0;
  int semantic_every = 10;
  LayoutSource layout_source = LayoutSource::GroundTruth;
};

struct DiffusionStepLog {
  int step = 0;
  double noise_mse = 0.0;
  double semantic = 0.0;  // 0 on steps without the semantic term
  bool has_semantic = false;
  double total = 0.0;

  friend bool operator==(const DiffusionStepLog&, const DiffusionStepLog&) = default;
};

/// Pixel planes in [-1, 1] for an image in [0, 1].
Eigen::MatrixXd to_model_space(const Image& image);
Image from_model_space(int height, int width, const Eigen::MatrixXd& planes);

/// Differentiable toy image embedding of 3 x (B*H*W) images in [-1, 1];
/// returns B x dim rows matching encode_image on the equivalent [0, 1]
/// images.
ag::Var toy_image_embedding(const ag::Var& images, int batch, int height, int width, const EncoderHandle& enc);

std::vector<DiffusionStepLog> train_diffusion(GeneratorModel& model, const std::vector<Sample>& dataset,
                                              const EncoderHandle& enc, const DiffusionTrainConfig& cfg,
                                              const LayoutDecoderModel* decoder = nullptr);

/// Noise-prediction MSE on a fixed seeded set of (t, noise) draws per
/// sample; used to compare loss before and after training.
double evaluate_noise_loss(const GeneratorModel& model, const std::vector<Sample>& dataset, const EncoderHandle& enc,
                           std::uint64_t seed, int draws_per_sample = 8);

struct SamplerOptions {
  bool ddim = false;
  std::vector<Embedding> extra_tokens;
};

using NoisePredictor = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x_t, int t)>;

/// Descending timesteps, `num_steps` of them spread evenly over the schedule.
std::vector<int> respaced_timesteps(int schedule_steps, int num_steps);

/// Ancestral (or DDIM) sampling of a 3 x pixels sample in [-1, 1] from
/// seeded Gaussian noise.
Eigen::MatrixXd sample_planes(const NoiseSchedule& sched, Eigen::Index pixels, const NoisePredictor& predict,
                              std::uint64_t seed, int num_steps, bool ddim = false);

/// Ancestral sampling over `num_steps` evenly respaced timesteps.
Image generate(const GeneratorModel& model, const Layout& layout, const EncoderHandle& enc, std::uint64_t seed,
               int num_steps, const SamplerOptions& options = {});

}  // namespace learn
