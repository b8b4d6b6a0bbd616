#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <Eigen/Dense>

#include "learn/image.hpp"
#include "learn/layout.hpp"

namespace learn {

enum class EncoderKind { Pretrained, Toy };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Toy;
  int dim = 512;
  std::uint64_t seed = 0;
  std::string weights_path;
};

/// Side length of the luminance grid the toy image encoder projects.
inline constexpr int kToyGrid = 8;
inline constexpr int kToyImageFeatures = kToyGrid * kToyGrid + 1;

/// Immutable text/image encoder handle with a shared embedding space
/// (text_dim == image_dim). Copies share the projection tables.
class EncoderHandle {
 public:
  explicit EncoderHandle(EncoderConfig config = {});

  static EncoderHandle toy(int dim = 512, std::uint64_t seed = 0);

  EncoderKind kind() const { return config_.kind; }
  int text_dim() const { return config_.dim; }
  int image_dim() const { return config_.dim; }
  std::uint64_t seed() const { return config_.seed; }
  const EncoderConfig& config() const { return config_; }

  /// True when the image path is the analytic toy projection, which the
  /// diffusion trainer can backpropagate through.
  bool differentiable() const { return config_.kind == EncoderKind::Toy; }

  /// dim x kToyImageFeatures Gaussian projection (toy backend only).
  const Eigen::MatrixXd& image_projection() const;

 private:
  EncoderConfig config_;
  std::shared_ptr<const Eigen::MatrixXd> image_projection_;
};

Embedding encode_text(const EncoderHandle& h, const std::string& text);
Embedding encode_image(const EncoderHandle& h, const Image& image);
Embedding encode_region(const EncoderHandle& h, const Image& image, const BoundingBox& box);

/// Pixel rectangle [x0, x1) x [y0, y1) for a box on a W x H image: floor
/// for the origin, ceil for the far edge, clamped to the image.
struct PixelRect {
  int x0, y0, x1, y1;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};
PixelRect box_to_pixels(const BoundingBox& box, int width, int height);

/// kToyGrid^2 x (H*W) area-pooling matrix used by the toy image encoder.
/// Bins with no pixel centre fall back to the nearest pixel.
Eigen::MatrixXd toy_pooling_matrix(int height, int width);

/// Raw toy feature vector [2*pooled_luma - 1, 1] before projection.
Eigen::VectorXd toy_image_features(const Image& image);

}  // namespace learn
