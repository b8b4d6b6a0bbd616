#include "learn/encoders.hpp"

#include <cctype>
#include <cmath>
#include <filesystem>

#include "learn/error.hpp"
#include "learn/random.hpp"

namespace learn {

namespace {

Embedding normalized(Eigen::VectorXd v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorCode::ZeroVector, "encoder produced a zero vector");
  return v / n;
}

[[noreturn]] void pretrained_unavailable(const EncoderHandle& h) {
  const auto& path = h.config().weights_path;
  if (path.empty() || !std::filesystem::exists(path)) {
    throw Error(ErrorCode::BackendUnavailable, "pretrained encoder weights not found at '" + path + "'");
  }
  throw Error(ErrorCode::BackendUnavailable,
              "this build has no pretrained vision-language backend; use encoder.kind=toy");
}

int bin_of(int pixel, int extent) { return pixel * kToyGrid / extent; }

}  // namespace

EncoderHandle::EncoderHandle(EncoderConfig config) : config_(std::move(config)) {
  if (config_.dim <= 0) throw Error(ErrorCode::InvalidConfig, "encoder.dim must be positive");
  if (config_.kind == EncoderKind::Toy) {
    Rng rng(derive_seed(config_.seed, "toy-image-projection"));
    image_projection_ = std::make_shared<const Eigen::MatrixXd>(rng.normal_matrix(config_.dim, kToyImageFeatures));
  }
}

EncoderHandle EncoderHandle::toy(int dim, std::uint64_t seed) {
  return EncoderHandle(EncoderConfig{EncoderKind::Toy, dim, seed, {}});
}

const Eigen::MatrixXd& EncoderHandle::image_projection() const {
  if (!image_projection_) pretrained_unavailable(*this);
  return *image_projection_;
}

Embedding encode_text(const EncoderHandle& h, const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::EmptyInput, "cannot encode an empty string");
  if (h.kind() != EncoderKind::Toy) pretrained_unavailable(h);

  // Hashed bag of lower-cased alphanumeric tokens, one Gaussian direction
  // per token.
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(h.text_dim());
  std::string token;
  int tokens = 0;
  auto flush = [&] {
    if (token.empty()) return;
    Rng rng(mix_seed(h.seed(), stable_hash(token)));
    for (int i = 0; i < h.text_dim(); ++i) acc[i] += rng.normal();
    token.clear();
    ++tokens;
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      token.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  if (tokens == 0) {
    Rng rng(mix_seed(h.seed(), stable_hash(text, 0x84222325cbf29ce4ULL)));
    for (int i = 0; i < h.text_dim(); ++i) acc[i] = rng.normal();
  }
  return normalized(std::move(acc));
}

Eigen::MatrixXd toy_pooling_matrix(int height, int width) {
  Eigen::MatrixXd pool = Eigen::MatrixXd::Zero(kToyGrid * kToyGrid, Eigen::Index(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) pool(bin_of(y, height) * kToyGrid + bin_of(x, width), Eigen::Index(y) * width + x) = 1.0;
  for (int b = 0; b < pool.rows(); ++b) {
    const double count = pool.row(b).sum();
    if (count > 0.0) {
      pool.row(b) /= count;
    } else {
      const int by = b / kToyGrid;
      const int bx = b % kToyGrid;
      const int y = std::min(height - 1, static_cast<int>((by + 0.5) * height / kToyGrid));
      const int x = std::min(width - 1, static_cast<int>((bx + 0.5) * width / kToyGrid));
      pool(b, Eigen::Index(y) * width + x) = 1.0;
    }
  }
  return pool;
}

Eigen::VectorXd toy_image_features(const Image& image) {
  const Eigen::VectorXd luma = image.luminance();
  const int H = image.height();
  const int W = image.width();
  Eigen::VectorXd sums = Eigen::VectorXd::Zero(kToyGrid * kToyGrid);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(kToyGrid * kToyGrid);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int b = bin_of(y, H) * kToyGrid + bin_of(x, W);
      sums[b] += luma[Eigen::Index(y) * W + x];
      counts[b] += 1.0;
    }
  }
  Eigen::VectorXd features(kToyImageFeatures);
  for (int b = 0; b < kToyGrid * kToyGrid; ++b) {
    double pooled;
    if (counts[b] > 0.0) {
      pooled = sums[b] / counts[b];
    } else {
      const int y = std::min(H - 1, static_cast<int>((b / kToyGrid + 0.5) * H / kToyGrid));
      const int x = std::min(W - 1, static_cast<int>((b % kToyGrid + 0.5) * W / kToyGrid));
      pooled = luma[Eigen::Index(y) * W + x];
    }
    features[b] = 2.0 * pooled - 1.0;
  }
  features[kToyGrid * kToyGrid] = 1.0;
  return features;
}

Embedding encode_image(const EncoderHandle& h, const Image& image) {
  if (image.empty() || !image.planes().allFinite()) throw Error(ErrorCode::BadShape, "image is empty or non-finite");
  if (h.kind() != EncoderKind::Toy) pretrained_unavailable(h);
  return normalized(h.image_projection() * toy_image_features(image));
}

PixelRect box_to_pixels(const BoundingBox& box, int width, int height) {
  // Edges within rounding noise of a pixel boundary snap to it.
  constexpr double kSnap = 1e-9;
  PixelRect r;
  r.x0 = std::clamp(static_cast<int>(std::floor(box.x * width + kSnap)), 0, width);
  r.y0 = std::clamp(static_cast<int>(std::floor(box.y * height + kSnap)), 0, height);
  r.x1 = std::clamp(static_cast<int>(std::ceil((box.x + box.w) * width - kSnap)), 0, width);
  r.y1 = std::clamp(static_cast<int>(std::ceil((box.y + box.h) * height - kSnap)), 0, height);
  return r;
}

Embedding encode_region(const EncoderHandle& h, const Image& image, const BoundingBox& box) {
  if (box.w <= 0.0 || box.h <= 0.0) throw Error(ErrorCode::EmptyCrop, "box has zero extent");
  const PixelRect r = box_to_pixels(box, image.width(), image.height());
  if (r.width() <= 0 || r.height() <= 0) throw Error(ErrorCode::EmptyCrop, "rounded crop is empty");
  if (r.x0 == 0 && r.y0 == 0 && r.x1 == image.width() && r.y1 == image.height()) return encode_image(h, image);
  return encode_image(h, image.crop(r.x0, r.y0, r.x1, r.y1));
}

}  // namespace learn
