#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace learn {

using Embedding = Eigen::VectorXd;

/// Axis-aligned box on the unit canvas: (x, y) is the top-left corner,
/// (w, h) the extent, all as fractions of the canvas.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  Eigen::Vector4d as_vector() const { return {x, y, w, h}; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline constexpr double kBoxTolerance = 1e-9;

/// Checks a raw (x, y, w, h) tuple. Values within kBoxTolerance of a bound
/// are clamped onto it; anything further out throws OutOfRange.
BoundingBox validate_box(double x, double y, double w, double h);
BoundingBox validate_box(const std::array<double, 4>& raw);

double box_iou(const BoundingBox& a, const BoundingBox& b);

/// Half-open membership: [x, x+w) x [y, y+h).
bool box_contains(const BoundingBox& b, double u, double v);

struct LayoutElement {
  std::string label;
  BoundingBox box;

  friend bool operator==(const LayoutElement&, const LayoutElement&) = default;
};

inline constexpr int kDefaultMaxLayoutTokens = 40;

struct Layout {
  std::vector<LayoutElement> elements;
  std::string prompt;

  std::size_t size() const { return elements.size(); }
  bool empty() const { return elements.empty(); }

  friend bool operator==(const Layout&, const Layout&) = default;
};

/// Throws if any label is blank or the element count exceeds max_tokens.
void validate_layout(const Layout& layout, int max_tokens = kDefaultMaxLayoutTokens);

/// Affine position encoder f_pos(b) = W^T [x y w h] + bias, W is 4 x d.
struct PositionEncoder {
  Eigen::Matrix<double, 4, Eigen::Dynamic> weight;
  Eigen::VectorXd bias;

  static PositionEncoder zeros(int dim);
  static PositionEncoder seeded(int dim, std::uint64_t seed, double stddev = 0.02);

  int dim() const { return static_cast<int>(bias.size()); }
};

Embedding encode_position(const BoundingBox& b, int dim, const PositionEncoder& params);

class EncoderHandle;

/// l = f_label(label) + f_pos(box), where f_label is the text encoder.
Embedding layout_element_embedding(const LayoutElement& e, const EncoderHandle& label_encoder,
                                   const PositionEncoder& position);
Embedding layout_element_embedding(const Embedding& label_embedding, const BoundingBox& box,
                                   const PositionEncoder& position);

nlohmann::json layout_to_json(const Layout& layout);
Layout layout_from_json(const nlohmann::json& j);
/// Serialized with 17 significant digits so boxes round-trip exactly.
std::string dump_layout(const Layout& layout, int indent = -1);

}  // namespace learn
