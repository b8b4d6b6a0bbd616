#include "learn/layout.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "learn/encoders.hpp"
#include "learn/error.hpp"
#include "learn/random.hpp"

namespace learn {

namespace {

double snap(double value, double lo, double hi, const char* name) {
  if (value < lo - kBoxTolerance || value > hi + kBoxTolerance) {
    std::ostringstream os;
    os << name << "=" << value << " outside [" << lo << ", " << hi << "]";
    throw Error(ErrorCode::OutOfRange, os.str());
  }
  return std::clamp(value, lo, hi);
}

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

BoundingBox validate_box(double x, double y, double w, double h) {
  for (double v : {x, y, w, h}) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "box coordinate is not finite");
  }
  BoundingBox b;
  b.x = snap(x, 0.0, 1.0, "x");
  b.y = snap(y, 0.0, 1.0, "y");
  b.w = snap(w, 0.0, 1.0, "w");
  b.h = snap(h, 0.0, 1.0, "h");
  if (b.x + b.w > 1.0 + kBoxTolerance) {
    std::ostringstream os;
    os << "x+w=" << x + w << " exceeds canvas";
    throw Error(ErrorCode::OutOfRange, os.str());
  }
  if (b.y + b.h > 1.0 + kBoxTolerance) {
    std::ostringstream os;
    os << "y+h=" << y + h << " exceeds canvas";
    throw Error(ErrorCode::OutOfRange, os.str());
  }
  if (b.x + b.w > 1.0) b.w = 1.0 - b.x;
  if (b.y + b.h > 1.0) b.h = 1.0 - b.y;
  return b;
}

BoundingBox validate_box(const std::array<double, 4>& raw) {
  return validate_box(raw[0], raw[1], raw[2], raw[3]);
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool box_contains(const BoundingBox& b, double u, double v) {
  return b.x <= u && u < b.x + b.w && b.y <= v && v < b.y + b.h;
}

void validate_layout(const Layout& layout, int max_tokens) {
  if (static_cast<int>(layout.size()) > max_tokens) {
    throw Error(ErrorCode::OutOfRange, "layout has " + std::to_string(layout.size()) +
                                           " elements, limit is " + std::to_string(max_tokens));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (is_blank(layout.elements[i].label)) {
      throw Error(ErrorCode::EmptyInput, "layout element " + std::to_string(i) + " has a blank label");
    }
    const auto& b = layout.elements[i].box;
    validate_box(b.x, b.y, b.w, b.h);
  }
}

PositionEncoder PositionEncoder::zeros(int dim) {
  PositionEncoder p;
  p.weight = Eigen::Matrix<double, 4, Eigen::Dynamic>::Zero(4, dim);
  p.bias = Eigen::VectorXd::Zero(dim);
  return p;
}

PositionEncoder PositionEncoder::seeded(int dim, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  PositionEncoder p;
  p.weight = rng.normal_matrix(4, dim, stddev);
  p.bias = rng.normal_matrix(dim, 1, stddev);
  return p;
}

Embedding encode_position(const BoundingBox& b, int dim, const PositionEncoder& params) {
  if (params.weight.cols() != dim || params.bias.size() != dim) {
    throw Error(ErrorCode::DimensionMismatch, "position encoder is " + std::to_string(params.bias.size()) +
                                                  "-d, requested " + std::to_string(dim));
  }
  return params.weight.transpose() * b.as_vector() + params.bias;
}

Embedding layout_element_embedding(const Embedding& label_embedding, const BoundingBox& box,
                                   const PositionEncoder& position) {
  if (label_embedding.size() != position.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "label embedding is " + std::to_string(label_embedding.size()) +
                                                  "-d, position encoder " + std::to_string(position.dim()) +
                                                  "-d");
  }
  return label_embedding + encode_position(box, position.dim(), position);
}

Embedding layout_element_embedding(const LayoutElement& e, const EncoderHandle& label_encoder,
                                   const PositionEncoder& position) {
  return layout_element_embedding(encode_text(label_encoder, e.label), e.box, position);
}

nlohmann::json layout_to_json(const Layout& layout) {
  nlohmann::json elements = nlohmann::json::array();
  for (const auto& e : layout.elements) {
    elements.push_back({{"label", e.label}, {"box", {e.box.x, e.box.y, e.box.w, e.box.h}}});
  }
  return {{"concept", layout.prompt}, {"elements", std::move(elements)}};
}

Layout layout_from_json(const nlohmann::json& j) {
  try {
    Layout layout;
    layout.prompt = j.value("concept", std::string{});
    for (const auto& e : j.at("elements")) {
      const auto raw = e.at("box").get<std::array<double, 4>>();
      layout.elements.push_back({e.at("label").get<std::string>(), validate_box(raw)});
    }
    return layout;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ParseError, std::string("layout json: ") + ex.what());
  }
}

std::string dump_layout(const Layout& layout, int indent) { return layout_to_json(layout).dump(indent); }

}  // namespace learn
