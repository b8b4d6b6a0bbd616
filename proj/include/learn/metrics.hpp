#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "learn/encoders.hpp"
#include "learn/image.hpp"
#include "learn/layout.hpp"

namespace learn {

inline constexpr const char* kMetricDefinitionsVersion = "learn-metrics-v1";

/// Binary reference region on an H x W grid.
struct RegionMask {
  int height = 0;
  int width = 0;
  std::vector<bool> cells;  // row-major
  std::string label;

  bool at(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;

  static RegionMask from_box(const BoundingBox& box, int height, int width, std::string label);
};

/// IoU between a box rasterised by cell-centre coverage and a mask.
double box_mask_iou(const BoundingBox& box, const RegionMask& mask);

/// 100 x mean IoU over references after greedy matching.
double sam_iou(const Layout& predicted, const std::vector<RegionMask>& references);

struct CropClipResult {
  double score = 0.0;                 // 100 x mean cosine over scored elements
  std::vector<double> per_element;    // NaN where skipped
  std::vector<std::size_t> skipped;   // elements with empty crops
};

CropClipResult crop_clip_score(const Image& image, const Layout& layout, const EncoderHandle& enc);

double fid_score(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b);

inline constexpr int kSimilarityBins = 40;

struct SimilarityStats {
  std::map<std::string, std::vector<int>> intra_histograms;  // per concept
  std::vector<int> inter_histogram;
  double intra_mean = 0.0;
  std::optional<double> inter_mean;  // empty with a single concept
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;
};

/// Bin index of a cosine in [-1, 1] with bins of width 0.05.
int similarity_bin(double cosine);

SimilarityStats intra_concept_similarity_stats(const std::map<std::string, std::vector<Embedding>>& by_concept);

struct Clarity {
  double luminance_variance = 0.0;
  double edge_clutter = 0.0;
};

Clarity clarity_metrics(const Image& image);

struct MetricItem {
  std::string id;
  double crop_clip = 0.0;
  double sam_iou = 0.0;
};

struct MetricReport {
  std::optional<double> fid;
  double crop_clip = 0.0;
  double sam_iou = 0.0;
  std::vector<MetricItem> items;

  /// Recomputes the aggregates as means of the items (sorted by id).
  void finalize();
  nlohmann::json to_json() const;
};

}  // namespace learn
