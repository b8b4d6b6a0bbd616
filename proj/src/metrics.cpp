#include "learn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "learn/error.hpp"
#include "learn/losses.hpp"

namespace learn {

std::size_t RegionMask::count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), true)); }

RegionMask RegionMask::from_box(const BoundingBox& box, int height, int width, std::string label) {
  if (height < 1 || width < 1) throw Error(ErrorCode::BadShape, "mask grid must be at least 1x1");
  RegionMask m;
  m.height = height;
  m.width = width;
  m.label = std::move(label);
  m.cells.assign(static_cast<std::size_t>(height) * width, false);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      m.cells[static_cast<std::size_t>(y) * width + x] = box_contains(box, (x + 0.5) / width, (y + 0.5) / height);
  return m;
}

double box_mask_iou(const BoundingBox& box, const RegionMask& mask) {
  std::size_t inter = 0, uni = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const bool in_box = box_contains(box, (x + 0.5) / mask.width, (y + 0.5) / mask.height);
      const bool in_mask = mask.at(y, x);
      inter += in_box && in_mask;
      uni += in_box || in_mask;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double sam_iou(const Layout& predicted, const std::vector<RegionMask>& references) {
  if (references.empty()) throw Error(ErrorCode::EmptyReferences, "sam_iou needs at least one reference mask");
  struct Pair {
    double iou;
    bool same_label;
    std::tuple<std::string, double, double, double, double> key;
    std::size_t ref;
    std::size_t pred;
  };
  std::vector<Pair> pairs;
  for (std::size_t j = 0; j < predicted.size(); ++j) {
    const auto& el = predicted.elements[j];
    for (std::size_t i = 0; i < references.size(); ++i) {
      const double iou = box_mask_iou(el.box, references[i]);
      if (iou <= 0.0) continue;
      pairs.push_back({iou, el.label == references[i].label, {el.label, el.box.x, el.box.y, el.box.w, el.box.h}, i, j});
    }
  }
  // Element order never matters: ties fall back to the element's content.
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.same_label != b.same_label) return a.same_label;
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.key != b.key) return a.key < b.key;
    return a.ref < b.ref;
  });
  std::vector<bool> ref_used(references.size(), false), pred_used(predicted.size(), false);
  double total = 0.0;
  for (const auto& p : pairs) {
    if (ref_used[p.ref] || pred_used[p.pred]) continue;
    ref_used[p.ref] = pred_used[p.pred] = true;
    total += p.iou;
  }
  return 100.0 * total / static_cast<double>(references.size());
}

CropClipResult crop_clip_score(const Image& image, const Layout& layout, const EncoderHandle& enc) {
  CropClipResult r;
  double total = 0.0;
  std::size_t scored = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& el = layout.elements[i];
    try {
      const double c = cosine_similarity(encode_region(enc, image, el.box), encode_text(enc, el.label));
      r.per_element.push_back(100.0 * c);
      total += c;
      ++scored;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyCrop) throw;
      r.per_element.push_back(std::numeric_limits<double>::quiet_NaN());
      r.skipped.push_back(i);
    }
  }
  r.score = scored == 0 ? 0.0 : 100.0 * total / static_cast<double>(scored);
  return r;
}

namespace {

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

void mean_cov(const Eigen::MatrixXd& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = f.colwise().mean().transpose();
  const Eigen::MatrixXd centered = f.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
}

}  // namespace

double fid_score(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b) {
  if (features_a.rows() < 2 || features_b.rows() < 2) {
    throw Error(ErrorCode::TooFewSamples, "fid needs at least 2 samples per set");
  }
  if (features_a.cols() != features_b.cols()) throw Error(ErrorCode::DimensionMismatch, "feature dimensions differ");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  mean_cov(features_a, mu_a, cov_a);
  mean_cov(features_b, mu_b, cov_b);
  // Regularise both sides together so the score stays symmetric.
  auto indefinite = [](const Eigen::MatrixXd& c) {
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(c).eigenvalues().minCoeff() < 0.0;
  };
  if (indefinite(cov_a) || indefinite(cov_b)) {
    cov_a += 1e-6 * Eigen::MatrixXd::Identity(cov_a.rows(), cov_a.cols());
    cov_b += 1e-6 * Eigen::MatrixXd::Identity(cov_b.rows(), cov_b.cols());
  }
  const Eigen::MatrixXd sa = symmetric_sqrt(cov_a);
  const Eigen::MatrixXd inner = sa * cov_b * sa;
  const double tr_root = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(0.5 * (inner + inner.transpose()))
                             .eigenvalues()
                             .cwiseMax(0.0)
                             .cwiseSqrt()
                             .sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
  return std::max(0.0, value);
}

int similarity_bin(double cosine) {
  const int b = static_cast<int>(std::floor((cosine + 1.0) / 0.05));
  return std::clamp(b, 0, kSimilarityBins - 1);
}

SimilarityStats intra_concept_similarity_stats(const std::map<std::string, std::vector<Embedding>>& by_concept) {
  bool enough = false;
  for (const auto& [name, list] : by_concept) enough = enough || list.size() >= 2;
  if (!enough) throw Error(ErrorCode::InsufficientSamples, "need at least one concept with two embeddings");

  SimilarityStats s;
  s.inter_histogram.assign(kSimilarityBins, 0);
  double intra_sum = 0.0, inter_sum = 0.0;
  for (auto it = by_concept.begin(); it != by_concept.end(); ++it) {
    auto& hist = s.intra_histograms[it->first];
    hist.assign(kSimilarityBins, 0);
    const auto& a = it->second;
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = i + 1; j < a.size(); ++j) {
        const double c = cosine_similarity(a[i], a[j]);
        ++hist[static_cast<std::size_t>(similarity_bin(c))];
        intra_sum += c;
        ++s.intra_pairs;
      }
    }
    for (auto jt = std::next(it); jt != by_concept.end(); ++jt) {
      for (const auto& u : a) {
        for (const auto& v : jt->second) {
          const double c = cosine_similarity(u, v);
          ++s.inter_histogram[static_cast<std::size_t>(similarity_bin(c))];
          inter_sum += c;
          ++s.inter_pairs;
        }
      }
    }
  }
  s.intra_mean = intra_sum / static_cast<double>(s.intra_pairs);
  if (s.inter_pairs > 0) s.inter_mean = inter_sum / static_cast<double>(s.inter_pairs);
  return s;
}

Clarity clarity_metrics(const Image& image) {
  check_image(image);
  const int h = image.height(), w = image.width();
  const Eigen::VectorXd lum = image.luminance();
  Clarity c;
  // Shifted by the first pixel so a constant image gives exactly zero.
  const Eigen::ArrayXd d = lum.array() - lum[0];
  c.luminance_variance = std::max(0.0, d.square().mean() - d.mean() * d.mean());
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return lum[Eigen::Index(y) * w + x];
  };
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
      total += std::hypot(gx, gy);
    }
  }
  c.edge_clutter = total / (static_cast<double>(h) * w);
  return c;
}

void MetricReport::finalize() {
  std::sort(items.begin(), items.end(), [](const MetricItem& a, const MetricItem& b) { return a.id < b.id; });
  crop_clip = sam_iou = 0.0;
  if (items.empty()) return;
  for (const auto& it : items) {
    crop_clip += it.crop_clip;
    sam_iou += it.sam_iou;
  }
  crop_clip /= static_cast<double>(items.size());
  sam_iou /= static_cast<double>(items.size());
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["definitions_version"] = kMetricDefinitionsVersion;
  j["definitions"] = {
      {"sam_iou", "box-to-mask IoU on the mask grid, greedy same-label-first matching, x100"},
      {"crop_clip", "mean cosine between region crop and label embeddings, x100"},
      {"fid", "Frechet distance between encoder feature sets"},
  };
  j["fid"] = fid ? nlohmann::json(*fid) : nlohmann::json(nullptr);
  j["crop_clip"] = crop_clip;
  j["sam_iou"] = sam_iou;
  j["items"] = nlohmann::json::array();
  for (const auto& it : items) j["items"].push_back({{"id", it.id}, {"crop_clip", it.crop_clip}, {"sam_iou", it.sam_iou}});
  return j;
}

}  // namespace learn
