#include <doctest.h>

#include <cmath>

#include "learn/error.hpp"
#include "learn/losses.hpp"
#include "learn/metrics.hpp"
#include "learn/random.hpp"

using namespace learn;

namespace {

Layout layout_of(std::initializer_list<LayoutElement> els) {
  Layout l;
  l.elements = els;
  return l;
}

Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  img.planes() = rng.normal_matrix(3, Eigen::Index(h) * w, 0.3).array().abs().min(1.0).matrix();
  return img;
}

Image flip_h(const Image& img) {
  Image out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out(y, x, c) = img(y, img.width() - 1 - x, c);
  return out;
}

Image flip_v(const Image& img) {
  Image out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out(y, x, c) = img(img.height() - 1 - y, x, c);
  return out;
}

// Sobel by explicit kernels on an edge-replicated copy.
double sobel_oracle(const Eigen::MatrixXd& lum) {
  const Eigen::Index h = lum.rows(), w = lum.cols();
  Eigen::MatrixXd pad(h + 2, w + 2);
  for (Eigen::Index y = 0; y < h + 2; ++y)
    for (Eigen::Index x = 0; x < w + 2; ++x)
      pad(y, x) = lum(std::clamp<Eigen::Index>(y - 1, 0, h - 1), std::clamp<Eigen::Index>(x - 1, 0, w - 1));
  Eigen::Matrix3d kx;
  kx << -1, 0, 1, -2, 0, 2, -1, 0, 1;
  const Eigen::Matrix3d ky = kx.transpose();
  double total = 0.0;
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      const Eigen::Matrix3d patch = pad.block<3, 3>(y, x);
      total += std::hypot(patch.cwiseProduct(kx).sum(), patch.cwiseProduct(ky).sum());
    }
  return total / static_cast<double>(h * w);
}

Eigen::MatrixXd random_features(Rng& rng, int n, int d, double shift) {
  return (rng.normal_matrix(n, d).array() + shift).matrix();
}

}  // namespace

TEST_CASE("sam_iou oracles") {
  const auto mask = RegionMask::from_box(validate_box(0.25, 0.25, 0.5, 0.5), 8, 8, "ball");
  CHECK(mask.count() == 16);
  CHECK(sam_iou(layout_of({{"ball", validate_box(0.25, 0.25, 0.5, 0.5)}}), {mask}) == doctest::Approx(100.0));
  CHECK(sam_iou(Layout{}, {mask}) == 0.0);
  // Left half of the mask: 8 of 16 cells, no spill.
  CHECK(sam_iou(layout_of({{"ball", validate_box(0.25, 0.25, 0.25, 0.5)}}), {mask}) == doctest::Approx(50.0));
  // Two references, one matched exactly.
  const auto other = RegionMask::from_box(validate_box(0, 0, 0.25, 0.25), 8, 8, "ramp");
  CHECK(sam_iou(layout_of({{"ball", validate_box(0.25, 0.25, 0.5, 0.5)}}), {mask, other}) == doctest::Approx(50.0));
  CHECK_THROWS_AS(sam_iou(Layout{}, {}), Error);
}

TEST_CASE("sam_iou prefers same-label matches") {
  const auto a = RegionMask::from_box(validate_box(0, 0, 0.5, 0.5), 8, 8, "ball");
  // The ramp box fits the ball mask better, but the ball box claims it first.
  const Layout l = layout_of({{"ramp", validate_box(0, 0, 0.5, 0.5)}, {"ball", validate_box(0, 0, 0.5, 0.25)}});
  CHECK(sam_iou(l, {a}) == doctest::Approx(50.0));
}

TEST_CASE("sam_iou and crop_clip ignore element order") {
  Rng rng(2);
  const auto enc = EncoderHandle::toy(32, 1);
  for (int trial = 0; trial < 30; ++trial) {
    Layout l;
    std::vector<RegionMask> refs;
    const char* labels[] = {"ball", "ramp", "lever"};
    for (int i = 0; i < 3; ++i) {
      const double x = rng.uniform(0, 0.7), y = rng.uniform(0, 0.7);
      const auto b = validate_box(x, y, rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3));
      l.elements.push_back({labels[rng.uniform_int(0, 2)], b});
      refs.push_back(RegionMask::from_box(validate_box(x, y, rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)), 16, 16,
                                          labels[i]));
    }
    Layout rev = l;
    std::reverse(rev.elements.begin(), rev.elements.end());
    const double s = sam_iou(l, refs);
    CHECK(s == sam_iou(rev, refs));
    CHECK(s >= 0.0);
    CHECK(s <= 100.0);
    const Image img = random_image(rng, 16, 16);
    const double c = crop_clip_score(img, l, enc).score;
    CHECK(c == doctest::Approx(crop_clip_score(img, rev, enc).score).epsilon(1e-12));
    CHECK(c >= -100.0);
    CHECK(c <= 100.0);
  }
}

TEST_CASE("crop_clip skips empty crops and matches its definition") {
  const auto enc = EncoderHandle::toy(32, 3);
  Rng rng(3);
  const Image img = random_image(rng, 16, 16);
  const auto good = validate_box(0.1, 0.1, 0.5, 0.5);
  const auto r = crop_clip_score(img, layout_of({{"ball", good}, {"ramp", validate_box(0.3, 0.3, 0.0, 0.2)}}), enc);
  CHECK(r.skipped == std::vector<std::size_t>{1});
  CHECK(std::isnan(r.per_element[1]));
  const double expect = 100.0 * cosine_similarity(encode_region(enc, img, good), encode_text(enc, "ball"));
  CHECK(r.score == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.per_element[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("fid oracles and symmetry") {
  Rng rng(4);
  const Eigen::MatrixXd a = random_features(rng, 40, 5, 0.0);
  CHECK(std::abs(fid_score(a, a)) < 1e-6);

  // Same samples shifted by a unit vector: covariance identical, so the
  // distance is exactly the squared mean shift.
  Eigen::MatrixXd b = a;
  b.col(2).array() += 1.0;
  CHECK(fid_score(a, b) == doctest::Approx(1.0).epsilon(1e-6));

  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd x = random_features(rng, rng.uniform_int(2, 30), 4, 0.0);
    const Eigen::MatrixXd y = random_features(rng, rng.uniform_int(2, 30), 4, rng.uniform(-1, 1));
    CHECK(std::abs(fid_score(x, y) - fid_score(y, x)) < 1e-6);
    CHECK(fid_score(x, y) >= 0.0);
  }
  CHECK_THROWS_AS(fid_score(a.topRows(1), a), Error);
  CHECK_THROWS_AS(fid_score(a, a.leftCols(3)), Error);
}

TEST_CASE("similarity statistics") {
  const Embedding e1 = Eigen::Vector3d(1, 0, 0), e2 = Eigen::Vector3d(0, 1, 0), e3 = Eigen::Vector3d(1, 1, 0);
  const auto one = intra_concept_similarity_stats({{"a", {e1, e1}}});
  CHECK(one.intra_mean == doctest::Approx(1.0));
  CHECK_FALSE(one.inter_mean.has_value());
  CHECK(one.intra_pairs == 1);
  CHECK(one.intra_histograms.at("a")[kSimilarityBins - 1] == 1);

  const auto ortho = intra_concept_similarity_stats({{"a", {e1, e1}}, {"b", {e2, e2}}});
  REQUIRE(ortho.inter_mean.has_value());
  CHECK(*ortho.inter_mean == doctest::Approx(0.0));
  CHECK(ortho.inter_pairs == 4);

  // intra: a has cos(e1,e3); b has cos(e2,e2)=1, cos(e2,-e1)=0, cos(e2,-e1)=0
  // inter: a x b = {e1,e3} x {e2,e2,-e1}
  const double r = 1.0 / std::sqrt(2.0);
  const Embedding n1 = -e1;
  const auto mixed = intra_concept_similarity_stats({{"a", {e1, e3}}, {"b", {e2, e2, n1}}});
  CHECK(mixed.intra_pairs == 4);
  CHECK(mixed.intra_mean == doctest::Approx((r + 1.0 + 0.0 + 0.0) / 4.0).epsilon(1e-12));
  CHECK(mixed.inter_pairs == 6);
  CHECK(*mixed.inter_mean == doctest::Approx((0 + 0 - 1 + r + r - r) / 6.0).epsilon(1e-12));

  CHECK(similarity_bin(-1.0) == 0);
  CHECK(similarity_bin(1.0) == kSimilarityBins - 1);
  CHECK(similarity_bin(0.0) == 20);
  CHECK(similarity_bin(0.049) == 20);
  CHECK_THROWS_AS(intra_concept_similarity_stats({{"a", {e1}}, {"b", {e2}}}), Error);
}

TEST_CASE("clarity oracles") {
  const Clarity flat = clarity_metrics(Image(8, 8, 0.3));
  CHECK(flat.luminance_variance == 0.0);
  CHECK(flat.edge_clutter == 0.0);

  // Black left half, white right half, four columns wide.
  Image split(3, 4, 0.0);
  for (int y = 0; y < 3; ++y)
    for (int x = 2; x < 4; ++x)
      for (int c = 0; c < 3; ++c) split(y, x, c) = 1.0;
  const Clarity s = clarity_metrics(split);
  CHECK(s.luminance_variance == doctest::Approx(0.25));
  // Only columns 1 and 2 see the edge, each with |gx| = 4.
  CHECK(s.edge_clutter == doctest::Approx(2.0));

  // 2x2 checkerboard of 2x2 blocks.
  Image board(4, 4, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      if ((y / 2 + x / 2) % 2 == 1)
        for (int c = 0; c < 3; ++c) board(y, x, c) = 1.0;
  Eigen::MatrixXd lum(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) lum(y, x) = board.luminance()[y * 4 + x];
  CHECK(clarity_metrics(board).edge_clutter == doctest::Approx(sobel_oracle(lum)).epsilon(1e-12));
  CHECK(clarity_metrics(board).luminance_variance == doctest::Approx(0.25));
}

TEST_CASE("clarity is invariant to flips") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Image img = random_image(rng, rng.uniform_int(1, 12), rng.uniform_int(1, 12));
    const Clarity c = clarity_metrics(img);
    for (const Image& f : {flip_h(img), flip_v(img)}) {
      const Clarity d = clarity_metrics(f);
      CHECK(d.luminance_variance == doctest::Approx(c.luminance_variance).epsilon(1e-12));
      CHECK(std::abs(d.edge_clutter - c.edge_clutter) < 1e-9);
    }
    Eigen::MatrixXd lum(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) lum(y, x) = img.luminance()[y * img.width() + x];
    CHECK(c.edge_clutter == doctest::Approx(sobel_oracle(lum)).epsilon(1e-12));
  }
}

TEST_CASE("report aggregates are item means") {
  MetricReport r;
  r.items = {{"b", 10.0, 50.0}, {"a", 20.0, 100.0}, {"c", 0.0, 0.0}};
  r.finalize();
  CHECK(r.items.front().id == "a");
  CHECK(std::abs(r.crop_clip - 10.0) < 1e-9);
  CHECK(std::abs(r.sam_iou - 50.0) < 1e-9);
  const auto j = r.to_json();
  CHECK(j["definitions_version"] == kMetricDefinitionsVersion);
  CHECK(j["fid"].is_null());
  CHECK(j["items"].size() == 3);
}
