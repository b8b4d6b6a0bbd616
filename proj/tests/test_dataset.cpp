#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "learn/dataset.hpp"
#include "learn/encoders.hpp"
#include "learn/error.hpp"
#include "support.hpp"

using namespace learn;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Error error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected a learn::Error");
  return Error(ErrorCode::IoError, "");
}

// Writes one small PNG and a manifest whose lines are given verbatim.
std::filesystem::path manifest_with(const testing::TempDir& dir, const std::vector<std::string>& lines) {
  std::filesystem::create_directories(dir / "images");
  write_png(Image(4, 4, 1.0), dir / "images/a.png");
  const auto path = dir / "manifest.jsonl";
  std::ofstream out(path);
  for (const auto& l : lines) out << l << "\n";
  return path;
}

std::string record_line(const std::string& id, const std::string& box = "[0.1,0.1,0.5,0.5]") {
  return R"({"id":")" + id + R"(","image":"images/a.png","caption":"a ball","regions":[{"label":"ball","box":)" + box +
         R"(,"description":""}],"tags":[]})";
}

bool same_colour(const Image& img, int y, int x, const std::array<int, 3>& rgb) {
  for (int c = 0; c < 3; ++c)
    if (std::abs(img(y, x, c) - rgb[c] / 255.0) > 1e-9) return false;
  return true;
}

bool is_white(const Image& img, int y, int x) {
  return img(y, x, 0) == 1.0 && img(y, x, 1) == 1.0 && img(y, x, 2) == 1.0;
}

}  // namespace

TEST_CASE("manifest loading errors") {
  testing::TempDir dir("manifest");
  CHECK(load_manifest(manifest_with(dir, {})).empty());
  CHECK(load_manifest(manifest_with(dir, {R"({"schema":"learn-manifest-v1"})", record_line("a")})).size() == 1);

  const auto bad_box = error_of([&] { load_manifest(manifest_with(dir, {record_line("a"), record_line("b", "[0.6,0,0.5,0.2]")})); });
  CHECK(bad_box.code() == ErrorCode::InvalidBox);
  CHECK(bad_box.detail().find("'b'") != std::string::npos);
  CHECK(bad_box.detail().find("region 0") != std::string::npos);

  CHECK(error_of([&] { load_manifest(manifest_with(dir, {record_line("a"), record_line("a")})); }).code() ==
        ErrorCode::DuplicateId);
  const auto parse = error_of([&] { load_manifest(manifest_with(dir, {record_line("a"), "{not json"})); });
  CHECK(parse.code() == ErrorCode::ParseError);
  CHECK(parse.detail().find(":2:") != std::string::npos);

  std::string missing = record_line("m");
  missing.replace(missing.find("images/a.png"), 12, "images/q.png");
  CHECK(error_of([&] { load_manifest(manifest_with(dir, {missing})); }).code() == ErrorCode::MissingImage);
  CHECK(error_of([&] { load_manifest(dir / "nope.jsonl"); }).code() == ErrorCode::IoError);
}

TEST_CASE("manifest round trip") {
  testing::TempDir dir("roundtrip");
  SyntheticSpec spec;
  spec.num_records = 6;
  spec.image_size = 16;
  const auto samples = generate_synthetic_dataset(spec, 3);
  const auto path = write_dataset(dir.path(), samples);
  const auto loaded = load_samples(path);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].record == samples[i].record);
    CHECK(loaded[i].image.planes() == samples[i].image.planes());
  }
  // A directory stands in for its manifest.
  CHECK(load_manifest(dir.path()).size() == 6);
  for (const auto& r : samples) CHECK(record_from_json(record_to_json(r.record)) == r.record);
}

TEST_CASE("synthetic generation is bit-reproducible") {
  testing::TempDir a("synth_a"), b("synth_b");
  SyntheticSpec spec;
  spec.num_records = 5;
  const auto pa = write_dataset(a.path(), generate_synthetic_dataset(spec, 7));
  const auto pb = write_dataset(b.path(), generate_synthetic_dataset(spec, 7));
  CHECK(slurp(pa) == slurp(pb));
  for (const auto& r : load_manifest(pa)) CHECK(slurp(resolve_image_path(pa, r)) == slurp(resolve_image_path(pb, r)));
  CHECK(generate_synthetic_dataset(spec, 8)[0].record != generate_synthetic_dataset(spec, 7)[0].record);
}

TEST_CASE("synthetic shape counts and validation") {
  SyntheticSpec spec;
  spec.num_records = 20;
  spec.min_shapes = spec.max_shapes = 2;
  for (const auto& s : generate_synthetic_dataset(spec, 1)) {
    CHECK(s.record.regions.size() == 2);
    CHECK_FALSE(s.record.caption.empty());
    CHECK(s.record.caption == caption_for_regions(s.record.regions));
  }
  SyntheticSpec bad = spec;
  bad.image_size = 4;
  CHECK(error_of([&] { generate_synthetic_dataset(bad, 1); }).code() == ErrorCode::SpecInvalid);
  bad = spec;
  bad.palette.clear();
  CHECK(error_of([&] { generate_synthetic_dataset(bad, 1); }).code() == ErrorCode::SpecInvalid);
  bad = spec;
  bad.min_shapes = 3;
  CHECK_THROWS_AS(generate_synthetic_dataset(bad, 1), Error);
}

TEST_CASE("region boxes are the exact pixel extents of their shapes") {
  SyntheticSpec spec;
  spec.num_records = 40;
  spec.image_size = 24;
  spec.max_shapes = 3;
  std::map<std::string, std::array<int, 3>> colour;
  for (const auto& p : spec.palette) colour[p.label] = p.rgb;
  for (const auto& s : generate_synthetic_dataset(spec, 5)) {
    const Image& img = s.image;
    const int n = img.width();
    std::vector<bool> covered(static_cast<std::size_t>(n) * n, false);
    for (const auto& r : s.record.regions) {
      const auto px = box_to_pixels(r.box, n, n);
      // Box edges sit on whole pixels.
      CHECK(r.box.x * n == doctest::Approx(px.x0).epsilon(1e-12));
      CHECK((r.box.x + r.box.w) * n == doctest::Approx(px.x1).epsilon(1e-12));
      int x0 = n, y0 = n, x1 = -1, y1 = -1;
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          if (x < px.x0 || x >= px.x1 || y < px.y0 || y >= px.y1) continue;
          covered[static_cast<std::size_t>(y) * n + x] = true;
          if (!same_colour(img, y, x, colour.at(r.label))) continue;
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
      CHECK(x0 == px.x0);
      CHECK(y0 == px.y0);
      CHECK(x1 == px.x1);
      CHECK(y1 == px.y1);
    }
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (!is_white(img, y, x)) CHECK(covered[static_cast<std::size_t>(y) * n + x]);
  }
}

TEST_CASE("annotators") {
  const auto reg = AnnotatorRegistry::with_builtins();
  SyntheticSpec spec;
  spec.num_records = 10;
  for (const auto& s : generate_synthetic_dataset(spec, 2)) {
    const auto found = annotate_image(s.image, reg, "oracle");
    REQUIRE(found.size() == s.record.regions.size());
    for (std::size_t i = 0; i < found.size(); ++i) {
      CHECK(found[i].label == s.record.regions[i].label);
      CHECK(box_iou(found[i].box, s.record.regions[i].box) == doctest::Approx(1.0));
    }
    CHECK(annotate_image(s.image, reg, "stub").empty());
  }
  CHECK(error_of([&] { annotate_image(Image(8, 8, 1.0), reg, "clipseg"); }).code() == ErrorCode::AnnotatorUnavailable);
}

TEST_CASE("dataset splits") {
  std::vector<AnnotatedImage> recs;
  for (int i = 0; i < 10; ++i) recs.push_back({"r" + std::to_string(i), "", "c", {}, {}});
  const auto s = split_dataset(recs, {0.8, 0.1, 0.1}, 3);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 10);

  CHECK(split_dataset(recs, {1, 0, 0}, 3).train.size() == 10);
  const auto again = split_dataset(recs, {0.8, 0.1, 0.1}, 3);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);

  auto shuffled = recs;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto re = split_dataset(shuffled, {0.8, 0.1, 0.1}, 3);
  CHECK(re.train == s.train);
  CHECK(re.val == s.val);

  for (int n : {1, 3, 7, 13})
    for (auto f : {std::array<double, 3>{0.7, 0.2, 0.1}, std::array<double, 3>{0.34, 0.33, 0.33}}) {
      std::vector<AnnotatedImage> sub(recs.begin(), recs.begin() + std::min(n, 10));
      const auto sp = split_dataset(sub, f, 1);
      const double total = static_cast<double>(sub.size());
      CHECK(std::abs(sp.train.size() - f[0] * total) <= 1.0);
      CHECK(std::abs(sp.val.size() - f[1] * total) <= 1.0);
      CHECK(std::abs(sp.test.size() - f[2] * total) <= 1.0);
      CHECK(sp.train.size() + sp.val.size() + sp.test.size() == sub.size());
    }
  CHECK(error_of([&] { split_dataset(recs, {0.5, 0.2, 0.2}, 0); }).code() == ErrorCode::BadFractions);
  CHECK(error_of([&] { split_dataset(recs, {1.2, -0.1, -0.1}, 0); }).code() == ErrorCode::BadFractions);
}
