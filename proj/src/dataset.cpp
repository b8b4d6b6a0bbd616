#include "learn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "learn/error.hpp"
#include "learn/random.hpp"

namespace learn {

namespace fs = std::filesystem;

Layout AnnotatedImage::layout() const {
  Layout l;
  l.prompt = caption;
  for (const auto& r : regions) l.elements.push_back({r.label, r.box});
  return l;
}

nlohmann::json record_to_json(const AnnotatedImage& rec) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : rec.regions) {
    regions.push_back({{"label", r.label}, {"box", {r.box.x, r.box.y, r.box.w, r.box.h}}, {"description", r.description}});
  }
  return {{"id", rec.id}, {"image", rec.image_path}, {"caption", rec.caption}, {"regions", regions}, {"tags", rec.concept_tags}};
}

AnnotatedImage record_from_json(const nlohmann::json& j) {
  AnnotatedImage rec;
  rec.id = j.at("id").get<std::string>();
  rec.image_path = j.at("image").get<std::string>();
  rec.caption = j.at("caption").get<std::string>();
  if (j.contains("tags")) rec.concept_tags = j.at("tags").get<std::vector<std::string>>();
  const auto& regions = j.at("regions");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    const auto raw = r.at("box").get<std::array<double, 4>>();
    RegionAnnotation region;
    region.label = r.at("label").get<std::string>();
    region.description = r.value("description", std::string{});
    try {
      region.box = validate_box(raw);
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidBox, "record '" + rec.id + "' region " + std::to_string(i) + ": " + e.what());
    }
    rec.regions.push_back(std::move(region));
  }
  return rec;
}

fs::path resolve_image_path(const fs::path& manifest, const AnnotatedImage& rec) {
  const fs::path p(rec.image_path);
  if (p.is_absolute()) return p;
  return manifest.parent_path() / p;
}

namespace {

// A dataset directory stands for its manifest.jsonl.
fs::path manifest_path(const fs::path& path) {
  return fs::is_directory(path) ? path / "manifest.jsonl" : path;
}

std::vector<AnnotatedImage> parse_manifest(const fs::path& given) {
  const fs::path path = manifest_path(given);
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open manifest " + path.string());
  std::vector<AnnotatedImage> records;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("schema") && !j.contains("id")) {
      if (j["schema"] != kManifestSchema) {
        throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": unsupported schema");
      }
      continue;
    }
    AnnotatedImage rec;
    try {
      rec = record_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (rec.caption.empty()) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": empty caption");
    }
    if (!ids.insert(rec.id).second) throw Error(ErrorCode::DuplicateId, "id '" + rec.id + "' appears twice");
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace

std::vector<AnnotatedImage> load_manifest(const fs::path& given) {
  const fs::path path = manifest_path(given);
  auto records = parse_manifest(path);
  for (const auto& rec : records) {
    const fs::path img = resolve_image_path(path, rec);
    if (!fs::exists(img)) throw Error(ErrorCode::MissingImage, "record '" + rec.id + "': " + img.string());
    read_png(img);
  }
  return records;
}

std::vector<Sample> load_samples(const fs::path& given) {
  const fs::path path = manifest_path(given);
  std::vector<Sample> samples;
  for (auto& rec : parse_manifest(path)) {
    const fs::path img = resolve_image_path(path, rec);
    if (!fs::exists(img)) throw Error(ErrorCode::MissingImage, "record '" + rec.id + "': " + img.string());
    Image image = read_png(img);
    samples.push_back({std::move(rec), std::move(image)});
  }
  return samples;
}

void write_manifest(const fs::path& path, const std::vector<AnnotatedImage>& records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << nlohmann::json{{"schema", kManifestSchema}}.dump() << '\n';
  for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
}

std::vector<PaletteEntry> default_palette() {
  return {
      {"ball", ShapeKind::Disc, {217, 38, 38}},
      {"block", ShapeKind::Rect, {38, 89, 217}},
      {"ramp", ShapeKind::Triangle, {51, 166, 64}},
      {"magnet", ShapeKind::Rect, {204, 26, 153}},
      {"weight", ShapeKind::Disc, {77, 77, 77}},
      {"lever", ShapeKind::Rect, {230, 153, 26}},
  };
}

namespace {

struct PixelBox {
  int x0, y0, x1, y1;  // half-open
};

bool separated(const PixelBox& a, const PixelBox& b) {
  // At least one empty pixel between the two rectangles.
  return a.x1 < b.x0 || b.x1 < a.x0 || a.y1 < b.y0 || b.y1 < a.y0;
}

bool inside_shape(ShapeKind shape, const PixelBox& r, int x, int y) {
  const double u = x + 0.5;
  const double v = y + 0.5;
  const double w = r.x1 - r.x0;
  const double h = r.y1 - r.y0;
  const double cx = r.x0 + w / 2.0;
  const double cy = r.y0 + h / 2.0;
  switch (shape) {
    case ShapeKind::Rect:
      return true;
    case ShapeKind::Disc: {
      const double dx = (u - cx) / (w / 2.0);
      const double dy = (v - cy) / (h / 2.0);
      return dx * dx + dy * dy <= 1.0;
    }
    case ShapeKind::Triangle: {
      const double t = (v - r.y0) / h;
      return std::abs(u - cx) <= t * w / 2.0;
    }
  }
  return false;
}

double region_center_x(const RegionAnnotation& r) { return r.box.x + r.box.w / 2.0; }
double region_center_y(const RegionAnnotation& r) { return r.box.y + r.box.h / 2.0; }

void sort_left_to_right(std::vector<RegionAnnotation>& regions) {
  std::stable_sort(regions.begin(), regions.end(), [](const RegionAnnotation& a, const RegionAnnotation& b) {
    if (region_center_x(a) != region_center_x(b)) return region_center_x(a) < region_center_x(b);
    if (region_center_y(a) != region_center_y(b)) return region_center_y(a) < region_center_y(b);
    return a.label < b.label;
  });
}

struct Placement {
  const PaletteEntry* entry;
  PixelBox rect;
};

// Paints placements onto a white canvas and returns the regions with their
// exact painted extents. Returns false if some shape painted no pixel.
bool render(const std::vector<Placement>& placements, int size, Image& image, std::vector<RegionAnnotation>& regions) {
  image = Image(size, size, 1.0);
  regions.clear();
  for (const auto& p : placements) {
    int x0 = size, y0 = size, x1 = -1, y1 = -1;
    for (int y = p.rect.y0; y < p.rect.y1; ++y) {
      for (int x = p.rect.x0; x < p.rect.x1; ++x) {
        if (!inside_shape(p.entry->shape, p.rect, x, y)) continue;
        for (int c = 0; c < 3; ++c) image(y, x, c) = p.entry->rgb[c] / 255.0;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
    }
    if (x1 < 0) return false;
    const double s = size;
    regions.push_back({p.entry->label, validate_box(x0 / s, y0 / s, (x1 - x0) / s, (y1 - y0) / s), {}});
  }
  sort_left_to_right(regions);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    regions[i].description = i + 1 < regions.size() ? regions[i].label + " is left of " + regions[i + 1].label
                                                    : regions[i].label + " is rightmost";
  }
  return true;
}

bool fits(const PixelBox& r, const std::vector<Placement>& placed, int size) {
  if (r.x0 < 0 || r.y0 < 0 || r.x1 > size || r.y1 > size) return false;
  return std::all_of(placed.begin(), placed.end(), [&](const Placement& p) { return separated(r, p.rect); });
}

// Random non-touching placements; empty vector when packing failed.
std::vector<Placement> random_layout(const SyntheticSpec& spec, int count, int max_extent, Rng& rng) {
  constexpr int kShapeAttempts = 200;
  std::vector<Placement> placed;
  for (int s = 0; s < count; ++s) {
    const PaletteEntry* entry = &spec.palette[rng.uniform_int(0, static_cast<int>(spec.palette.size()) - 1)];
    bool ok = false;
    for (int attempt = 0; attempt < kShapeAttempts && !ok; ++attempt) {
      const int w = rng.uniform_int(spec.min_extent, max_extent);
      const int h = rng.uniform_int(spec.min_extent, max_extent);
      const int x = rng.uniform_int(0, spec.image_size - w);
      const int y = rng.uniform_int(0, spec.image_size - h);
      const PixelBox r{x, y, x + w, y + h};
      if (fits(r, placed, spec.image_size)) {
        placed.push_back({entry, r});
        ok = true;
      }
    }
    if (!ok) return {};
  }
  return placed;
}

std::vector<Placement> jitter_layout(const SyntheticSpec& spec, const std::vector<Placement>& base, Rng& rng) {
  constexpr int kAttempts = 50;
  const int shift = std::max(1, static_cast<int>(std::lround(0.08 * spec.image_size)));
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<Placement> out;
    bool ok = true;
    for (const auto& p : base) {
      const int w = std::max(spec.min_extent, p.rect.x1 - p.rect.x0 + rng.uniform_int(-1, 1));
      const int h = std::max(spec.min_extent, p.rect.y1 - p.rect.y0 + rng.uniform_int(-1, 1));
      const int x = p.rect.x0 + rng.uniform_int(-shift, shift);
      const int y = p.rect.y0 + rng.uniform_int(-shift, shift);
      const PixelBox r{x, y, x + w, y + h};
      if (!fits(r, out, spec.image_size)) {
        ok = false;
        break;
      }
      out.push_back({p.entry, r});
    }
    if (ok) return out;
  }
  return base;
}

std::string position_words(const RegionAnnotation& r) {
  const double cx = region_center_x(r);
  const double cy = region_center_y(r);
  const char* v = cy < 1.0 / 3.0 ? "top" : (cy < 2.0 / 3.0 ? "middle" : "bottom");
  const char* h = cx < 1.0 / 3.0 ? "left" : (cx < 2.0 / 3.0 ? "center" : "right");
  return std::string(v) + " " + h;
}

std::string record_id(int i) {
  std::ostringstream os;
  os << "rec_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

std::string caption_for_regions(const std::vector<RegionAnnotation>& regions, const std::string& prefix) {
  std::vector<RegionAnnotation> sorted = regions;
  sort_left_to_right(sorted);
  std::string caption = prefix.empty() ? "" : prefix + ": ";
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i) caption += ", ";
    caption += sorted[i].label + " at " + position_words(sorted[i]);
  }
  if (sorted.empty()) caption += "empty canvas";
  return caption;
}

std::vector<Sample> generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.image_size < 8) throw Error(ErrorCode::SpecInvalid, "image_size must be >= 8");
  if (spec.palette.empty()) throw Error(ErrorCode::SpecInvalid, "palette is empty");
  if (spec.num_records < 0) throw Error(ErrorCode::SpecInvalid, "num_records must be >= 0");
  if (spec.min_shapes < 0 || spec.max_shapes < spec.min_shapes) throw Error(ErrorCode::SpecInvalid, "bad shapes_per_image range");
  if (spec.min_extent < 1 || spec.min_extent > spec.image_size / 2) throw Error(ErrorCode::SpecInvalid, "bad min_extent");
  if (spec.num_concepts < 0) throw Error(ErrorCode::SpecInvalid, "num_concepts must be >= 0");
  for (const auto& p : spec.palette) {
    if (p.label.empty()) throw Error(ErrorCode::SpecInvalid, "palette label is empty");
    if (p.rgb == std::array<int, 3>{255, 255, 255}) throw Error(ErrorCode::SpecInvalid, "palette colour is the background");
  }
  constexpr int kRecordAttempts = 50;

  std::vector<std::vector<Placement>> templates;
  for (int k = 0; k < spec.num_concepts; ++k) {
    Rng rng(derive_seed(seed, "concept-template-" + std::to_string(k)));
    std::vector<Placement> t;
    for (int attempt = 0; attempt < kRecordAttempts && t.empty(); ++attempt) {
      const int count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
      const int max_extent = std::max(spec.min_extent, spec.image_size / 3);
      t = random_layout(spec, count, max_extent, rng);
      if (count == 0) break;
    }
    if (t.empty() && spec.max_shapes > 0) throw Error(ErrorCode::SpecInvalid, "cannot pack concept template");
    templates.push_back(std::move(t));
  }

  std::vector<Sample> samples;
  for (int i = 0; i < spec.num_records; ++i) {
    Rng rng(derive_seed(seed, "record-" + std::to_string(i)));
    std::vector<Placement> placements;
    std::string prefix;
    std::vector<std::string> tags;
    if (spec.num_concepts > 0) {
      const int k = i % spec.num_concepts;
      placements = jitter_layout(spec, templates[k], rng);
      prefix = "concept_" + std::to_string(k);
      tags.push_back(prefix);
    } else {
      const int count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
      const int max_extent = std::max(spec.min_extent, spec.image_size / 2);
      for (int attempt = 0; attempt < kRecordAttempts; ++attempt) {
        placements = random_layout(spec, count, max_extent, rng);
        if (!placements.empty() || count == 0) break;
      }
      if (placements.empty() && count > 0) throw Error(ErrorCode::SpecInvalid, "cannot pack shapes into the canvas");
    }
    Sample s;
    if (!render(placements, spec.image_size, s.image, s.record.regions)) {
      throw Error(ErrorCode::SpecInvalid, "a shape rendered no pixels; raise min_extent");
    }
    if (spec.num_concepts == 0) {
      std::vector<std::string> labels;
      for (const auto& r : s.record.regions) labels.push_back(r.label);
      std::sort(labels.begin(), labels.end());
      labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
      std::string tag;
      for (const auto& l : labels) tag += (tag.empty() ? "" : "+") + l;
      tags.push_back(tag.empty() ? "empty" : tag);
    }
    s.record.id = record_id(i);
    s.record.image_path = "images/" + s.record.id + ".png";
    s.record.caption = caption_for_regions(s.record.regions, prefix);
    s.record.concept_tags = std::move(tags);
    samples.push_back(std::move(s));
  }
  return samples;
}

fs::path write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  std::vector<AnnotatedImage> records;
  for (const auto& s : samples) {
    write_png(s.image, dir / s.record.image_path);
    records.push_back(s.record);
  }
  const fs::path manifest = dir / "manifest.jsonl";
  write_manifest(manifest, records);
  return manifest;
}

std::vector<RegionAnnotation> OracleAnnotator::annotate(const Image& image) const {
  const int H = image.height();
  const int W = image.width();
  std::vector<int> label_of(std::size_t(H) * W, -1);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (std::size_t p = 0; p < palette_.size(); ++p) {
        bool match = true;
        for (int c = 0; c < 3; ++c) match = match && std::abs(image(y, x, c) - palette_[p].rgb[c] / 255.0) < 0.5 / 255.0;
        if (match) {
          label_of[std::size_t(y) * W + x] = static_cast<int>(p);
          break;
        }
      }
    }
  }
  std::vector<bool> seen(label_of.size(), false);
  std::vector<RegionAnnotation> regions;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t idx = std::size_t(y) * W + x;
      if (label_of[idx] < 0 || seen[idx]) continue;
      const int lab = label_of[idx];
      int x0 = x, y0 = y, x1 = x + 1, y1 = y + 1;
      std::vector<std::pair<int, int>> stack{{x, y}};
      seen[idx] = true;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        x0 = std::min(x0, cx);
        y0 = std::min(y0, cy);
        x1 = std::max(x1, cx + 1);
        y1 = std::max(y1, cy + 1);
        const int nbr[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
        for (const auto& d : nbr) {
          const int nx = cx + d[0];
          const int ny = cy + d[1];
          if (nx < 0 || ny < 0 || nx >= W || ny >= H) continue;
          const std::size_t n = std::size_t(ny) * W + nx;
          if (seen[n] || label_of[n] != lab) continue;
          seen[n] = true;
          stack.push_back({nx, ny});
        }
      }
      regions.push_back({palette_[lab].label,
                         validate_box(double(x0) / W, double(y0) / H, double(x1 - x0) / W, double(y1 - y0) / H),
                         {}});
    }
  }
  sort_left_to_right(regions);
  return regions;
}

AnnotatorRegistry AnnotatorRegistry::with_builtins() {
  AnnotatorRegistry r;
  r.add("oracle", std::make_shared<OracleAnnotator>());
  r.add("stub", std::make_shared<StubAnnotator>());
  return r;
}

void AnnotatorRegistry::add(std::string name, std::shared_ptr<const Annotator> annotator) {
  annotators_[std::move(name)] = std::move(annotator);
}

const Annotator& AnnotatorRegistry::get(const std::string& name) const {
  const auto it = annotators_.find(name);
  if (it == annotators_.end() || !it->second) {
    throw Error(ErrorCode::AnnotatorUnavailable, "no annotator registered as '" + name + "'");
  }
  return *it->second;
}

std::vector<RegionAnnotation> annotate_image(const Image& image, const AnnotatorRegistry& registry,
                                             const std::string& annotator) {
  return registry.get(annotator).annotate(image);
}

DatasetSplit split_dataset(const std::vector<AnnotatedImage>& records, const std::array<double, 3>& fractions,
                           std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw Error(ErrorCode::BadFractions, "fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::BadFractions, "fractions must sum to 1");

  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const auto& r : records) keyed.emplace_back(mix_seed(seed, stable_hash(r.id)), r.id);
  std::sort(keyed.begin(), keyed.end());

  const std::size_t n = keyed.size();
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    remainder[i] = quota - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < n) {
    const int best = static_cast<int>(std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++sizes[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  while (assigned > n) {
    const int last = sizes[2] ? 2 : (sizes[1] ? 1 : 0);
    --sizes[last];
    --assigned;
  }

  DatasetSplit split;
  split.seed = seed;
  std::size_t at = 0;
  for (std::size_t i = 0; i < sizes[0]; ++i) split.train.push_back(keyed[at++].second);
  for (std::size_t i = 0; i < sizes[1]; ++i) split.val.push_back(keyed[at++].second);
  for (std::size_t i = 0; i < sizes[2]; ++i) split.test.push_back(keyed[at++].second);
  return split;
}

}  // namespace learn
