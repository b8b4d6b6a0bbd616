#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "learn/image.hpp"
#include "learn/layout.hpp"

namespace learn {

struct RegionAnnotation {
  std::string label;
  BoundingBox box;
  std::string description;

  friend bool operator==(const RegionAnnotation&, const RegionAnnotation&) = default;
};

struct AnnotatedImage {
  std::string id;
  std::string image_path;  // as written in the manifest, relative to it
  std::string caption;
  std::vector<RegionAnnotation> regions;
  std::vector<std::string> concept_tags;

  Layout layout() const;

  friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

/// A record together with its decoded pixels.
struct Sample {
  AnnotatedImage record;
  Image image;
};

inline constexpr const char* kManifestSchema = "learn-manifest-v1";

nlohmann::json record_to_json(const AnnotatedImage& rec);
AnnotatedImage record_from_json(const nlohmann::json& j);

/// JSONL manifest, optional {"schema": ...} header line first. Validates ids,
/// boxes and that every image decodes. Errors carry the line number or the
/// record id and region index.
std::vector<AnnotatedImage> load_manifest(const std::filesystem::path& path);
std::vector<Sample> load_samples(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<AnnotatedImage>& records);
std::filesystem::path resolve_image_path(const std::filesystem::path& manifest, const AnnotatedImage& rec);

enum class ShapeKind { Rect, Disc, Triangle };

struct PaletteEntry {
  std::string label;
  ShapeKind shape = ShapeKind::Rect;
  std::array<int, 3> rgb{0, 0, 0};  // 0..255, never pure white
};

std::vector<PaletteEntry> default_palette();

struct SyntheticSpec {
  int num_records = 64;
  int image_size = 32;
  int min_shapes = 1;
  int max_shapes = 3;
  std::vector<PaletteEntry> palette = default_palette();
  /// 0: independent random scenes. K > 0: record i jitters the template of
  /// concept i % K and is tagged "concept_<k>".
  int num_concepts = 0;
  /// Smallest shape side in pixels.
  int min_extent = 4;
};

/// Shapes on a white canvas, never touching (one pixel gap), each region
/// box the exact pixel extent of its shape, regions ordered left to right.
std::vector<Sample> generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Writes images/<id>.png plus manifest.jsonl under `dir`; returns the
/// manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

/// Deterministic caption for a set of regions (listed left to right).
std::string caption_for_regions(const std::vector<RegionAnnotation>& regions, const std::string& prefix = "");

class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::vector<RegionAnnotation> annotate(const Image& image) const = 0;
};

/// Recovers ground truth from synthetic renders by palette colour and
/// 4-connected components.
class OracleAnnotator final : public Annotator {
 public:
  explicit OracleAnnotator(std::vector<PaletteEntry> palette = default_palette()) : palette_(std::move(palette)) {}
  std::vector<RegionAnnotation> annotate(const Image& image) const override;

 private:
  std::vector<PaletteEntry> palette_;
};

/// Placeholder for external segmenter/describer backends; finds nothing.
class StubAnnotator final : public Annotator {
 public:
  std::vector<RegionAnnotation> annotate(const Image&) const override { return {}; }
};

class AnnotatorRegistry {
 public:
  /// Registry pre-populated with "oracle" and "stub".
  static AnnotatorRegistry with_builtins();

  void add(std::string name, std::shared_ptr<const Annotator> annotator);
  const Annotator& get(const std::string& name) const;

 private:
  std::map<std::string, std::shared_ptr<const Annotator>> annotators_;
};

std::vector<RegionAnnotation> annotate_image(const Image& image, const AnnotatorRegistry& registry,
                                             const std::string& annotator);

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

/// Orders ids by a seed-keyed hash (so input order does not matter), then
/// slices contiguously; sizes use largest-remainder rounding.
DatasetSplit split_dataset(const std::vector<AnnotatedImage>& records, const std::array<double, 3>& fractions,
                           std::uint64_t seed);

}  // namespace learn
