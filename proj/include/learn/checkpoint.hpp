#pragma once

// Binary checkpoint: 8-byte magic "LEARNCK1", little-endian u64 header
// length, JSON header, then little-endian float64 tensor data. The header
// lists {name, rows, cols, offset} per tensor, offsets in bytes from the
// start of the data block, values row-major.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "learn/caption2layout.hpp"
#include "learn/diffusion.hpp"
#include "learn/encoders.hpp"

namespace learn {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Eigen::MatrixXd> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
/// Throws IoError if the file cannot be opened, ParseError if malformed.
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Everything a CLI run needs: encoder settings plus whichever trained
/// models exist.
struct ModelBundle {
  EncoderConfig encoder;
  std::shared_ptr<LayoutDecoderModel> decoder;
  std::shared_ptr<GeneratorModel> generator;
};

Checkpoint bundle_to_checkpoint(const ModelBundle& b);
ModelBundle bundle_from_checkpoint(const Checkpoint& ck);

void save_bundle(const std::filesystem::path& path, const ModelBundle& b);
ModelBundle load_bundle(const std::filesystem::path& path);

}  // namespace learn
