#pragma once

// Flat dotted-key run configuration. Defaults come from the library
// structs; a JSON file (nested objects flatten to dotted keys) and then
// command-line overrides are merged on top. Unknown keys and type
// mismatches are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "learn/caption2layout.hpp"
#include "learn/diffusion.hpp"
#include "learn/encoders.hpp"
#include "learn/losses.hpp"

namespace learn {

class RunConfig {
 public:
  static RunConfig defaults();

  /// Flattens `j` and merges it; `source` names the origin in errors.
  void merge(const nlohmann::json& j, const std::string& source);
  void merge_file(const std::filesystem::path& path);
  /// `assignment` is key=value; value parsed as JSON, else taken as a string.
  void set(const std::string& assignment);
  void set(const std::string& key, const nlohmann::json& value, const std::string& source = "flag");

  const nlohmann::json& at(const std::string& key) const;
  template <typename T>
  T get(const std::string& key) const {
    return at(key).get<T>();
  }

  /// Sorted flat object of every key.
  const nlohmann::json& values() const { return values_; }
  /// 16-hex-digit FNV-1a of the canonical dump.
  std::string hash() const;
  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }

  /// Builds every typed config once, so bad values surface before a run.
  void validate() const;

 private:
  nlohmann::json values_ = nlohmann::json::object();
};

EncoderConfig encoder_config(const RunConfig& rc);
LossConfig loss_config(const RunConfig& rc);
LayoutDecoderConfig decoder_config(const RunConfig& rc);
LayoutLossWeights layout_loss_weights(const RunConfig& rc);
OptimizerConfig layout_optimizer_config(const RunConfig& rc);
DiffusionConfig diffusion_config(const RunConfig& rc);
DiffusionTrainConfig diffusion_train_config(const RunConfig& rc);

}  // namespace learn
