#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "condense/geometry.hpp"
#include "condense/losses.hpp"
#include "condense/model.hpp"
#include "condense/train.hpp"

namespace condense {

/// Everything a `train` or `analyze` invocation needs. Paths are kept as
/// given; the output root environment variable is applied at launch.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TraceSampling traces;
  std::string corpus;
  std::string output_dir = "out";
  std::string init_checkpoint;
  std::size_t bins = kDefaultBins;

  void validate() const;
};

inline constexpr const char* kOutputRootEnv = "CONDENSE_OUTPUT_ROOT";

/// output_dir, prefixed by $CONDENSE_OUTPUT_ROOT when that is set and the directory is relative.
std::filesystem::path resolve_output_dir(const std::string& output_dir);

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);  // without the loss block
nlohmann::ordered_json to_json(const LossConfig& c);
nlohmann::ordered_json to_json(const TraceSampling& c);
nlohmann::ordered_json to_json(const RunConfig& c);

/// Strict parsers: unknown keys and type mismatches raise ConfigError;
/// missing keys keep the defaults of `base`.
ModelConfig model_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_from_json(const nlohmann::json& j, TrainConfig base = {});
LossConfig loss_from_json(const nlohmann::json& j, LossConfig base = {});
TraceSampling traces_from_json(const nlohmann::json& j, TraceSampling base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace condense
