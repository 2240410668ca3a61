// SPDX-License-Identifier: Apache-2.0
//
// Flat, dotted-key run configuration for `cbn train`:
//
//   { "preset": "desk", "seed": 7, "train.learning_rate": 0.001,
//     "model.block_channels": 64 }
//
// The preset is applied first, then file keys, then command-line overrides.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cbn/model.hpp"
#include "cbn/trainer.hpp"

namespace cbn::cli {

/// Environment variable naming the default dataset directory.
inline constexpr const char* kDataRootEnv = "CBN_DATA_ROOT";

/// $CBN_DATA_ROOT when set and non-empty, otherwise "data".
std::filesystem::path default_data_root();

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::filesystem::path data;
  std::filesystem::path out;
  std::size_t threads = 1;
  ModelConfig model;
  TrainConfig train;

  /// Defaults for a preset ("desk", "tiny" or "paper"); vocabulary and answer
  /// counts are filled in from the dataset later.
  static RunConfig for_preset(std::string_view preset);

  /// Sets one dotted key. Unknown keys, wrong types and the dataset-derived
  /// fields (model.vocab_size, model.n_answers, model.image_size, model.seed,
  /// train.seed) throw
  /// ConfigError.
  void set(std::string_view key, const nlohmann::json& value);
  /// "key=value"; the value is read as JSON when it parses, else as a string.
  void set_assignment(std::string_view assignment);

  /// Reads a flat JSON object; "preset" is honoured before any other key.
  static RunConfig from_json(const nlohmann::json& flat);
  static RunConfig from_file(const std::filesystem::path& path);

  /// model.seed and train.seed from the root seed.
  void derive_seeds();

  nlohmann::json to_json() const;
};

}  // namespace cbn::cli
