// SPDX-License-Identifier: Apache-2.0
//
// On-disk layout of a generated dataset directory:
//   manifest.json     counts, seed, image size, answers, vocabulary
//   images.bin        per split (train, val, test): u32 image count, then
//                     that many records of 3*S*S little-endian f32
//   questions.jsonl   one JSON record per sample, splits in the same order;
//                     image_index selects the record within the split
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbn/clevr/program.hpp"
#include "cbn/clevr/scene.hpp"
#include "cbn/error.hpp"

namespace cbn::clevr {

/// The output directory already holds files and overwriting was not requested.
class OutputExistsError : public IoError {
 public:
  using IoError::IoError;
};

struct DatasetConfig {
  std::size_t n_train = 20000;
  std::size_t n_val = 2000;
  std::size_t n_test = 2000;
  std::uint64_t seed = 0;
  std::size_t image_size = 48;
  /// Consecutive questions of a split that share one scene and image.
  std::size_t questions_per_scene = 5;

  /// Throws ConfigError on empty splits, images smaller than 32 pixels or
  /// zero questions per scene.
  void validate() const;
};

enum class SplitName { train, val, test };
std::string_view split_name(SplitName split);
SplitName split_from_name(std::string_view name);

struct Sample {
  std::uint64_t index = 0;  // global index across splits
  Family family = Family::count;
  std::vector<int> tokens;
  int answer = -1;
  Program program;
  std::size_t image_index = 0;  // row in the split's image block
  Scene scene;
};

struct Split {
  SplitName name = SplitName::train;
  std::size_t image_size = 0;
  std::vector<Sample> samples;
  std::vector<float> pixels;  // image_count() x 3 x S x S

  std::size_t size() const { return samples.size(); }
  std::size_t image_numel() const { return 3 * image_size * image_size; }
  std::size_t image_count() const { return image_size == 0 ? 0 : pixels.size() / image_numel(); }
  std::span<const float> image(std::size_t i) const;
};

struct Dataset {
  DatasetConfig config;
  Split train;
  Split val;
  Split test;

  const Split& split(SplitName name) const;
};

/// Global index of the first sample of a split; splits occupy disjoint,
/// consecutive index ranges.
std::uint64_t split_offset(const DatasetConfig& config, SplitName split);

/// Number of scenes (and stored images) in a split.
std::size_t split_scene_count(const DatasetConfig& config, SplitName split);

/// Global index of the first scene of a split; scene ranges are disjoint too,
/// so splits never share a scene seed.
std::uint64_t split_scene_offset(const DatasetConfig& config, SplitName split);

/// In-memory generation. Scenes are independent, so `threads` workers fill
/// disjoint slots and the result does not depend on the thread count.
Split generate_split(const DatasetConfig& config, SplitName split, std::size_t threads = 1);
Dataset generate_dataset(const DatasetConfig& config, std::size_t threads = 1);

std::string manifest_json(const DatasetConfig& config);

/// Writes the three files. An existing non-empty directory is refused with
/// OutputExistsError unless `force` is set.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir, bool force = false);

/// generate_dataset followed by write_dataset; returns the manifest JSON.
std::string build_dataset(const DatasetConfig& config, const std::filesystem::path& dir, bool force = false,
                          std::size_t threads = 1);

/// Throws IoError for missing files and ArtifactError for malformed ones.
Dataset load_dataset(const std::filesystem::path& dir);

/// Number of samples whose stored answer disagrees with executing the stored
/// program on the stored scene, whose scene differs from the one regenerated
/// from its seed, or whose family disagrees with the program terminal.
std::size_t verify_dataset(const Dataset& dataset);

}  // namespace cbn::clevr
