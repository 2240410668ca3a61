// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "CBNR"                      magic
//   u16                         format version
//   u32 + bytes                 UTF-8 JSON header (model config, step, epoch)
//   u32                         tensor count
//   per tensor:
//     u32 + bytes               name
//     u8                        dtype code (0 = f32, 1 = f64)
//     u8                        rank
//     rank x u32                extents
//     raw payload               numel values, little-endian
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cbn/error.hpp"
#include "cbn/model.hpp"

namespace cbn {

inline constexpr char kCheckpointMagic[4] = {'C', 'B', 'N', 'R'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public ArtifactError {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, unknown_tensor, missing_tensor, shape_mismatch, bad_header };

  CheckpointError(Kind kind, const std::string& what) : ArtifactError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// One tensor as stored on disk. Values are widened to double in memory;
/// f32 payloads round-trip exactly.
struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointFile {
  std::string header_json;
  std::vector<StoredTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

/// Optimizer progress stored alongside the weights.
template <typename T>
struct TrainingState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::map<std::string, std::vector<T>> first_moment;   // keyed by parameter name
  std::map<std::string, std::vector<T>> second_moment;
};

template <typename T>
CheckpointFile make_checkpoint(const Model<T>& model, const TrainingState<T>* state = nullptr);

/// Rebuilds a model from a decoded checkpoint. Every parameter and running
/// statistic must be present with the configured shape; any other tensor
/// name is rejected.
template <typename T>
Model<T> restore_checkpoint(const CheckpointFile& file, TrainingState<T>* state = nullptr);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     const TrainingState<T>* state = nullptr);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, TrainingState<T>* state = nullptr);

}  // namespace cbn
