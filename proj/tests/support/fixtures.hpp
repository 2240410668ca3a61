// SPDX-License-Identifier: Apache-2.0
//
// Shared small datasets and scratch directories for the unit tests.
#pragma once

#include <filesystem>
#include <string>

#include "cbn/clevr/dataset.hpp"
#include "cbn/model.hpp"

namespace cbn::testing {

/// 400 / 100 / 100 samples of 32x32 images, generated once per process.
const clevr::Dataset& small_dataset();

/// Tiny model sized for small_dataset().
ModelConfig tiny_config_for(const clevr::Dataset& dataset);

/// Fresh empty directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag);
  ~ScratchDir();
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Whole file as bytes.
std::string read_file(const std::filesystem::path& path);

}  // namespace cbn::testing
