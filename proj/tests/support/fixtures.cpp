// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <unistd.h>

#include <atomic>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "cbn/clevr/language.hpp"

namespace cbn::testing {

const clevr::Dataset& small_dataset() {
  static const clevr::Dataset dataset = [] {
    clevr::DatasetConfig c;
    c.n_train = 400;
    c.n_val = 100;
    c.n_test = 100;
    c.seed = 5;
    c.image_size = 32;
    return clevr::generate_dataset(c);
  }();
  return dataset;
}

ModelConfig tiny_config_for(const clevr::Dataset& dataset) {
  auto c = ModelConfig::tiny(clevr::vocabulary().size(), clevr::answer_list().size());
  c.image_size = dataset.config.image_size;
  return c;
}

ScratchDir::ScratchDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("cbn_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

ScratchDir::~ScratchDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace cbn::testing
