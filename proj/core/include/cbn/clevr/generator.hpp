// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cbn/clevr/program.hpp"
#include "cbn/clevr/scene.hpp"

namespace cbn::clevr {

inline constexpr int kProgramDraws = 200;
/// Answer targets tried per question before any valid program is accepted.
inline constexpr int kBalancedTargetDraws = 6;

/// Draws programs of `family` for `scene` until one is valid (every unique
/// resolves to one object, compared objects differ, compared chains differ)
/// and, when `target_answer` is set, produces that answer. Returns nullopt
/// after kProgramDraws draws, signalling that the scene should be resampled.
///
/// Filter chains hold one to three filters in canonical attribute order;
/// count, exist and query chains carry an optional single relate hop.
/// Queried or compared attributes never appear among their chain's filters.
std::optional<Program> sample_program(std::mt19937_64& rng, const Scene& scene, Family family,
                                      std::optional<int> target_answer = std::nullopt);

struct GeneratedSample {
  Scene scene;
  Program program;
  Family family = Family::count;
  int answer = -1;
  std::vector<std::string> words;
  std::vector<int> tokens;
};

/// Family of the sample at a global index: families cycle in a fixed order.
Family family_for_index(std::uint64_t global_index);

/// Questions at global indices [first_question, first_question + count),
/// all about one scene; a pure function of (root seed, scene index, first
/// question, count, image size). Each question draws a target answer uniformly
/// from its family's answers (for queries: attribute first, then value) and
/// redraws it up to kBalancedTargetDraws times when the scene cannot produce
/// it, then accepts any valid program. A scene on which some question has no
/// valid program at all is replaced by the next scene attempt.
std::vector<GeneratedSample> generate_scene_questions(std::uint64_t root_seed, std::uint64_t scene_index,
                                                      std::uint64_t first_question, std::size_t count,
                                                      std::size_t image_size);

/// A single question with a scene of its own.
GeneratedSample generate_sample(std::uint64_t root_seed, std::uint64_t global_index, std::size_t image_size);

}  // namespace cbn::clevr
