// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used only by the tests. They are written
// independently of the library code they check.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cbn/clevr/program.hpp"
#include "cbn/clevr/scene.hpp"
#include "cbn/tensor.hpp"

namespace cbn::testing {

/// Quadruple-loop cross-correlation, input [N,C,H,W], kernel [O,C,kh,kw].
std::vector<double> naive_conv2d(const std::vector<double>& input, const Shape& in_shape,
                                 const std::vector<double>& kernel, const Shape& k_shape, std::size_t stride,
                                 std::size_t pad);

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<leaf>[<index>] analytic=... numeric=..."
};

/// Central differences (step h) of a scalar loss against every element of
/// every leaf. Relative error is |a - n| / max(|a| + |n|, floor).
GradCheckResult grad_check(std::vector<Tensor<double>> leaves,
                           const std::function<Tensor<double>()>& loss, double h = 1e-5, double floor = 1e-6);

/// Uniform(-1, 1) tensor.
Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0);

/// Answer of a program on a scene by direct enumeration over the objects;
/// nullopt when an object reference is not exactly one object.
std::optional<int> brute_force_answer(const clevr::Program& program, const clevr::Scene& scene);

/// A random, type-correct program of the given family that need not be
/// answerable (references may fail to resolve).
clevr::Program random_program(std::mt19937_64& rng, clevr::Family family);

/// Inverse of the question templates: recovers the program from its words.
/// Throws std::runtime_error on a sentence outside the templates.
clevr::Program parse_question(const std::vector<std::string>& words);

/// Random valid scene built by hand for executor tests (no placement rules).
clevr::Scene random_layout(std::mt19937_64& rng, std::size_t objects);

}  // namespace cbn::testing
