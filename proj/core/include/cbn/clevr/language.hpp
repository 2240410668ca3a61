// SPDX-License-Identifier: Apache-2.0
//
// Templated English for programs, and the closed word vocabulary.
#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbn/clevr/program.hpp"
#include "cbn/error.hpp"

namespace cbn::clevr {

class VocabularyError : public IndexError {
 public:
  using IndexError::IndexError;
};

inline constexpr int kPadId = 0;
inline constexpr std::string_view kPadWord = "<pad>";

/// Every template word, sorted, preceded by the padding token at id 0.
const std::vector<std::string>& vocabulary();

std::vector<int> tokenize(std::span<const std::string> words);
std::vector<std::string> detokenize(std::span<const int> ids);

std::string join_words(std::span<const std::string> words);
std::vector<std::string> split_words(std::string_view sentence);

/// Words for a program produced by the generator's templates:
///   count              how many P are there | how many P are REL the S
///   exist              are there any P [REL the S]
///   query_attribute    what A is the S [REL the S]
///   compare_integer    are there more|fewer P than P | are there as many P as P
///   compare_attribute  is the S the same A as the S | does the S have the same A as the S
/// where P is a plural phrase, S a singular phrase, A an attribute name and
/// REL one of "left of", "right of", "above", "below". Synonyms ("things" or
/// "objects", "big" or "large", ...) are drawn from `rng`.
/// Throws ContractError for program shapes outside these templates.
std::vector<std::string> verbalize(const Program& program, std::mt19937_64& rng);

}  // namespace cbn::clevr
