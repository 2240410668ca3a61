// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cbn/clevr/dataset.hpp"
#include "cbn/model.hpp"

namespace cbn {

struct AccuracyCell {
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
  double error_rate() const { return n == 0 ? 0.0 : 1.0 - accuracy(); }
};

struct EvalReport {
  AccuracyCell overall;
  std::map<clevr::Family, AccuracyCell> families;  // only families present in the split
  std::map<std::size_t, AccuracyCell> by_length;   // keyed by program node count
  std::vector<std::vector<std::size_t>> confusion;  // [true answer][predicted answer]
  std::vector<std::string> warnings;

  /// Families appear under count, exist, compare_integer, query_attribute and
  /// compare_attribute; the length table is included when requested.
  std::string to_json(bool include_lengths) const;
  /// family,n,correct,accuracy (plus an "overall" row).
  std::string families_csv() const;
  /// program_length,n,errors,error_rate.
  std::string length_csv() const;
  /// true_answer,predicted_answer,count for non-zero cells.
  std::string confusion_csv() const;
};

/// Scores answer predictions aligned with the split's samples. Families with
/// no samples are omitted and noted in `warnings`.
EvalReport evaluate_predictions(const clevr::Split& split, std::span<const int> predictions);

/// Eval-mode predictions for every sample, in batches. Does not modify the
/// model (running statistics included).
template <typename T>
std::vector<int> predict_split(Model<T>& model, const clevr::Split& split, std::size_t batch_size = 256);

template <typename T>
EvalReport evaluate(Model<T>& model, const clevr::Split& split, std::size_t batch_size = 256) {
  const auto predictions = predict_split(model, split, batch_size);
  return evaluate_predictions(split, predictions);
}

/// The executor's answers: an upper bound that scores 1.0 everywhere.
std::vector<int> oracle_predictions(const clevr::Split& split);

/// Most frequent training answer per family (ties to the lowest answer id).
std::map<clevr::Family, int> family_prior(const clevr::Split& train);
/// Question-family-prior baseline: answers every question with its family's
/// most frequent training answer.
std::vector<int> family_prior_predictions(const std::map<clevr::Family, int>& prior, const clevr::Split& split);

/// Accuracy of `predictions` against the split's answers.
double accuracy(const clevr::Split& split, std::span<const int> predictions);

}  // namespace cbn
