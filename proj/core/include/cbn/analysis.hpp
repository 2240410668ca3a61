// SPDX-License-Identifier: Apache-2.0
//
// Post-training analyses: structure of the predicted CBN parameters, the
// counting-error profile, error rate by program length and a logical
// consistency audit of count comparisons.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cbn/clevr/dataset.hpp"
#include "cbn/clevr/program.hpp"
#include "cbn/model.hpp"

namespace cbn::analysis {

// ---------------------------------------------------------------------------
// CBN parameter dump

struct CbnRow {
  std::uint64_t sample_id = 0;
  std::size_t layer = 0;  // 0 = first CBN layer
  std::string family;
  std::string function;  // terminal program node, e.g. "query_color"
  int answer = -1;
  std::vector<double> values;  // gamma_hat = 1 + delta_gamma (C values), then beta (C values)
};

struct CbnDump {
  std::size_t layers = 0;
  std::size_t channels = 0;
  std::vector<CbnRow> rows;  // sample-major, layer-minor

  /// sample_id,layer,family,function,answer,v0..v{2C-1}
  std::string to_csv() const;
  /// Throws ContractError when a label column is missing or a row is
  /// malformed.
  static CbnDump from_csv(const std::string& text);
};

/// Parameters for `n` distinct samples drawn with a seeded shuffle (all of
/// them when n exceeds the split). Only the question encoder and the CBN
/// projections run; images are never read.
template <typename T>
CbnDump dump_cbn_params(const Model<T>& model, const clevr::Split& split, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Neighbourhood label purity

/// Fraction of each point's k nearest neighbours (Euclidean, self excluded,
/// distance ties broken by lower index) that share its label.
std::vector<double> neighbour_agreement(std::span<const std::vector<double>> vectors, std::span<const int> labels,
                                        std::size_t k = 10);

/// Mean of neighbour_agreement. Throws DomainError with fewer than k+1
/// points or fewer than two distinct labels.
double label_purity(std::span<const std::vector<double>> vectors, std::span<const int> labels, std::size_t k = 10);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap interval for the mean of `values`.
Interval bootstrap_mean(std::span<const double> values, std::size_t resamples, double confidence, std::uint64_t seed);

struct PurityEntry {
  std::size_t layer = 0;
  std::string labeling;  // "attribute" or "function"
  std::size_t points = 0;
  double purity = 0.0;
  Interval ci;
  double majority_share = 0.0;  // share of the most frequent label
  bool degenerate = false;      // every vector identical
};

struct GroupingReport {
  std::size_t k = 10;
  std::vector<PurityEntry> entries;
  std::string to_json() const;
};

/// High-level function label of a terminal node: query, equal, count, exist
/// or compare (integer comparisons).
std::string function_group(std::string_view terminal);

/// Per-layer purity under two labelings: the attribute a query_* or equal_*
/// question processes (those samples only), and the high-level function of
/// every sample. Also summarizes whether the first layer groups more by
/// attribute and the last more by function, with bootstrap intervals.
GroupingReport function_grouping_report(const CbnDump& dump, std::size_t k = 10, std::size_t resamples = 1000,
                                        std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Counting errors and length sensitivity

inline constexpr double kReferenceOffByOneShare = 0.94;
inline constexpr double kReferenceShortErrorRate = 0.015;
inline constexpr double kReferenceLongErrorRate = 0.055;
inline constexpr std::size_t kShortProgramLength = 10;

struct CountErrorProfile {
  std::size_t count_questions = 0;
  std::size_t errors = 0;
  std::size_t numeric_errors = 0;      // wrong but still a number
  std::size_t non_numeric_errors = 0;  // answered yes/no/attribute to a count question
  std::map<int, std::size_t> histogram;  // |predicted - true| over numeric errors

  /// Share of numeric errors off by exactly one; 0 when there are none.
  double off_by_one_share() const;
  std::map<int, double> shares() const;
  std::string to_json() const;
  /// abs_difference,count,share
  std::string to_csv() const;
};

CountErrorProfile counting_error_profile(const clevr::Split& split, std::span<const int> predictions);

struct LengthRow {
  std::size_t length = 0;
  std::size_t n = 0;
  std::size_t errors = 0;
  double error_rate() const { return n == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(n); }
};

struct LengthErrorTable {
  std::vector<LengthRow> rows;  // ascending length, only non-empty buckets
  LengthRow short_programs;     // length <= kShortProgramLength
  LengthRow long_programs;
  /// program_length,n,errors,error_rate
  std::string to_csv() const;
  std::string to_json() const;
};

LengthErrorTable error_by_length(const clevr::Split& split, std::span<const int> predictions);

// ---------------------------------------------------------------------------
// Consistency audit

struct AuditItem {
  clevr::Scene scene;
  std::vector<float> image;  // [3,S,S]
  clevr::Program program;
  std::vector<std::string> words;
  std::vector<int> tokens;
};

/// Answers a batch of audit questions.
using Answerer = std::function<std::vector<int>(std::span<const AuditItem>)>;

Answerer oracle_answerer();
Answerer constant_answerer(int answer);
/// Eval-mode model predictions; the model must outlive the answerer.
Answerer model_answerer(Model<float>& model, std::size_t batch_size = 256);

struct AuditRow {
  std::string question;
  std::string predicted;
  std::string truth;
};

struct AuditExample {
  std::size_t scene = 0;
  std::vector<AuditRow> rows;  // count A, count B, fewer, as many, more
};

struct ConsistencyReport {
  std::size_t scenes = 0;
  std::size_t inconsistent = 0;
  std::size_t counts_correct = 0;       // scenes whose two count answers are both right
  std::size_t comparisons_correct = 0;  // scenes whose three comparison answers are all right
  std::vector<AuditExample> examples;   // flagged scenes, up to the requested number
  double rate() const { return scenes == 0 ? 0.0 : static_cast<double>(inconsistent) / static_cast<double>(scenes); }
  std::string to_json() const;
};

/// For each of `n_scenes` fresh scenes, asks how many objects match filter
/// chains A and B and whether there are fewer, as many or more A than B.
/// A triple is inconsistent unless exactly one comparison is answered yes.
ConsistencyReport consistency_audit(const Answerer& answer, std::size_t n_scenes, std::uint64_t seed,
                                    std::size_t image_size, std::size_t max_examples = 10);

}  // namespace cbn::analysis
