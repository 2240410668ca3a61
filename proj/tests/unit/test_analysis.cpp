// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "cbn/analysis.hpp"
#include "cbn/clevr/executor.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/evaluation.hpp"
#include "fixtures.hpp"

namespace cbn::analysis {
namespace {

using testing::small_dataset;

std::vector<std::vector<double>> clusters(std::mt19937_64& rng, std::size_t per_cluster, std::vector<int>& labels) {
  std::normal_distribution<double> noise(0.0, 0.1);
  std::vector<std::vector<double>> points;
  labels.clear();
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < per_cluster; ++i) {
      points.push_back({100.0 * c + noise(rng), -50.0 * c + noise(rng), noise(rng)});
      labels.push_back(c);
    }
  }
  return points;
}

double brute_force_purity(const std::vector<std::vector<double>>& v, const std::vector<int>& labels, std::size_t k) {
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (j != i) others.push_back(j);
    }
    auto dist = [&](std::size_t j) {
      double s = 0.0;
      for (std::size_t d = 0; d < v[i].size(); ++d) s += (v[i][d] - v[j][d]) * (v[i][d] - v[j][d]);
      return s;
    };
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
    std::size_t same = 0;
    for (std::size_t n = 0; n < k; ++n) same += labels[others[n]] == labels[i];
    total += static_cast<double>(same) / static_cast<double>(k);
  }
  return total / static_cast<double>(v.size());
}

TEST(Purity, SeparatedClustersArePure) {
  std::mt19937_64 rng(1);
  std::vector<int> labels;
  const auto points = clusters(rng, 20, labels);
  EXPECT_EQ(label_purity(points, labels, 10), 1.0);
}

TEST(Purity, ShuffledLabelsApproachSumOfSquaredShares) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> points(3000, std::vector<double>(4));
  for (auto& p : points) for (auto& x : p) x = u(rng);
  std::vector<int> labels(points.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 10 < 5 ? 0 : (i % 10 < 8 ? 1 : 2);
  std::shuffle(labels.begin(), labels.end(), rng);
  const double expected = 0.5 * 0.5 + 0.3 * 0.3 + 0.2 * 0.2;
  EXPECT_NEAR(label_purity(points, labels, 10), expected, 0.02);
}

TEST(Purity, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 3);
  std::vector<std::vector<double>> points(60, std::vector<double>(2));
  std::vector<int> labels(60);
  for (std::size_t i = 0; i < 60; ++i) {
    points[i] = {static_cast<double>(coarse(rng)), static_cast<double>(coarse(rng))};
    labels[i] = coarse(rng) % 3;
  }
  for (std::size_t k : {1u, 5u, 10u}) EXPECT_NEAR(label_purity(points, labels, k), brute_force_purity(points, labels, k), 1e-12);
}

TEST(Purity, RepeatedPointUsesIndexTieRule) {
  const std::vector<std::vector<double>> points(5, std::vector<double>{1.0, 2.0});
  const std::vector<int> labels = {0, 0, 1, 1, 1};
  const auto agreement = neighbour_agreement(points, labels, 2);
  EXPECT_EQ(agreement, (std::vector<double>{0.5, 0.5, 0.0, 0.0, 0.0}));
  EXPECT_DOUBLE_EQ(label_purity(points, labels, 2), 0.2);
}

TEST(Purity, InvariantToScaleAndPointOrder) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> points(80, std::vector<double>(5));
  std::vector<int> labels(80);
  for (std::size_t i = 0; i < 80; ++i) {
    for (auto& x : points[i]) x = g(rng) + (i % 4 == 0 ? 1.5 : 0.0);
    labels[i] = static_cast<int>(i % 4 == 0);
  }
  const double base = label_purity(points, labels, 10);
  auto scaled = points;
  for (auto& p : scaled) for (auto& x : p) x *= 8.0;
  EXPECT_NEAR(label_purity(scaled, labels, 10), base, 1e-12);
  std::vector<std::size_t> perm(80);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<double>> pp;
  std::vector<int> pl;
  for (auto i : perm) {
    pp.push_back(points[i]);
    pl.push_back(labels[i]);
  }
  EXPECT_NEAR(label_purity(pp, pl, 10), base, 1e-12);
}

TEST(Purity, Errors) {
  const std::vector<std::vector<double>> points = {{0.0}, {1.0}, {2.0}};
  EXPECT_THROW(label_purity(points, std::vector<int>{0, 1, 0}, 3), DomainError);
  EXPECT_THROW(label_purity(points, std::vector<int>{0, 0, 0}, 1), DomainError);
  EXPECT_THROW(label_purity(points, std::vector<int>{0, 1}, 1), ShapeError);
  EXPECT_THROW(label_purity(points, std::vector<int>{0, 1, 0}, 0), DomainError);
}

TEST(Bootstrap, IntervalBracketsMeanAndIsSeeded) {
  std::vector<double> values(200);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(i % 7);
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / 200.0;
  const auto a = bootstrap_mean(values, 1000, 0.95, 5);
  const auto b = bootstrap_mean(values, 1000, 0.95, 5);
  EXPECT_LT(a.low, mean);
  EXPECT_GT(a.high, mean);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  const std::vector<double> constant(50, 0.25);
  const auto c = bootstrap_mean(constant, 100, 0.95, 1);
  EXPECT_EQ(c.low, 0.25);
  EXPECT_EQ(c.high, 0.25);
}

TEST(FunctionGroup, Mapping) {
  EXPECT_EQ(function_group("query_color"), "query");
  EXPECT_EQ(function_group("equal_shape"), "equal");
  EXPECT_EQ(function_group("equal_integer"), "compare");
  EXPECT_EQ(function_group("less_than"), "compare");
  EXPECT_EQ(function_group("greater_than"), "compare");
  EXPECT_EQ(function_group("count"), "count");
  EXPECT_EQ(function_group("exist"), "exist");
}

TEST(CbnDump, IdenticalQuestionsGiveIdenticalRows) {
  auto split = small_dataset().val;
  split.samples[1].tokens = split.samples[0].tokens;
  auto m = init_model<float>(testing::tiny_config_for(small_dataset()), 3);
  const auto dump = dump_cbn_params(m, split, split.size(), 1);
  EXPECT_EQ(dump.layers, 2u);
  EXPECT_EQ(dump.channels, m.config.block_channels);
  EXPECT_EQ(dump.rows.size(), 2 * split.size());
  std::map<std::pair<std::uint64_t, std::size_t>, const CbnRow*> by_id;
  for (const auto& r : dump.rows) {
    EXPECT_EQ(r.values.size(), 2 * dump.channels);
    by_id[{r.sample_id, r.layer}] = &r;
  }
  for (std::size_t layer = 0; layer < 2; ++layer) {
    EXPECT_EQ(by_id.at({split.samples[0].index, layer})->values, by_id.at({split.samples[1].index, layer})->values);
    EXPECT_NE(by_id.at({split.samples[0].index, layer})->values, by_id.at({split.samples[2].index, layer})->values);
  }
  const auto& s = split.samples[4];
  const auto* row = by_id.at({s.index, 0});
  EXPECT_EQ(row->answer, s.answer);
  EXPECT_EQ(row->function, clevr::op_name(s.program.terminal().op));
  EXPECT_EQ(row->family, clevr::family_name(s.family));
}

TEST(CbnDump, ZeroInitializedProjectionsGiveUnitGamma) {
  auto m = init_model<float>(testing::tiny_config_for(small_dataset()), 3);
  for (auto& b : m.blocks) {
    for (auto* l : {&b.cbn1, &b.cbn2}) {
      for (auto& v : l->projection.weight.data()) v = 0.0f;
    }
  }
  const auto dump = dump_cbn_params(m, small_dataset().val, 20, 2);
  for (const auto& r : dump.rows) {
    for (std::size_t c = 0; c < dump.channels; ++c) EXPECT_EQ(r.values[c], 1.0);
    for (std::size_t c = dump.channels; c < 2 * dump.channels; ++c) EXPECT_EQ(r.values[c], 0.0);
  }
  const auto report = function_grouping_report(dump, 5, 50, 1);
  for (const auto& e : report.entries) EXPECT_TRUE(e.degenerate);
}

TEST(CbnDump, SampleSelectionIsSeededAndDistinct) {
  auto m = init_model<float>(testing::tiny_config_for(small_dataset()), 3);
  const auto& split = small_dataset().val;
  const auto a = dump_cbn_params(m, split, 30, 7);
  const auto b = dump_cbn_params(m, split, 30, 7);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  std::set<std::uint64_t> ids;
  for (const auto& r : a.rows) ids.insert(r.sample_id);
  EXPECT_EQ(ids.size(), 30u);
  EXPECT_EQ(dump_cbn_params(m, split, 1000, 7).rows.size(), 2 * split.size());
}

TEST(CbnDump, CsvRoundTripAndErrors) {
  auto m = init_model<float>(testing::tiny_config_for(small_dataset()), 3);
  const auto dump = dump_cbn_params(m, small_dataset().val, 12, 7);
  const auto csv = dump.to_csv();
  EXPECT_TRUE(csv.starts_with("sample_id,layer,family,function,answer,v0,")) << csv.substr(0, 80);
  const auto back = CbnDump::from_csv(csv);
  EXPECT_EQ(back.rows.size(), dump.rows.size());
  EXPECT_EQ(back.channels, dump.channels);
  EXPECT_EQ(back.to_csv(), csv);
  std::string no_labels = csv;
  no_labels.replace(0, std::string("sample_id,layer,family,").size(), "sample_id,layer,");
  EXPECT_THROW(CbnDump::from_csv(no_labels), ContractError);
  EXPECT_THROW(CbnDump::from_csv(csv + "1,0,count,count,3\n"), ContractError);
  EXPECT_THROW(CbnDump::from_csv(""), ContractError);
}

TEST(GroupingReport, SyntheticLayersGroupAsConstructed) {
  CbnDump dump;
  dump.layers = 2;
  dump.channels = 2;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  const std::vector<std::string> functions = {"query_color", "query_shape", "equal_color", "equal_shape"};
  for (std::uint64_t id = 0; id < 200; ++id) {
    const std::string& f = functions[id % 4];
    const bool color = f.ends_with("color");
    const bool query = f.starts_with("query");
    for (std::size_t layer = 0; layer < 2; ++layer) {
      CbnRow r;
      r.sample_id = id;
      r.layer = layer;
      r.family = query ? "query_attribute" : "compare_attribute";
      r.function = f;
      r.answer = 0;
      const double key = layer == 0 ? (color ? 0.0 : 10.0) : (query ? 0.0 : 10.0);
      r.values = {key + noise(rng), noise(rng), noise(rng), noise(rng)};
      dump.rows.push_back(r);
    }
  }
  const auto report = function_grouping_report(dump, 10, 200, 3);
  std::map<std::pair<std::size_t, std::string>, PurityEntry> e;
  for (const auto& x : report.entries) e[{x.layer, x.labeling}] = x;
  EXPECT_EQ(e.at({0, "attribute"}).purity, 1.0);
  EXPECT_EQ(e.at({1, "function"}).purity, 1.0);
  EXPECT_LT(e.at({0, "function"}).purity, 0.7);
  EXPECT_LT(e.at({1, "attribute"}).purity, 0.7);
  EXPECT_DOUBLE_EQ(e.at({0, "attribute"}).majority_share, 0.5);
  EXPECT_FALSE(e.at({0, "attribute"}).degenerate);
  const auto j = nlohmann::json::parse(report.to_json());
  EXPECT_EQ(j.at("entries").size(), 4u);
  EXPECT_EQ(j.at("k"), 10);
}

std::vector<int> off_by_one(const clevr::Split& split) {
  std::vector<int> p;
  for (const auto& s : split.samples) {
    const auto c = clevr::count_of_answer(s.answer);
    p.push_back(c ? clevr::answer_of_count(*c == clevr::kMaxCount ? *c - 1 : *c + 1) : s.answer);
  }
  return p;
}

TEST(CountErrors, OffByOnePredictionsGiveFullShare) {
  const auto& split = small_dataset().val;
  const auto profile = counting_error_profile(split, off_by_one(split));
  EXPECT_GT(profile.errors, 0u);
  EXPECT_EQ(profile.non_numeric_errors, 0u);
  EXPECT_EQ(profile.off_by_one_share(), 1.0);
  EXPECT_EQ(profile.histogram.size(), 1u);
  const auto csv = profile.to_csv();
  EXPECT_TRUE(csv.starts_with("abs_difference,count,share\n1,")) << csv;
}

TEST(CountErrors, PerfectPredictionsGiveEmptyProfile) {
  const auto& split = small_dataset().val;
  const auto profile = counting_error_profile(split, oracle_predictions(split));
  EXPECT_EQ(profile.errors, 0u);
  EXPECT_TRUE(profile.histogram.empty());
  EXPECT_EQ(profile.off_by_one_share(), 0.0);
  const auto j = nlohmann::json::parse(profile.to_json());
  EXPECT_EQ(j.at("status"), "no errors");
  EXPECT_EQ(j.at("reference").at("off_by_one_share"), kReferenceOffByOneShare);
}

TEST(CountErrors, NonNumericAnswersAreSeparated) {
  const auto& split = small_dataset().val;
  std::vector<int> yes(split.size(), clevr::answer_index("yes"));
  std::size_t counts = 0;
  for (const auto& s : split.samples) counts += s.family == clevr::Family::count;
  const auto profile = counting_error_profile(split, yes);
  EXPECT_EQ(profile.count_questions, counts);
  EXPECT_EQ(profile.non_numeric_errors, counts);
  EXPECT_EQ(profile.numeric_errors, 0u);
}

TEST(LengthErrors, MatchesDirectTally) {
  const auto& split = small_dataset().val;
  auto predictions = oracle_predictions(split);
  for (std::size_t i = 0; i < predictions.size(); i += 4) predictions[i] = (predictions[i] + 1) % 22;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;
  std::size_t short_n = 0, short_err = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto len = split.samples[i].program.length();
    const bool wrong = predictions[i] != split.samples[i].answer;
    ++tally[len].first;
    tally[len].second += wrong;
    if (len <= kShortProgramLength) {
      ++short_n;
      short_err += wrong;
    }
  }
  const auto table = error_by_length(split, predictions);
  ASSERT_EQ(table.rows.size(), tally.size());
  std::size_t i = 0;
  for (const auto& [len, ne] : tally) {
    EXPECT_EQ(table.rows[i].length, len);
    EXPECT_EQ(table.rows[i].n, ne.first);
    EXPECT_EQ(table.rows[i].errors, ne.second);
    ++i;
  }
  EXPECT_EQ(table.short_programs.n, short_n);
  EXPECT_EQ(table.short_programs.errors, short_err);
  EXPECT_EQ(table.short_programs.n + table.long_programs.n, split.size());
  EXPECT_TRUE(table.to_csv().starts_with("program_length,n,errors,error_rate\n"));
  const auto j = nlohmann::json::parse(table.to_json());
  EXPECT_EQ(j.at("reference").at("short_error_rate"), kReferenceShortErrorRate);
  EXPECT_EQ(j.at("reference").at("long_error_rate"), kReferenceLongErrorRate);
}

TEST(Audit, OracleIsAlwaysConsistent) {
  const auto r = consistency_audit(oracle_answerer(), 500, 1, 32);
  EXPECT_EQ(r.scenes, 500u);
  EXPECT_EQ(r.inconsistent, 0u);
  EXPECT_EQ(r.counts_correct, 500u);
  EXPECT_EQ(r.comparisons_correct, 500u);
  EXPECT_TRUE(r.examples.empty());
}

TEST(Audit, ConstantAnswersAreAlwaysInconsistent) {
  const auto no = consistency_audit(constant_answerer(clevr::answer_index("no")), 100, 2, 32, 3);
  EXPECT_EQ(no.rate(), 1.0);
  EXPECT_EQ(no.examples.size(), 3u);
  EXPECT_EQ(no.examples[0].rows.size(), 5u);
  const auto yes = consistency_audit(constant_answerer(clevr::answer_index("yes")), 100, 2, 32);
  EXPECT_EQ(yes.rate(), 1.0);
  EXPECT_EQ(nlohmann::json::parse(no.to_json()).at("inconsistency_rate"), 1.0);
}

TEST(Audit, QuestionsAreWellFormedAndSeeded) {
  std::vector<AuditItem> seen;
  auto recorder = [&](std::span<const AuditItem> items) {
    seen.insert(seen.end(), items.begin(), items.end());
    return oracle_answerer()(items);
  };
  consistency_audit(recorder, 20, 4, 32);
  ASSERT_EQ(seen.size(), 100u);
  for (const auto& item : seen) {
    EXPECT_NO_THROW(clevr::type_check(item.program));
    EXPECT_EQ(clevr::tokenize(item.words), item.tokens);
    EXPECT_EQ(item.image.size(), 3u * 32 * 32);
  }
  std::vector<AuditItem> again;
  auto recorder2 = [&](std::span<const AuditItem> items) {
    again.insert(again.end(), items.begin(), items.end());
    return oracle_answerer()(items);
  };
  consistency_audit(recorder2, 20, 4, 32);
  ASSERT_EQ(again.size(), seen.size());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i].words, again[i].words);
}

}  // namespace
}  // namespace cbn::analysis
