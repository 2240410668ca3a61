// SPDX-License-Identifier: Apache-2.0
#include "cbn/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cbn/clevr/executor.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/clevr/render.hpp"
#include "cbn/ops.hpp"
#include "cbn/seed.hpp"

namespace cbn::analysis {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// CBN parameter dump

std::string CbnDump::to_csv() const {
  std::ostringstream out;
  out << "sample_id,layer,family,function,answer";
  for (std::size_t i = 0; i < 2 * channels; ++i) out << ",v" << i;
  out << '\n';
  out.precision(9);
  for (const auto& r : rows) {
    out << r.sample_id << ',' << r.layer << ',' << r.family << ',' << r.function << ',' << r.answer;
    for (double v : r.values) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

CbnDump CbnDump::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ContractError("CBN dump is empty");
  const auto header = split_csv_line(line);
  const std::vector<std::string> required = {"sample_id", "layer", "family", "function", "answer"};
  if (header.size() < required.size() || !std::equal(required.begin(), required.end(), header.begin())) {
    throw ContractError("CBN dump header must start with sample_id,layer,family,function,answer");
  }
  const std::size_t width = header.size() - required.size();
  if (width == 0 || width % 2 != 0) throw ContractError("CBN dump must hold an even, non-zero number of value columns");
  CbnDump dump;
  dump.channels = width / 2;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ContractError("CBN dump line " + std::to_string(line_no) + " has the wrong width");
    CbnRow r;
    try {
      r.sample_id = std::stoull(cells[0]);
      r.layer = std::stoul(cells[1]);
      r.family = cells[2];
      r.function = cells[3];
      r.answer = std::stoi(cells[4]);
      for (std::size_t i = 5; i < cells.size(); ++i) r.values.push_back(std::stod(cells[i]));
    } catch (const std::logic_error&) {
      throw ContractError("CBN dump line " + std::to_string(line_no) + " is not numeric where expected");
    }
    if (r.family.empty() || r.function.empty()) {
      throw ContractError("CBN dump line " + std::to_string(line_no) + " lacks family/function labels");
    }
    dump.layers = std::max(dump.layers, r.layer + 1);
    dump.rows.push_back(std::move(r));
  }
  if (dump.rows.empty()) throw ContractError("CBN dump has no rows");
  return dump;
}

template <typename T>
CbnDump dump_cbn_params(const Model<T>& model, const clevr::Split& split, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "dump"));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(n, order.size()));

  CbnDump dump;
  dump.layers = model.cbn_layer_count();
  dump.channels = model.config.block_channels;
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < order.size(); start += kChunk) {
    const std::size_t end = std::min(order.size(), start + kChunk);
    std::vector<std::vector<int>> questions;
    for (std::size_t i = start; i < end; ++i) questions.push_back(split.samples[order[i]].tokens);
    const auto params = cbn_parameters(model, question_embedding(model, nn::TokenBatch::from(questions)));
    const std::size_t c = dump.channels;
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = split.samples[order[i]];
      for (std::size_t layer = 0; layer < params.size(); ++layer) {
        CbnRow r;
        r.sample_id = s.index;
        r.layer = layer;
        r.family = clevr::family_name(s.family);
        r.function = clevr::op_name(s.program.terminal().op);
        r.answer = s.answer;
        const auto dg = params[layer].first.data().subspan((i - start) * c, c);
        const auto beta = params[layer].second.data().subspan((i - start) * c, c);
        for (T v : dg) r.values.push_back(1.0 + static_cast<double>(v));
        for (T v : beta) r.values.push_back(static_cast<double>(v));
        dump.rows.push_back(std::move(r));
      }
    }
  }
  return dump;
}

template CbnDump dump_cbn_params(const Model<float>&, const clevr::Split&, std::size_t, std::uint64_t);
template CbnDump dump_cbn_params(const Model<double>&, const clevr::Split&, std::size_t, std::uint64_t);

// ---------------------------------------------------------------------------
// Purity

std::vector<double> neighbour_agreement(std::span<const std::vector<double>> vectors, std::span<const int> labels,
                                        std::size_t k) {
  const std::size_t n = vectors.size();
  if (labels.size() != n) throw ShapeError("label_purity: vector and label counts differ");
  if (k == 0) throw DomainError("label_purity needs k >= 1");
  if (n < k + 1) throw DomainError("label_purity needs at least k+1 = " + std::to_string(k + 1) + " points, got " + std::to_string(n));
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) throw DomainError("label_purity needs at least two distinct labels");
  const std::size_t dim = vectors[0].size();
  for (const auto& v : vectors) {
    if (v.size() != dim) throw ShapeError("label_purity: vectors differ in length");
  }
  std::vector<double> out(n);
  std::vector<std::pair<double, std::size_t>> dist(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = vectors[i][t] - vectors[j][t];
        d += diff * diff;
      }
      dist[m++] = {d, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::size_t same = 0;
    for (std::size_t t = 0; t < k; ++t) same += labels[dist[t].second] == labels[i] ? 1 : 0;
    out[i] = static_cast<double>(same) / static_cast<double>(k);
  }
  return out;
}

double label_purity(std::span<const std::vector<double>> vectors, std::span<const int> labels, std::size_t k) {
  const auto a = neighbour_agreement(vectors, labels, k);
  return std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
}

Interval bootstrap_mean(std::span<const double> values, std::size_t resamples, double confidence, std::uint64_t seed) {
  if (values.empty()) throw DomainError("bootstrap of an empty sample");
  if (resamples == 0) throw DomainError("bootstrap needs at least one resample");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - confidence) / 2.0;
  auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::clamp(q * static_cast<double>(resamples - 1), 0.0,
                                                         static_cast<double>(resamples - 1)));
    return means[idx];
  };
  return {at(tail), at(1.0 - tail)};
}

std::string function_group(std::string_view terminal) {
  if (terminal.starts_with("query_")) return "query";
  if (terminal == "equal_integer" || terminal == "less_than" || terminal == "greater_than") return "compare";
  if (terminal.starts_with("equal_")) return "equal";
  if (terminal == "count" || terminal == "exist") return std::string(terminal);
  throw ContractError("unknown terminal function '" + std::string(terminal) + "'");
}

namespace {

std::optional<std::string> processed_attribute(std::string_view terminal) {
  for (std::string_view prefix : {"query_", "equal_"}) {
    if (terminal.starts_with(prefix)) {
      const auto rest = terminal.substr(prefix.size());
      if (rest == "size" || rest == "color" || rest == "material" || rest == "shape") return std::string(rest);
    }
  }
  return std::nullopt;
}

PurityEntry purity_entry(std::size_t layer, std::string labeling, const std::vector<std::vector<double>>& vectors,
                         const std::vector<std::string>& names, std::size_t k, std::size_t resamples,
                         std::uint64_t seed) {
  PurityEntry e;
  e.layer = layer;
  e.labeling = std::move(labeling);
  e.points = vectors.size();
  std::map<std::string, int> ids;
  std::vector<int> labels;
  std::map<int, std::size_t> freq;
  for (const auto& n : names) {
    const int id = ids.emplace(n, static_cast<int>(ids.size())).first->second;
    labels.push_back(id);
    ++freq[id];
  }
  std::size_t top = 0;
  for (const auto& [id, c] : freq) top = std::max(top, c);
  e.majority_share = names.empty() ? 0.0 : static_cast<double>(top) / static_cast<double>(names.size());
  e.degenerate = std::all_of(vectors.begin(), vectors.end(), [&](const auto& v) { return v == vectors.front(); });
  const auto agreement = neighbour_agreement(vectors, labels, k);
  e.purity = std::accumulate(agreement.begin(), agreement.end(), 0.0) / static_cast<double>(agreement.size());
  e.ci = bootstrap_mean(agreement, resamples, 0.95, seed);
  return e;
}

}  // namespace

GroupingReport function_grouping_report(const CbnDump& dump, std::size_t k, std::size_t resamples, std::uint64_t seed) {
  GroupingReport report;
  report.k = k;
  for (std::size_t layer = 0; layer < dump.layers; ++layer) {
    std::vector<std::vector<double>> all_vectors, attr_vectors;
    std::vector<std::string> functions, attributes;
    for (const auto& r : dump.rows) {
      if (r.layer != layer) continue;
      all_vectors.push_back(r.values);
      functions.push_back(function_group(r.function));
      if (auto a = processed_attribute(r.function)) {
        attr_vectors.push_back(r.values);
        attributes.push_back(*a);
      }
    }
    report.entries.push_back(purity_entry(layer, "attribute", attr_vectors, attributes, k, resamples,
                                          derive_seed(seed, "bootstrap", 2 * layer)));
    report.entries.push_back(purity_entry(layer, "function", all_vectors, functions, k, resamples,
                                          derive_seed(seed, "bootstrap", 2 * layer + 1)));
  }
  return report;
}

std::string GroupingReport::to_json() const {
  json j;
  j["k"] = k;
  j["metric"] = "euclidean";
  json rows = json::array();
  std::map<std::pair<std::size_t, std::string>, const PurityEntry*> index;
  std::size_t last = 0;
  for (const auto& e : entries) {
    rows.push_back({{"layer", e.layer},
                    {"labeling", e.labeling},
                    {"points", e.points},
                    {"purity", e.purity},
                    {"ci95", {e.ci.low, e.ci.high}},
                    {"majority_share", e.majority_share},
                    {"degenerate", e.degenerate}});
    index[{e.layer, e.labeling}] = &e;
    last = std::max(last, e.layer);
  }
  j["entries"] = rows;
  auto margin = [&](std::size_t layer) -> json {
    const auto* a = index.at({layer, "attribute"});
    const auto* f = index.at({layer, "function"});
    return {{"attribute_purity", a->purity},
            {"function_purity", f->purity},
            {"attribute_ci95", {a->ci.low, a->ci.high}},
            {"function_ci95", {f->ci.low, f->ci.high}},
            {"attribute_over_majority", a->purity - a->majority_share},
            {"function_over_majority", f->purity - f->majority_share}};
  };
  if (!entries.empty()) {
    j["directional_finding"] = {
        {"first_layer", margin(0)},
        {"last_layer", margin(last)},
        {"note", "reported, not asserted: first layer expected to group by attribute, last layer by function"}};
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Counting errors

double CountErrorProfile::off_by_one_share() const {
  if (numeric_errors == 0) return 0.0;
  const auto it = histogram.find(1);
  return it == histogram.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(numeric_errors);
}

std::map<int, double> CountErrorProfile::shares() const {
  std::map<int, double> out;
  for (const auto& [d, c] : histogram) out[d] = static_cast<double>(c) / static_cast<double>(numeric_errors);
  return out;
}

std::string CountErrorProfile::to_json() const {
  json hist = json::object();
  for (const auto& [d, c] : histogram) hist[std::to_string(d)] = c;
  json j = {{"count_questions", count_questions},
            {"errors", errors},
            {"numeric_errors", numeric_errors},
            {"non_numeric_errors", non_numeric_errors},
            {"histogram", hist},
            {"off_by_one_share", off_by_one_share()},
            {"status", errors == 0 ? "no errors" : "ok"},
            {"reference", {{"off_by_one_share", kReferenceOffByOneShare}, {"note", "annotation only, not asserted"}}}};
  return j.dump(2);
}

std::string CountErrorProfile::to_csv() const {
  std::ostringstream out;
  out << "abs_difference,count,share\n";
  for (const auto& [d, share] : shares()) out << d << ',' << histogram.at(d) << ',' << share << '\n';
  return out.str();
}

CountErrorProfile counting_error_profile(const clevr::Split& split, std::span<const int> predictions) {
  if (predictions.size() != split.size()) throw ShapeError("counting_error_profile: prediction count mismatch");
  CountErrorProfile p;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split.samples[i];
    if (s.family != clevr::Family::count) continue;
    ++p.count_questions;
    if (predictions[i] == s.answer) continue;
    ++p.errors;
    const auto predicted = clevr::count_of_answer(predictions[i]);
    const auto truth = clevr::count_of_answer(s.answer);
    if (predicted && truth) {
      ++p.numeric_errors;
      ++p.histogram[std::abs(*predicted - *truth)];
    } else {
      ++p.non_numeric_errors;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Length sensitivity

std::string LengthErrorTable::to_csv() const {
  std::ostringstream out;
  out << "program_length,n,errors,error_rate\n";
  for (const auto& r : rows) out << r.length << ',' << r.n << ',' << r.errors << ',' << r.error_rate() << '\n';
  return out.str();
}

std::string LengthErrorTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) rows_json.push_back({{"program_length", r.length}, {"n", r.n}, {"errors", r.errors}, {"error_rate", r.error_rate()}});
  json j = {{"rows", rows_json},
            {"short", {{"max_length", kShortProgramLength}, {"n", short_programs.n}, {"error_rate", short_programs.error_rate()}}},
            {"long", {{"min_length", kShortProgramLength + 1}, {"n", long_programs.n}, {"error_rate", long_programs.error_rate()}}},
            {"reference",
             {{"short_error_rate", kReferenceShortErrorRate},
              {"long_error_rate", kReferenceLongErrorRate},
              {"note", "annotation only, not asserted"}}}};
  return j.dump(2);
}

LengthErrorTable error_by_length(const clevr::Split& split, std::span<const int> predictions) {
  if (predictions.size() != split.size()) throw ShapeError("error_by_length: prediction count mismatch");
  std::map<std::size_t, LengthRow> buckets;
  LengthErrorTable t;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t len = split.samples[i].program.length();
    const bool wrong = predictions[i] != split.samples[i].answer;
    for (LengthRow* r : {&buckets[len], len <= kShortProgramLength ? &t.short_programs : &t.long_programs}) {
      ++r->n;
      r->errors += wrong ? 1 : 0;
    }
    buckets[len].length = len;
  }
  for (const auto& [len, r] : buckets) t.rows.push_back(r);
  return t;
}

// ---------------------------------------------------------------------------
// Consistency audit

Answerer oracle_answerer() {
  return [](std::span<const AuditItem> items) {
    std::vector<int> out;
    for (const auto& it : items) out.push_back(clevr::execute(it.program, it.scene));
    return out;
  };
}

Answerer constant_answerer(int answer) {
  return [answer](std::span<const AuditItem> items) { return std::vector<int>(items.size(), answer); };
}

Answerer model_answerer(Model<float>& model, std::size_t batch_size) {
  return [&model, batch_size](std::span<const AuditItem> items) {
    std::vector<int> out;
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
      const std::size_t end = std::min(items.size(), start + batch_size);
      const std::size_t s = model.config.image_size;
      std::vector<float> pixels;
      std::vector<std::vector<int>> questions;
      for (std::size_t i = start; i < end; ++i) {
        pixels.insert(pixels.end(), items[i].image.begin(), items[i].image.end());
        questions.push_back(items[i].tokens);
      }
      const auto p = predict_batch(model, Tensor<float>(Shape{end - start, 3, s, s}, std::move(pixels)),
                                   nn::TokenBatch::from(questions));
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  };
}

namespace {

using Filters = std::vector<std::pair<clevr::Attribute, int>>;

Filters audit_filters(std::mt19937_64& rng, const clevr::Scene& scene) {
  std::vector<clevr::Attribute> attrs(clevr::kAttributes.begin(), clevr::kAttributes.end());
  std::shuffle(attrs.begin(), attrs.end(), rng);
  attrs.resize(static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 2)(rng)));
  std::sort(attrs.begin(), attrs.end());
  const bool anchored = std::bernoulli_distribution(0.6)(rng);
  const auto anchor = std::uniform_int_distribution<std::size_t>(0, scene.objects.size() - 1)(rng);
  Filters out;
  for (auto a : attrs) {
    const int v = anchored ? scene.objects[anchor].value(a)
                           : std::uniform_int_distribution<int>(0, clevr::attribute_cardinality(a) - 1)(rng);
    out.emplace_back(a, v);
  }
  return out;
}

int emit_count(clevr::Program& p, const Filters& f) {
  int head = p.add(clevr::Op::scene);
  for (const auto& [a, v] : f) head = p.add(clevr::filter_op(a), {head}, v);
  return p.add(clevr::Op::count, {head});
}

}  // namespace

ConsistencyReport consistency_audit(const Answerer& answer, std::size_t n_scenes, std::uint64_t seed,
                                    std::size_t image_size, std::size_t max_examples) {
  constexpr std::size_t kPerScene = 5;
  std::vector<AuditItem> items;
  items.reserve(n_scenes * kPerScene);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const clevr::Scene scene = clevr::sample_scene(derive_seed(seed, "audit-scene", i), image_size);
    std::mt19937_64 rng(derive_seed(seed, "audit-question", i));
    Filters a = audit_filters(rng, scene);
    Filters b = audit_filters(rng, scene);
    while (b == a) b = audit_filters(rng, scene);
    std::vector<float> image(3 * image_size * image_size);
    clevr::render_into(scene, image_size, image);

    std::vector<clevr::Program> programs(kPerScene);
    emit_count(programs[0], a);
    emit_count(programs[1], b);
    const clevr::Op comparisons[3] = {clevr::Op::less_than, clevr::Op::equal_integer, clevr::Op::greater_than};
    for (std::size_t c = 0; c < 3; ++c) {
      auto& p = programs[2 + c];
      const int ca = emit_count(p, a);
      const int cb = emit_count(p, b);
      p.add(comparisons[c], {ca, cb});
    }
    for (auto& p : programs) {
      AuditItem item;
      item.scene = scene;
      item.image = image;
      item.words = clevr::verbalize(p, rng);
      item.tokens = clevr::tokenize(item.words);
      item.program = std::move(p);
      items.push_back(std::move(item));
    }
  }
  const auto predicted = answer(items);
  if (predicted.size() != items.size()) throw ContractError("answerer returned the wrong number of answers");

  ConsistencyReport report;
  report.scenes = n_scenes;
  const auto& names = clevr::answer_list();
  const int yes = clevr::answer_of_bool(true);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const std::size_t base = i * kPerScene;
    std::vector<int> truth(kPerScene);
    for (std::size_t q = 0; q < kPerScene; ++q) truth[q] = clevr::execute(items[base + q].program, items[base + q].scene);
    int yes_count = 0;
    for (std::size_t q = 2; q < kPerScene; ++q) yes_count += predicted[base + q] == yes ? 1 : 0;
    if (predicted[base] == truth[0] && predicted[base + 1] == truth[1]) ++report.counts_correct;
    if (std::equal(truth.begin() + 2, truth.end(), predicted.begin() + static_cast<std::ptrdiff_t>(base + 2))) {
      ++report.comparisons_correct;
    }
    if (yes_count == 1) continue;
    ++report.inconsistent;
    if (report.examples.size() < max_examples) {
      AuditExample ex;
      ex.scene = i;
      for (std::size_t q = 0; q < kPerScene; ++q) {
        const int p = predicted[base + q];
        const std::string pred = p >= 0 && static_cast<std::size_t>(p) < names.size() ? names[static_cast<std::size_t>(p)] : "?";
        ex.rows.push_back({clevr::join_words(items[base + q].words), pred, names[static_cast<std::size_t>(truth[q])]});
      }
      report.examples.push_back(std::move(ex));
    }
  }
  return report;
}

std::string ConsistencyReport::to_json() const {
  json ex = json::array();
  for (const auto& e : examples) {
    json rows = json::array();
    for (const auto& r : e.rows) rows.push_back({{"question", r.question}, {"predicted", r.predicted}, {"truth", r.truth}});
    ex.push_back({{"scene", e.scene}, {"rows", rows}});
  }
  json j = {{"scenes", scenes},
            {"inconsistent", inconsistent},
            {"inconsistency_rate", rate()},
            {"counts_correct", counts_correct},
            {"comparisons_correct", comparisons_correct},
            {"examples", ex}};
  return j.dump(2);
}

}  // namespace cbn::analysis
