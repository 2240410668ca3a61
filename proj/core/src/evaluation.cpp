// SPDX-License-Identifier: Apache-2.0
#include "cbn/evaluation.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "cbn/clevr/executor.hpp"
#include "cbn/trainer.hpp"

namespace cbn {

using clevr::Family;

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << v;
  return out.str();
}

}  // namespace

std::string EvalReport::to_json(bool include_lengths) const {
  nlohmann::json j;
  j["n"] = overall.n;
  j["overall"] = overall.accuracy();
  nlohmann::json fam = nlohmann::json::object();
  for (const auto& [f, cell] : families) {
    fam[std::string(clevr::family_name(f))] = {{"n", cell.n}, {"correct", cell.correct}, {"accuracy", cell.accuracy()}};
  }
  j["families"] = fam;
  if (include_lengths) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [len, cell] : by_length) {
      rows.push_back({{"program_length", len}, {"n", cell.n}, {"errors", cell.n - cell.correct}, {"error_rate", cell.error_rate()}});
    }
    j["by_length"] = rows;
  }
  j["warnings"] = warnings;
  return j.dump(2);
}

std::string EvalReport::families_csv() const {
  std::ostringstream out;
  out << "family,n,correct,accuracy\n";
  for (const auto& [f, cell] : families) {
    out << clevr::family_name(f) << ',' << cell.n << ',' << cell.correct << ',' << fmt(cell.accuracy()) << '\n';
  }
  out << "overall," << overall.n << ',' << overall.correct << ',' << fmt(overall.accuracy()) << '\n';
  return out.str();
}

std::string EvalReport::length_csv() const {
  std::ostringstream out;
  out << "program_length,n,errors,error_rate\n";
  for (const auto& [len, cell] : by_length) {
    out << len << ',' << cell.n << ',' << cell.n - cell.correct << ',' << fmt(cell.error_rate()) << '\n';
  }
  return out.str();
}

std::string EvalReport::confusion_csv() const {
  const auto& answers = clevr::answer_list();
  std::ostringstream out;
  out << "true_answer,predicted_answer,count\n";
  for (std::size_t t = 0; t < confusion.size(); ++t) {
    for (std::size_t p = 0; p < confusion[t].size(); ++p) {
      if (confusion[t][p] != 0) out << answers[t] << ',' << answers[p] << ',' << confusion[t][p] << '\n';
    }
  }
  return out.str();
}

EvalReport evaluate_predictions(const clevr::Split& split, std::span<const int> predictions) {
  if (predictions.size() != split.size()) {
    throw ShapeError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(split.size()) + " samples");
  }
  const std::size_t k = clevr::answer_list().size();
  EvalReport r;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split.samples[i];
    const int p = predictions[i];
    if (p < 0 || static_cast<std::size_t>(p) >= k) throw IndexError("prediction " + std::to_string(p) + " is not an answer id");
    const bool ok = p == s.answer;
    for (AccuracyCell* cell : {&r.overall, &r.families[s.family], &r.by_length[s.program.length()]}) {
      ++cell->n;
      cell->correct += ok ? 1 : 0;
    }
    ++r.confusion[static_cast<std::size_t>(s.answer)][static_cast<std::size_t>(p)];
  }
  for (Family f : clevr::kFamilies) {
    if (!r.families.contains(f)) r.warnings.push_back("family " + std::string(clevr::family_name(f)) + " absent from split");
  }
  return r;
}

template <typename T>
std::vector<int> predict_split(Model<T>& model, const clevr::Split& split, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  std::vector<int> out;
  out.reserve(split.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(split, idx);
    std::vector<int> p;
    if constexpr (std::is_same_v<T, float>) {
      p = predict_batch(model, b.images, b.tokens);
    } else {
      std::vector<T> px(b.images.data().begin(), b.images.data().end());
      p = predict_batch(model, Tensor<T>(b.images.shape(), std::move(px)), b.tokens);
    }
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<int> oracle_predictions(const clevr::Split& split) {
  std::vector<int> out;
  out.reserve(split.size());
  for (const auto& s : split.samples) out.push_back(clevr::execute(s.program, s.scene));
  return out;
}

std::map<Family, int> family_prior(const clevr::Split& train) {
  std::map<Family, std::vector<std::size_t>> hist;
  const std::size_t k = clevr::answer_list().size();
  for (const auto& s : train.samples) {
    auto& h = hist[s.family];
    h.resize(k, 0);
    ++h[static_cast<std::size_t>(s.answer)];
  }
  std::map<Family, int> prior;
  for (const auto& [f, h] : hist) prior[f] = static_cast<int>(std::max_element(h.begin(), h.end()) - h.begin());
  return prior;
}

std::vector<int> family_prior_predictions(const std::map<Family, int>& prior, const clevr::Split& split) {
  std::vector<int> out;
  out.reserve(split.size());
  for (const auto& s : split.samples) {
    const auto it = prior.find(s.family);
    if (it == prior.end()) {
      throw ContractError("no prior for family " + std::string(clevr::family_name(s.family)));
    }
    out.push_back(it->second);
  }
  return out;
}

double accuracy(const clevr::Split& split, std::span<const int> predictions) {
  return evaluate_predictions(split, predictions).overall.accuracy();
}

template std::vector<int> predict_split(Model<float>&, const clevr::Split&, std::size_t);
template std::vector<int> predict_split(Model<double>&, const clevr::Split&, std::size_t);

}  // namespace cbn
