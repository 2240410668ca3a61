// SPDX-License-Identifier: Apache-2.0
#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

#include "cbn/clevr/language.hpp"
#include "cbn/clevr/program.hpp"
#include "cbn/error.hpp"
#include "cbn/seed.hpp"

namespace cbn::cli {

using json = nlohmann::json;

std::filesystem::path default_data_root() {
  const char* env = std::getenv(kDataRootEnv);
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("data");
}

RunConfig RunConfig::for_preset(std::string_view preset) {
  RunConfig c;
  c.preset = std::string(preset);
  const std::size_t vocab = clevr::vocabulary().size();
  const std::size_t answers = clevr::answer_list().size();
  if (preset == "desk") {
    c.model = ModelConfig::desk(vocab, answers);
  } else if (preset == "tiny") {
    c.model = ModelConfig::tiny(vocab, answers);
    c.train.max_epochs = 2;
    c.train.patience = 2;
  } else if (preset == "paper") {
    c.model = ModelConfig::paper(vocab, answers);
  } else {
    throw ConfigError("unknown preset '" + std::string(preset) + "' (expected desk, tiny or paper)");
  }
  return c;
}

namespace {

template <typename F>
void assign(const json& value, F& field, std::string_view key) {
  try {
    if constexpr (std::is_same_v<F, std::size_t> || std::is_same_v<F, std::uint64_t>) {
      if (!value.is_number_integer() || (!value.is_number_unsigned() && value.get<std::int64_t>() < 0)) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<F>) {
      if (!value.is_number()) throw ConfigError("");
    } else {
      if (!value.is_string()) throw ConfigError("");
    }
    value.get_to(field);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + std::string(key) + "' has the wrong type: " + value.dump());
  }
}

}  // namespace

void RunConfig::set(std::string_view key, const json& value) {
  if (key == "preset") {
    std::string name;
    assign(value, name, key);
    if (name != preset) throw ConfigError("'preset' must be given before other keys");
    return;
  }
  if (key == "model.vocab_size" || key == "model.n_answers" || key == "model.image_size") {
    throw ConfigError("'" + std::string(key) + "' is taken from the dataset and cannot be set");
  }
  if (key == "model.seed" || key == "train.seed") {
    throw ConfigError("'" + std::string(key) + "' is derived from the root 'seed'");
  }
  std::string path_value;
  const std::map<std::string_view, std::function<void()>> setters = {
      {"seed", [&] { assign(value, seed, key); }},
      {"data", [&] { assign(value, path_value, key); data = path_value; }},
      {"out", [&] { assign(value, path_value, key); out = path_value; }},
      {"threads", [&] { assign(value, threads, key); }},
      {"model.embed_dim", [&] { assign(value, model.embed_dim, key); }},
      {"model.gru_hidden", [&] { assign(value, model.gru_hidden, key); }},
      {"model.n_blocks", [&] { assign(value, model.n_blocks, key); }},
      {"model.block_channels", [&] { assign(value, model.block_channels, key); }},
      {"model.classifier_channels", [&] { assign(value, model.classifier_channels, key); }},
      {"model.mlp_hidden", [&] { assign(value, model.mlp_hidden, key); }},
      {"model.stem_layers", [&] { assign(value, model.stem_layers, key); }},
      {"model.stem_channels", [&] { assign(value, model.stem_channels, key); }},
      {"model.eps", [&] { assign(value, model.eps, key); }},
      {"model.momentum", [&] { assign(value, model.momentum, key); }},
      {"train.learning_rate", [&] { assign(value, train.learning_rate, key); }},
      {"train.weight_decay", [&] { assign(value, train.weight_decay, key); }},
      {"train.batch_size", [&] { assign(value, train.batch_size, key); }},
      {"train.beta1", [&] { assign(value, train.beta1, key); }},
      {"train.beta2", [&] { assign(value, train.beta2, key); }},
      {"train.adam_eps", [&] { assign(value, train.adam_eps, key); }},
      {"train.max_epochs", [&] { assign(value, train.max_epochs, key); }},
      {"train.patience", [&] { assign(value, train.patience, key); }},
      {"train.eval_batch_size", [&] { assign(value, train.eval_batch_size, key); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second();
}

void RunConfig::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set(key, value);
}

RunConfig RunConfig::from_json(const json& flat) {
  if (!flat.is_object()) throw ConfigError("config file must hold a JSON object");
  RunConfig c = for_preset(flat.contains("preset") && flat["preset"].is_string() ? flat["preset"].get<std::string>()
                                                                                  : std::string("desk"));
  for (const auto& [key, value] : flat.items()) c.set(key, value);
  return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  const json flat = json::parse(in, nullptr, false);
  if (flat.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return from_json(flat);
}

void RunConfig::derive_seeds() {
  model.seed = derive_seed(seed, "init");
  train.seed = derive_seed(seed, "shuffle-root");
}

json RunConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["data"] = data.string();
  j["out"] = out.string();
  j["threads"] = threads;
  const json m = json::parse(model.to_json());
  const json t = json::parse(train.to_json());
  for (const auto& [k, v] : m.items()) j["model." + k] = v;
  for (const auto& [k, v] : t.items()) j["train." + k] = v;
  return j;
}

}  // namespace cbn::cli
