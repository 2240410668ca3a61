// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbn/analysis.hpp"
#include "cbn/checkpoint.hpp"
#include "cbn/clevr/dataset.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/evaluation.hpp"
#include "cbn/trainer.hpp"
#include "run_config.hpp"

namespace cbn::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void prepare_out(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_effective(const fs::path& dir, const json& config) {
  write_text(dir / "effective_config.json", config.dump(2) + "\n");
}

void check_compatible(const ModelConfig& config, const clevr::Dataset& data) {
  if (config.image_size != data.config.image_size) {
    throw ArtifactError("checkpoint expects " + std::to_string(config.image_size) + "px images, dataset has " +
                        std::to_string(data.config.image_size) + "px");
  }
  if (config.vocab_size != clevr::vocabulary().size()) {
    throw ArtifactError("checkpoint vocabulary size " + std::to_string(config.vocab_size) + " does not match " +
                        std::to_string(clevr::vocabulary().size()));
  }
  if (config.n_answers != clevr::answer_list().size()) {
    throw ArtifactError("checkpoint answer count " + std::to_string(config.n_answers) + " does not match " +
                        std::to_string(clevr::answer_list().size()));
  }
}

clevr::SplitName parse_split(const std::string& name) {
  try {
    return clevr::split_from_name(name);
  } catch (const Error&) {
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
  }
}

struct Shared {
  std::size_t threads = 1;
};

// ---------------------------------------------------------------------------

struct GenerateArgs {
  clevr::DatasetConfig config;
  fs::path out = default_data_root();
  bool force = false;
};

int cmd_generate(const GenerateArgs& a, const Shared& shared, const CLI::App& sub) {
  try {
    a.config.validate();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << sub.help();
    return kUsage;
  }
  const std::string manifest = clevr::build_dataset(a.config, a.out, a.force, shared.threads);
  std::cout << "wrote " << a.config.n_train << "/" << a.config.n_val << "/" << a.config.n_test << " samples to "
            << a.out.string() << "\n";
  (void)manifest;
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path data = default_data_root();
  std::optional<fs::path> config_file;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  std::vector<std::string> overrides;
  std::optional<fs::path> from_checkpoint;
  std::optional<std::size_t> max_epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> patience;
};

int cmd_train(const TrainArgs& a, const Shared& shared) {
  json flat = json::object();
  if (a.config_file) {
    std::ifstream in(*a.config_file);
    if (!in) throw IoError("cannot open config file " + a.config_file->string());
    flat = json::parse(in, nullptr, false);
    if (flat.is_discarded() || !flat.is_object()) {
      throw ConfigError("config file " + a.config_file->string() + " is not a flat JSON object");
    }
  }
  if (a.preset) flat["preset"] = *a.preset;
  RunConfig run = RunConfig::from_json(flat);
  run.data = a.data;
  if (run.data.empty()) run.data = a.data;
  if (a.out) run.out = *a.out;
  if (a.seed) run.seed = *a.seed;
  run.threads = shared.threads;
  for (const auto& o : a.overrides) run.set_assignment(o);
  if (a.max_epochs) run.train.max_epochs = *a.max_epochs;
  if (a.lr) run.train.learning_rate = *a.lr;
  if (a.batch_size) run.train.batch_size = *a.batch_size;
  if (a.patience) run.train.patience = *a.patience;
  if (run.out.empty()) throw ConfigError("no output directory: pass --out or set 'out' in the config file");
  run.derive_seeds();
  run.train.validate();

  const clevr::Dataset data = clevr::load_dataset(run.data);
  run.model.image_size = data.config.image_size;
  run.model.vocab_size = clevr::vocabulary().size();
  run.model.n_answers = clevr::answer_list().size();

  TrainOptions options;
  Model<float> model;
  if (a.from_checkpoint) {
    TrainingState<float> state;
    model = load_checkpoint<float>(*a.from_checkpoint, &state);
    check_compatible(model.config, data);
    run.model = model.config;
    options.resume = std::move(state);
  } else {
    run.model.validate();
    model = init_model<float>(run.model, run.model.seed);
  }

  prepare_out(run.out);
  json effective = run.to_json();
  if (a.from_checkpoint) effective["from_checkpoint"] = a.from_checkpoint->string();
  write_effective(run.out, effective);

  options.out_dir = run.out;
  options.on_epoch = [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " loss " << std::fixed << std::setprecision(4) << r.train_loss << " val_acc "
              << r.val_acc << " (" << std::setprecision(1) << r.seconds << "s)" << std::defaultfloat << std::endl;
  };
  const TrainResult result = train(std::move(model), data.train, data.val, run.train, options);
  std::cout << "best validation accuracy " << std::fixed << std::setprecision(4) << result.best_val_acc
            << " at epoch " << result.best_epoch << " (step " << result.state.step << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  fs::path ckpt;
  fs::path data = default_data_root();
  std::string split = "test";
  std::size_t batch_size = 256;
};

struct Loaded {
  clevr::Dataset data;
  Model<float> model;
  const clevr::Split& split() const { return data.split(name); }
  clevr::SplitName name = clevr::SplitName::test;
};

Loaded load_for_eval(const ModelArgs& a) {
  Loaded l;
  l.name = parse_split(a.split);
  l.model = load_checkpoint<float>(a.ckpt);
  l.data = clevr::load_dataset(a.data);
  check_compatible(l.model.config, l.data);
  return l;
}

json model_args_json(const std::string& command, const ModelArgs& a) {
  return {{"command", command}, {"ckpt", a.ckpt.string()}, {"data", a.data.string()}, {"split", a.split},
          {"batch_size", a.batch_size}};
}

struct EvalArgs {
  ModelArgs model;
  bool by_length = false;
  std::optional<fs::path> out;
};

int cmd_eval(const EvalArgs& a) {
  Loaded l = load_for_eval(a.model);
  const EvalReport report = evaluate(l.model, l.split(), a.model.batch_size);
  const std::string text = report.to_json(a.by_length);
  std::cout << text << "\n";
  if (a.out) {
    prepare_out(*a.out);
    json effective = model_args_json("eval", a.model);
    effective["by_length"] = a.by_length;
    write_effective(*a.out, effective);
    write_text(*a.out / "eval.json", text + "\n");
    write_text(*a.out / "families.csv", report.families_csv());
    write_text(*a.out / "confusion.csv", report.confusion_csv());
    if (a.by_length) write_text(*a.out / "length_error.csv", report.length_csv());
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  ModelArgs model;
  std::size_t n = 2000;
  std::uint64_t seed = 0;
  fs::path out;
};

int cmd_cbn_dump(const DumpArgs& a) {
  Loaded l = load_for_eval(a.model);
  if (a.n == 0 || a.n > l.split().size()) {
    throw ConfigError("--n must lie in [1, " + std::to_string(l.split().size()) + "] for split " + a.model.split);
  }
  const auto dump = analysis::dump_cbn_params(l.model, l.split(), a.n, a.seed);
  prepare_out(a.out);
  json effective = model_args_json("analyze cbn-dump", a.model);
  effective["n"] = a.n;
  effective["seed"] = a.seed;
  write_effective(a.out, effective);
  write_text(a.out / "cbn_dump.csv", dump.to_csv());
  std::cout << "wrote " << dump.rows.size() << " rows (" << a.n << " questions x " << dump.layers << " layers) to "
            << (a.out / "cbn_dump.csv").string() << "\n";
  return kOk;
}

struct PurityArgs {
  fs::path dump;
  std::size_t k = 10;
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  fs::path out;
};

int cmd_purity(const PurityArgs& a) {
  std::ifstream in(a.dump);
  if (!in) throw IoError("cannot open dump " + a.dump.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto dump = analysis::CbnDump::from_csv(text);
  const auto report = analysis::function_grouping_report(dump, a.k, a.resamples, a.seed);
  prepare_out(a.out);
  write_effective(a.out, {{"command", "analyze purity"}, {"dump", a.dump.string()}, {"k", a.k},
                          {"resamples", a.resamples}, {"seed", a.seed}});
  write_text(a.out / "purity.json", report.to_json() + "\n");
  std::cout << report.to_json() << "\n";
  return kOk;
}

struct PredictionArgs {
  ModelArgs model;
  fs::path out;
};

int cmd_count_errors(const PredictionArgs& a) {
  Loaded l = load_for_eval(a.model);
  const auto predictions = predict_split(l.model, l.split(), a.model.batch_size);
  const auto profile = analysis::counting_error_profile(l.split(), predictions);
  prepare_out(a.out);
  write_effective(a.out, model_args_json("analyze count-errors", a.model));
  write_text(a.out / "count_errors.csv", profile.to_csv());
  write_text(a.out / "count_errors.json", profile.to_json() + "\n");
  std::cout << profile.to_json() << "\n";
  return kOk;
}

int cmd_length(const PredictionArgs& a) {
  Loaded l = load_for_eval(a.model);
  const auto predictions = predict_split(l.model, l.split(), a.model.batch_size);
  const auto table = analysis::error_by_length(l.split(), predictions);
  prepare_out(a.out);
  write_effective(a.out, model_args_json("analyze length", a.model));
  write_text(a.out / "length_error.csv", table.to_csv());
  write_text(a.out / "length_error.json", table.to_json() + "\n");
  std::cout << table.to_json() << "\n";
  return kOk;
}

struct ConsistencyArgs {
  std::optional<fs::path> ckpt;
  bool oracle = false;
  std::size_t scenes = 500;
  std::uint64_t seed = 0;
  std::size_t image_size = 48;
  std::size_t batch_size = 256;
  fs::path out;
};

int cmd_consistency(const ConsistencyArgs& a) {
  if (a.oracle == a.ckpt.has_value()) throw ConfigError("pass exactly one of --ckpt and --oracle");
  if (a.scenes == 0) throw ConfigError("--scenes must be positive");
  std::optional<Model<float>> model;
  analysis::Answerer answerer;
  std::size_t image_size = a.image_size;
  if (a.ckpt) {
    model = load_checkpoint<float>(*a.ckpt);
    image_size = model->config.image_size;
    answerer = analysis::model_answerer(*model, a.batch_size);
  } else {
    answerer = analysis::oracle_answerer();
  }
  const auto report = analysis::consistency_audit(answerer, a.scenes, a.seed, image_size);
  prepare_out(a.out);
  write_effective(a.out, {{"command", "analyze consistency"},
                          {"ckpt", a.ckpt ? json(a.ckpt->string()) : json(nullptr)},
                          {"oracle", a.oracle},
                          {"scenes", a.scenes},
                          {"seed", a.seed},
                          {"image_size", image_size}});
  write_text(a.out / "consistency.json", report.to_json() + "\n");
  std::cout << "inconsistency rate " << report.rate() << " (" << report.inconsistent << "/" << report.scenes
            << " scenes)\n";
  return kOk;
}

void add_model_args(CLI::App* sub, ModelArgs& a) {
  sub->add_option("--ckpt", a.ckpt, "Checkpoint file")->required();
  sub->add_option("--data", a.data, "Dataset directory (default: $CBN_DATA_ROOT or ./data)");
  sub->add_option("--split", a.split, "train, val or test")->capture_default_str();
  sub->add_option("--batch-size", a.batch_size, "Evaluation batch size")->capture_default_str()->check(CLI::PositiveNumber);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Question-conditioned batch normalization on mini-CLEVR"};
  app.require_subcommand(1);
  app.fallthrough();
  Shared shared;
  app.add_option("--threads", shared.threads, "Maximum worker threads")->check(CLI::PositiveNumber);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate a mini-CLEVR dataset");
  generate->add_option("--out", gen.out, "Output directory (default: $CBN_DATA_ROOT or ./data)");
  generate->add_option("--num-train", gen.config.n_train)->capture_default_str();
  generate->add_option("--num-val", gen.config.n_val)->capture_default_str();
  generate->add_option("--num-test", gen.config.n_test)->capture_default_str();
  generate->add_option("--seed", gen.config.seed)->capture_default_str();
  generate->add_option("--image-size", gen.config.image_size)->capture_default_str();
  generate->add_option("--questions-per-scene", gen.config.questions_per_scene, "Questions sharing one scene")
      ->capture_default_str();
  generate->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", tr.data, "Dataset directory (default: $CBN_DATA_ROOT or ./data)");
  train_cmd->add_option("--config", tr.config_file, "Flat JSON config with dotted keys");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--seed", tr.seed, "Root seed");
  train_cmd->add_option("--preset", tr.preset, "desk, tiny or paper");
  train_cmd->add_option("--set", tr.overrides, "Override a config key: key=value");
  train_cmd->add_option("--from-checkpoint", tr.from_checkpoint, "Resume from a checkpoint");
  train_cmd->add_option("--max-epochs", tr.max_epochs);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--patience", tr.patience);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_model_args(eval_cmd, ev.model);
  eval_cmd->add_flag("--by-length", ev.by_length, "Include the program-length table");
  eval_cmd->add_option("--out", ev.out, "Directory for CSV reports");

  auto* analyze = app.add_subcommand("analyze", "Analyses of a trained model");
  analyze->require_subcommand(1);

  DumpArgs dump;
  auto* dump_cmd = analyze->add_subcommand("cbn-dump", "Export CBN parameter vectors");
  add_model_args(dump_cmd, dump.model);
  dump_cmd->add_option("--n", dump.n, "Number of questions")->capture_default_str();
  dump_cmd->add_option("--seed", dump.seed)->capture_default_str();
  dump_cmd->add_option("--out", dump.out)->required();

  PurityArgs pur;
  auto* purity_cmd = analyze->add_subcommand("purity", "kNN label purity of a CBN dump");
  purity_cmd->add_option("--dump", pur.dump, "cbn_dump.csv")->required();
  purity_cmd->add_option("--k", pur.k)->capture_default_str()->check(CLI::PositiveNumber);
  purity_cmd->add_option("--resamples", pur.resamples)->capture_default_str()->check(CLI::PositiveNumber);
  purity_cmd->add_option("--seed", pur.seed)->capture_default_str();
  purity_cmd->add_option("--out", pur.out)->required();

  PredictionArgs cnt;
  auto* count_cmd = analyze->add_subcommand("count-errors", "Histogram of counting errors");
  add_model_args(count_cmd, cnt.model);
  count_cmd->add_option("--out", cnt.out)->required();

  PredictionArgs len;
  auto* length_cmd = analyze->add_subcommand("length", "Error rate by program length");
  add_model_args(length_cmd, len.model);
  length_cmd->add_option("--out", len.out)->required();

  ConsistencyArgs con;
  auto* cons_cmd = analyze->add_subcommand("consistency", "Counting comparison consistency audit");
  cons_cmd->add_option("--ckpt", con.ckpt, "Checkpoint file");
  cons_cmd->add_flag("--oracle", con.oracle, "Audit the program executor instead of a model");
  cons_cmd->add_option("--scenes", con.scenes)->capture_default_str();
  cons_cmd->add_option("--seed", con.seed)->capture_default_str();
  cons_cmd->add_option("--image-size", con.image_size, "Image size for --oracle")->capture_default_str();
  cons_cmd->add_option("--batch-size", con.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  cons_cmd->add_option("--out", con.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*generate) return cmd_generate(gen, shared, *generate);
    if (*train_cmd) return cmd_train(tr, shared);
    if (*eval_cmd) return cmd_eval(ev);
    if (*dump_cmd) return cmd_cbn_dump(dump);
    if (*purity_cmd) return cmd_purity(pur);
    if (*count_cmd) return cmd_count_errors(cnt);
    if (*length_cmd) return cmd_length(len);
    if (*cons_cmd) return cmd_consistency(con);
  } catch (const clevr::OutputExistsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kArtifact;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace cbn::cli
