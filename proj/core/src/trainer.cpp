// SPDX-License-Identifier: Apache-2.0
#include "cbn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cbn/evaluation.hpp"
#include "cbn/ops.hpp"
#include "cbn/seed.hpp"

namespace cbn {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (patience == 0) throw ConfigError("patience must be at least 1");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j = {{"learning_rate", learning_rate}, {"weight_decay", weight_decay},
                      {"batch_size", batch_size},       {"beta1", beta1},
                      {"beta2", beta2},                 {"adam_eps", adam_eps},
                      {"max_epochs", max_epochs},       {"patience", patience},
                      {"seed", seed},                   {"eval_batch_size", eval_batch_size}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
void adam_step(std::span<const NamedParameter<T>> params, TrainingState<T>& state, const TrainConfig& config) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  const std::uint64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  for (const auto& p : params) {
    Tensor<T> tensor = p.tensor;
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    m.resize(tensor.numel(), T{0});
    v.resize(tensor.numel(), T{0});
    auto theta = tensor.data();
    const bool has = tensor.has_grad();
    std::span<const T> grad = has ? std::as_const(tensor).grad() : std::span<const T>{};
    const T decay = p.decay ? static_cast<T>(config.weight_decay) : T{0};
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = (has ? grad[i] : T{0}) + decay * theta[i];
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / c1;
      const double v_hat = static_cast<double>(v[i]) / c2;
      theta[i] -= static_cast<T>(config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps));
    }
  }
  state.step = t;
}

Batch make_batch(const clevr::Split& split, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const std::size_t s = split.image_size;
  const std::size_t numel = split.image_numel();
  std::vector<float> pixels(indices.size() * numel);
  std::vector<std::vector<int>> questions;
  Batch b;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& sample = split.samples.at(indices[k]);
    const auto image = split.image(sample.image_index);
    std::copy(image.begin(), image.end(), pixels.begin() + static_cast<std::ptrdiff_t>(k * numel));
    questions.push_back(sample.tokens);
    b.answers.push_back(sample.answer);
  }
  b.images = Tensor<float>(Shape{indices.size(), 3, s, s}, std::move(pixels));
  b.tokens = nn::TokenBatch::from(questions);
  return b;
}

namespace {

template <typename T>
Tensor<T> images_as(const Tensor<float>& images) {
  if constexpr (std::is_same_v<T, float>) {
    return images;
  } else {
    return Tensor<T>(images.shape(), std::vector<T>(images.data().begin(), images.data().end()));
  }
}

}  // namespace

template <typename T>
double train_step(Model<T>& model, const Batch& batch, TrainingState<T>& state, const TrainConfig& config) {
  const auto params = model.parameters();
  for (auto p : params) p.tensor.zero_grad();
  GradTape<T>::current().clear();
  const Tensor<T> logits = forward(model, images_as<T>(batch.images), batch.tokens, nn::Mode::train);
  const Tensor<T> loss = softmax_cross_entropy(logits, std::span<const int>(batch.answers));
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) {
    GradTape<T>::current().clear();
    throw NumericError("non-finite training loss");
  }
  backward(loss);
  adam_step<T>(params, state, config);
  return value;
}

template <typename T>
double batch_loss(Model<T>& model, const Batch& batch, nn::Mode mode) {
  NoGradGuard no_grad;
  const Tensor<T> logits = forward(model, images_as<T>(batch.images), batch.tokens, mode);
  return static_cast<double>(softmax_cross_entropy(logits, std::span<const int>(batch.answers)).item());
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "shuffle", epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_acc,lr,seconds\n";
  out.precision(9);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_acc << ',' << r.lr << ',' << r.seconds << '\n';
  }
  return out.str();
}

std::pair<std::size_t, std::size_t> early_stopping_schedule(std::span<const double> val_accuracies,
                                                            std::size_t patience) {
  if (patience == 0) throw ConfigError("patience must be at least 1");
  std::size_t best = 0;
  double best_acc = -1.0;
  std::size_t since = 0;
  for (std::size_t e = 0; e < val_accuracies.size(); ++e) {
    if (val_accuracies[e] > best_acc) {
      best_acc = val_accuracies[e];
      best = e + 1;
      since = 0;
    } else if (++since >= patience) {
      return {best, e + 1};
    }
  }
  return {best, val_accuracies.size()};
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

TrainResult train(Model<float> model, const clevr::Split& train_split, const clevr::Split& val_split,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (train_split.size() == 0 || val_split.size() == 0) throw ContractError("train and validation splits must be non-empty");
  if (train_split.image_size != model.config.image_size) {
    throw ConfigError("dataset image size " + std::to_string(train_split.image_size) + " differs from model image size " +
                      std::to_string(model.config.image_size));
  }
  if (options.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir->string() + ": " + ec.message());
  }

  TrainResult result;
  result.state = options.resume.value_or(TrainingState<float>{});
  result.best = model.clone();
  if (options.resume) {
    result.best_val_acc = accuracy(val_split, predict_split(model, val_split, config.eval_batch_size));
    result.best_epoch = result.state.epoch;
    if (options.out_dir) save_checkpoint(model, *options.out_dir / "best.ckpt", &result.state);
  }

  const auto started = std::chrono::steady_clock::now();
  std::size_t since_best = 0;
  const std::size_t first_epoch = result.state.epoch + 1;
  for (std::size_t epoch = first_epoch; epoch < first_epoch + config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = epoch_order(config.seed, epoch, train_split.size());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + b, end - b);
      const Batch batch = make_batch(train_split, idx);
      loss_sum += train_step(model, batch, result.state, config) * static_cast<double>(idx.size());
      seen += idx.size();
    }
    result.state.epoch = epoch;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.val_acc = accuracy(val_split, predict_split(model, val_split, config.eval_batch_size));
    rec.lr = config.learning_rate;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);

    const bool improved = rec.val_acc > result.best_val_acc;
    if (options.out_dir) {
      if (improved) save_checkpoint(model, *options.out_dir / "best.ckpt", &result.state);
      save_checkpoint(model, *options.out_dir / "last.ckpt", &result.state);
      write_text(*options.out_dir / "history.csv", history_csv(result.history));
    }
    if (improved) {
      result.best = model.clone();
      result.best_val_acc = rec.val_acc;
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (options.on_epoch) options.on_epoch(rec);

    if (options.stop_at_train_accuracy) {
      result.final_train_accuracy = accuracy(train_split, predict_split(model, train_split, config.eval_batch_size));
      if (result.final_train_accuracy >= *options.stop_at_train_accuracy) break;
    }
    if (since_best >= config.patience) {
      result.early_stopped = true;
      break;
    }
    if (options.time_budget_seconds &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() > *options.time_budget_seconds) {
      result.out_of_time = true;
      break;
    }
  }
  return result;
}

template void adam_step(std::span<const NamedParameter<float>>, TrainingState<float>&, const TrainConfig&);
template void adam_step(std::span<const NamedParameter<double>>, TrainingState<double>&, const TrainConfig&);
template double train_step(Model<float>&, const Batch&, TrainingState<float>&, const TrainConfig&);
template double train_step(Model<double>&, const Batch&, TrainingState<double>&, const TrainConfig&);
template double batch_loss(Model<float>&, const Batch&, nn::Mode);
template double batch_loss(Model<double>&, const Batch&, nn::Mode);

}  // namespace cbn
