// SPDX-License-Identifier: Apache-2.0
//
// Adam with coupled L2 decay, seeded epoch shuffling and early stopping on
// validation accuracy.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbn/checkpoint.hpp"
#include "cbn/clevr/dataset.hpp"
#include "cbn/layers.hpp"
#include "cbn/model.hpp"

namespace cbn {

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 256;

  /// Throws ConfigError for non-positive rates or sizes, betas outside
  /// [0, 1), or zero patience. A zero learning rate is allowed.
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  bool operator==(const TrainConfig&) const = default;
};

/// One Adam update over every parameter. Parameters flagged for decay get
/// weight_decay * theta added to their gradient first. Every gradient is
/// checked before anything is modified; a NaN or infinity throws
/// NumericError naming the tensor. Parameters without a gradient are treated
/// as having a zero gradient.
template <typename T>
void adam_step(std::span<const NamedParameter<T>> params, TrainingState<T>& state, const TrainConfig& config);

struct Batch {
  Tensor<float> images;  // [N,3,S,S]
  nn::TokenBatch tokens;
  std::vector<int> answers;
};

Batch make_batch(const clevr::Split& split, std::span<const std::size_t> indices);

/// Forward, loss, backward and one Adam step on a batch. Returns the loss
/// before the update.
template <typename T>
double train_step(Model<T>& model, const Batch& batch, TrainingState<T>& state, const TrainConfig& config);

/// Mean cross-entropy of a batch in the given mode, without gradients.
template <typename T>
double batch_loss(Model<T>& model, const Batch& batch, nn::Mode mode);

/// Sample order for an epoch; a pure function of (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;  // wall-clock, not reproducible
};

/// "epoch,train_loss,val_acc,lr,seconds" plus one row per record.
std::string history_csv(std::span<const EpochRecord> history);

struct TrainOptions {
  /// When set, best.ckpt, last.ckpt and history.csv are (re)written after
  /// every epoch.
  std::optional<std::filesystem::path> out_dir;
  /// Optimizer state to continue from (epoch and step counters included).
  /// The starting model is scored on validation first and written as
  /// best.ckpt, so later epochs must beat it.
  std::optional<TrainingState<float>> resume;
  /// Called after each epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop once training accuracy on the whole train split reaches this
  /// value (checked after each epoch); disabled when unset.
  std::optional<double> stop_at_train_accuracy;
  /// Stop after the first epoch that ends past this many wall-clock seconds
  /// since training started; disabled when unset.
  std::optional<double> time_budget_seconds;
};

struct TrainResult {
  Model<float> best;
  std::size_t best_epoch = 0;
  double best_val_acc = -1.0;
  std::vector<EpochRecord> history;
  TrainingState<float> state;  // optimizer state after the last epoch
  bool early_stopped = false;
  bool out_of_time = false;
  double final_train_accuracy = -1.0;  // set when stop_at_train_accuracy is used
};

/// Early stopping: after each epoch the validation accuracy is measured in
/// eval mode; a strictly better value replaces the best model (ties keep the
/// earlier epoch) and training stops after `patience` epochs without
/// improvement. Checkpoint writes happen before the in-memory best changes,
/// so a failed write leaves the previous best intact.
TrainResult train(Model<float> model, const clevr::Split& train_split, const clevr::Split& val_split,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Pure early-stopping rule over a validation accuracy sequence: returns
/// (best epoch, number of epochs run), both 1-based.
std::pair<std::size_t, std::size_t> early_stopping_schedule(std::span<const double> val_accuracies,
                                                            std::size_t patience);

}  // namespace cbn
