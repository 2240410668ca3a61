// SPDX-License-Identifier: Apache-2.0
//
// Layer vocabulary of the conditioned network: batch normalization, its
// question-conditioned variant, the projection from question embedding to
// per-layer (delta gamma, beta), the GRU question encoder, coordinate maps and
// the conditioned residual block.
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cbn/tensor.hpp"

namespace cbn::nn {

enum class Mode { train, eval };

/// Running moments of one normalization layer.
template <typename T>
struct NormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  /// running_mean = 0, running_var = 1.
  static NormStats fresh(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5));
  bool initialized() const { return !running_mean.empty() && running_mean.size() == running_var.size(); }
  std::size_t channels() const { return running_mean.size(); }
};

/// Plain batch normalization: trainable per-channel gamma and beta.
template <typename T>
struct BnState {
  Tensor<T> gamma;  // [C]
  Tensor<T> beta;   // [C]
  NormStats<T> stats;

  static BnState create(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5));
  std::size_t channels() const { return gamma.numel(); }
};

/// Linear map from the question embedding to one layer's modulation.
/// Output rows [0, C) are delta gamma, rows [C, 2C) are beta.
template <typename T>
struct CbnProjection {
  Tensor<T> weight;  // [2C, E]
  Tensor<T> bias;    // [2C]

  std::size_t channels() const { return weight.dim(0) / 2; }
  std::size_t embedding_size() const { return weight.dim(1); }
};

/// Standard GRU cell. Weights are [H, in] so that gates are x W^T + b.
template <typename T>
struct GruState {
  Tensor<T> input_update, input_reset, input_candidate;      // [H, E_w]
  Tensor<T> hidden_update, hidden_reset, hidden_candidate;   // [H, H]
  Tensor<T> bias_update, bias_reset, bias_candidate;         // [H]

  std::size_t hidden_size() const { return hidden_update.dim(0); }
  std::size_t input_size() const { return input_update.dim(1); }
};

/// Question tokens padded with id 0 to a rectangular [batch, max_len] grid.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch from(std::span<const std::vector<int>> questions);
  std::vector<int> column(std::size_t t) const;
};

template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& features, BnState<T>& state);

template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& features, const BnState<T>& state);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& features, BnState<T>& state, Mode mode) {
  return mode == Mode::train ? batch_norm_train(features, state) : batch_norm_eval(features, state);
}

/// (delta_gamma [N,C], beta [N,C]) = split(e_q W^T + b).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> predict_cbn_params(const Tensor<T>& question_embedding,
                                                   const CbnProjection<T>& projection);

/// Normalizes with batch moments, then scales sample i, channel c by
/// (1 + delta_gamma[i,c]) and shifts by beta[i,c]. When `stats` is given the
/// running moments are updated.
template <typename T>
Tensor<T> cbn_apply(const Tensor<T>& features, const Tensor<T>& delta_gamma, const Tensor<T>& beta, T eps,
                    NormStats<T>* stats = nullptr);

/// Same modulation, normalized with the running moments in `stats`.
template <typename T>
Tensor<T> cbn_apply_eval(const Tensor<T>& features, const Tensor<T>& delta_gamma, const Tensor<T>& beta,
                         const NormStats<T>& stats);

template <typename T>
Tensor<T> gru_step(const Tensor<T>& input, const Tensor<T>& hidden, const GruState<T>& state);

/// Final GRU state per question: [batch, H]. Padded steps leave the state untouched.
template <typename T>
Tensor<T> encode_question(const TokenBatch& tokens, const Tensor<T>& embed_table, const GruState<T>& gru);

/// Single question -> [1, H].
template <typename T>
Tensor<T> encode_question(std::span<const int> tokens, const Tensor<T>& embed_table, const GruState<T>& gru);

/// [2, h, w]: channel 0 is the row coordinate, channel 1 the column coordinate,
/// both spaced linearly over [-1, 1]; an extent of 1 maps to 0.
template <typename T>
Tensor<T> coord_maps(std::size_t height, std::size_t width);

/// [N,C,H,W] -> [N,C+2,H,W] with the coordinate maps appended.
template <typename T>
Tensor<T> append_coord_maps(const Tensor<T>& features);

template <typename T>
struct CbnLayer {
  CbnProjection<T> projection;
  NormStats<T> stats;
};

/// coords -> 1x1 conv + ReLU -> [3x3 conv -> CBN -> ReLU] x 2 -> + 1x1 output.
template <typename T>
struct ResidualBlock {
  Tensor<T> entry_kernel;  // [C, C_in + 2, 1, 1]
  Tensor<T> entry_bias;    // [C]
  Tensor<T> conv1;         // [C, C, 3, 3]
  Tensor<T> conv2;         // [C, C, 3, 3]
  CbnLayer<T> cbn1;
  CbnLayer<T> cbn2;

  std::size_t channels() const { return entry_kernel.dim(0); }
};

template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& input, const Tensor<T>& question_embedding,
                                 ResidualBlock<T>& block, Mode mode);

}  // namespace cbn::nn
