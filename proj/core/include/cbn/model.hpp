// SPDX-License-Identifier: Apache-2.0
//
// The full question-conditioned network: GRU question encoder, a strided
// convolutional stem over raw pixels, a stack of conditioned residual blocks
// and a max-pooled classifier. The question reaches the visual pipeline only
// through the per-layer (delta gamma, beta) projections.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cbn/layers.hpp"
#include "cbn/tensor.hpp"

namespace cbn {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 32;
  std::size_t gru_hidden = 128;
  std::size_t n_blocks = 2;
  std::size_t block_channels = 32;
  std::size_t classifier_channels = 64;
  std::size_t mlp_hidden = 128;
  std::size_t n_answers = 22;
  std::size_t image_size = 48;
  std::size_t stem_layers = 2;      // each a stride-2 3x3 conv + BN + ReLU
  std::size_t stem_channels = 32;
  double eps = 1e-5;
  double momentum = 0.1;
  std::uint64_t seed = 0;

  /// Minutes-scale defaults used for the mini-CLEVR experiments.
  static ModelConfig desk(std::size_t vocab_size, std::size_t n_answers);
  /// Widths reported for the full-scale CLEVR model.
  static ModelConfig paper(std::size_t vocab_size, std::size_t n_answers);
  /// Smallest configuration that still exercises every layer; used for
  /// finite-difference checks.
  static ModelConfig tiny(std::size_t vocab_size, std::size_t n_answers);

  /// Throws ConfigError on zero widths, too few blocks, or an image that the
  /// stem would shrink below 1x1.
  void validate() const;
  /// Spatial extent after the stem.
  std::size_t feature_size() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ConvBnLayer {
  Tensor<T> kernel;
  nn::BnState<T> bn;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <typename T>
struct DenseLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool decay;  // false for biases and BN/CBN shifts
};

template <typename T>
struct NamedStats {
  std::string name;
  nn::NormStats<T>* stats;
};

template <typename T>
class Model {
 public:
  ModelConfig config;
  Tensor<T> word_embedding;  // [vocab, embed]
  nn::GruState<T> gru;
  std::vector<ConvBnLayer<T>> stem;
  ConvBnLayer<T> fuse;  // 3x3 over stem output + coordinates
  std::vector<nn::ResidualBlock<T>> blocks;
  ConvBnLayer<T> classifier_conv;  // 1x1 over block output + coordinates
  DenseLayer<T> hidden;
  DenseLayer<T> output;

  /// Every trainable tensor under a stable, unique name.
  std::vector<NamedParameter<T>> parameters() const;
  /// Every normalization layer's running moments, in forward order.
  std::vector<NamedStats<T>> norm_stats();
  std::vector<std::pair<std::string, const nn::NormStats<T>*>> norm_stats() const;
  std::size_t parameter_count() const;
  std::size_t cbn_layer_count() const { return 2 * blocks.size(); }

  /// Deep copy: no storage is shared with the original.
  Model clone() const;
};

/// Parameters: He-uniform for convolutions, uniform(+-1/sqrt(fan_in)) for
/// linear maps (including CBN projections and GRU weights), zero biases,
/// N(0,1) word embeddings. Identical seeds give identical bytes.
template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Same architecture and values in another scalar type.
template <typename To, typename From>
Model<To> cast_model(const Model<From>& model);

/// Final GRU state for each question: [N, gru_hidden].
template <typename T>
Tensor<T> question_embedding(const Model<T>& model, const nn::TokenBatch& tokens);

/// (delta gamma, beta) of every CBN layer in forward order, each [N, C].
template <typename T>
std::vector<std::pair<Tensor<T>, Tensor<T>>> cbn_parameters(const Model<T>& model,
                                                            const Tensor<T>& question_embedding);

/// images [N,3,S,S] + questions -> logits [N, n_answers]. Train mode uses and
/// updates batch statistics; eval mode is a per-sample pure function.
template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& images, const nn::TokenBatch& tokens, nn::Mode mode);

/// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> values);

/// Eval-mode answers for a batch, without recording a gradient tape.
template <typename T>
std::vector<int> predict_batch(Model<T>& model, const Tensor<T>& images, const nn::TokenBatch& tokens);

/// Single sample; `image` is [3,S,S].
template <typename T>
int predict(Model<T>& model, const Tensor<T>& image, std::span<const int> tokens);

}  // namespace cbn
