// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "cbn/checkpoint.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/clevr/program.hpp"
#include "cbn/error.hpp"
#include "cbn/model.hpp"
#include "cbn/ops.hpp"
#include "oracles.hpp"

namespace cbn {
namespace {

using testing::random_tensor;

constexpr std::size_t kVocab = 12;
constexpr std::size_t kAnswers = 5;

std::size_t analytic_parameter_count(const ModelConfig& c) {
  auto conv = [](std::size_t o, std::size_t i, std::size_t k) { return o * i * k * k; };
  std::size_t n = c.vocab_size * c.embed_dim;
  n += 3 * c.gru_hidden * c.embed_dim + 3 * c.gru_hidden * c.gru_hidden + 3 * c.gru_hidden;
  for (std::size_t i = 0; i < c.stem_layers; ++i) n += conv(c.stem_channels, i == 0 ? 3 : c.stem_channels, 3) + 2 * c.stem_channels;
  n += conv(c.block_channels, c.stem_channels + 2, 3) + 2 * c.block_channels;
  const std::size_t block = conv(c.block_channels, c.block_channels + 2, 1) + c.block_channels +
                            2 * conv(c.block_channels, c.block_channels, 3) +
                            2 * (2 * c.block_channels * c.gru_hidden + 2 * c.block_channels);
  n += c.n_blocks * block;
  n += conv(c.classifier_channels, c.block_channels + 2, 1) + 2 * c.classifier_channels;
  n += c.mlp_hidden * c.classifier_channels + c.mlp_hidden;
  n += c.n_answers * c.mlp_hidden + c.n_answers;
  return n;
}

Model<double> tiny_model(std::uint64_t seed = 1) {
  auto c = ModelConfig::tiny(kVocab, kAnswers);
  return init_model<double>(c, seed);
}

nn::TokenBatch tokens(std::vector<std::vector<int>> q) { return nn::TokenBatch::from(q); }

TEST(ModelConfig, DeskDefaults) {
  const auto c = ModelConfig::desk(49, 22);
  EXPECT_EQ(c.embed_dim, 32u);
  EXPECT_EQ(c.gru_hidden, 128u);
  EXPECT_EQ(c.n_blocks, 2u);
  EXPECT_EQ(c.block_channels, 32u);
  EXPECT_EQ(c.classifier_channels, 64u);
  EXPECT_EQ(c.mlp_hidden, 128u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, PaperPreset) {
  const auto c = ModelConfig::paper(49, 28);
  EXPECT_EQ(c.embed_dim, 200u);
  EXPECT_EQ(c.gru_hidden, 4096u);
  EXPECT_EQ(c.n_blocks, 3u);
  EXPECT_EQ(c.block_channels, 128u);
  EXPECT_EQ(c.classifier_channels, 512u);
  EXPECT_EQ(c.mlp_hidden, 1024u);
  EXPECT_EQ(c.feature_size(), 14u);
}

TEST(ModelConfig, ValidationAndJson) {
  auto c = ModelConfig::desk(49, 22);
  c.n_blocks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk(49, 22);
  c.image_size = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk(49, 22);
  c.seed = 99;
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  EXPECT_THROW(ModelConfig::from_json("{"), ConfigError);
  EXPECT_THROW(init_model<float>(ModelConfig{.vocab_size = 0}, 1), ConfigError);
}

TEST(InitModel, ParameterCountMatchesAnalyticCount) {
  const std::size_t vocab = clevr::vocabulary().size();
  const std::size_t answers = clevr::answer_list().size();
  const auto desk = ModelConfig::desk(vocab, answers);
  const auto m = init_model<float>(desk, 0);
  EXPECT_EQ(m.parameter_count(), analytic_parameter_count(desk));
  EXPECT_EQ(m.parameter_count(), 169046u);
  const auto tiny = ModelConfig::tiny(kVocab, kAnswers);
  EXPECT_EQ(init_model<float>(tiny, 0).parameter_count(), analytic_parameter_count(tiny));
}

TEST(InitModel, DeterministicPerSeed) {
  const auto a = tiny_model(5), b = tiny_model(5), c = tiny_model(6);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_difference = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(0, std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(), pa[i].tensor.numel() * sizeof(double)));
    any_difference = any_difference || !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                                                   pc[i].tensor.data().begin());
  }
  EXPECT_TRUE(any_difference);
}

TEST(InitModel, InitializationRanges) {
  const auto m = init_model<double>(ModelConfig::desk(49, 22), 3);
  for (const auto& p : m.parameters()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (double v : p.tensor.data()) EXPECT_EQ(v, 0.0) << p.name;
    }
  }
  const double bound = 1.0 / std::sqrt(128.0);
  for (double v : m.blocks[0].cbn1.projection.weight.data()) EXPECT_LE(std::abs(v), bound);
  const double he = std::sqrt(6.0 / (3.0 * 9.0));
  for (double v : m.stem[0].kernel.data()) EXPECT_LE(std::abs(v), he);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(Forward, OutputShape) {
  auto m = tiny_model();
  std::mt19937_64 rng(1);
  const auto x = random_tensor({3, 3, 8, 8}, rng);
  const auto q = tokens({{1, 2, 3}, {4}, {5, 6}});
  EXPECT_EQ(forward(m, x, q, nn::Mode::train).shape(), (Shape{3, kAnswers}));
  EXPECT_EQ(forward(m, x, q, nn::Mode::eval).shape(), (Shape{3, kAnswers}));
  EXPECT_THROW(forward(m, random_tensor({2, 3, 8, 8}, rng), q, nn::Mode::eval), ShapeError);
}

TEST(Forward, EndToEndGradient) {
  auto m = tiny_model(2);
  std::mt19937_64 rng(2);
  const auto x = random_tensor({2, 3, 8, 8}, rng);
  const auto q = tokens({{1, 2, 3}, {4, 5, 6}});
  const std::vector<int> targets = {1, 3};
  std::vector<Tensor<double>> leaves;
  for (const auto& p : m.parameters()) leaves.push_back(p.tensor);
  const auto r = testing::grad_check(leaves, [&] { return softmax_cross_entropy(forward(m, x, q, nn::Mode::train), targets); });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 500u);
}

TEST(Forward, EvalModeIsPerSample) {
  auto m = tiny_model(3);
  std::mt19937_64 rng(3);
  const auto x = random_tensor({3, 3, 8, 8}, rng);
  const auto logits = forward(m, x, tokens({{1, 2}, {3}, {4, 5, 6}}), nn::Mode::eval);
  const std::size_t img = 3 * 64;
  std::vector<double> swapped(x.data().begin() + img * 2, x.data().end());
  swapped.insert(swapped.end(), x.data().begin(), x.data().begin() + img * 2);
  const auto perm = forward(m, Tensor<double>(x.shape(), swapped), tokens({{4, 5, 6}, {1, 2}, {3}}), nn::Mode::eval);
  for (std::size_t k = 0; k < kAnswers; ++k) {
    EXPECT_EQ(perm[k], logits[2 * kAnswers + k]);
    EXPECT_EQ(perm[kAnswers + k], logits[k]);
    EXPECT_EQ(perm[2 * kAnswers + k], logits[kAnswers + k]);
  }
}

TEST(Forward, ZeroedProjectionsMakeLogitsQuestionIndependent) {
  auto m = tiny_model(4);
  for (auto& b : m.blocks) {
    for (auto* l : {&b.cbn1, &b.cbn2}) {
      for (auto& v : l->projection.weight.data()) v = 0.0;
      for (auto& v : l->projection.bias.data()) v = 0.0;
    }
  }
  std::mt19937_64 rng(4);
  const auto img = random_tensor({1, 3, 8, 8}, rng);
  const auto a = forward(m, img, tokens({{1, 2, 3}}), nn::Mode::eval);
  const auto b = forward(m, img, tokens({{7, 8, 9, 10}}), nn::Mode::eval);
  for (std::size_t k = 0; k < kAnswers; ++k) EXPECT_EQ(a[k], b[k]);

  const auto params = cbn_parameters(m, question_embedding(m, tokens({{1, 2, 3}})));
  for (const auto& [dg, beta] : params) {
    for (double v : dg.data()) EXPECT_EQ(1.0 + v, 1.0);
    for (double v : beta.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Forward, QuestionChangesLogitsOnceProjectionsAreNonzero) {
  auto m = tiny_model(5);
  for (auto& b : m.blocks) {
    for (auto* l : {&b.cbn1, &b.cbn2}) {
      for (auto& v : l->projection.weight.data()) v = 0.0;
      for (auto& v : l->projection.bias.data()) v = 0.0;
    }
  }
  std::mt19937_64 rng(5);
  for (auto& v : m.blocks[0].cbn2.projection.weight.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto img = random_tensor({1, 3, 8, 8}, rng);
  std::vector<double> two(img.data().begin(), img.data().end());
  two.insert(two.end(), img.data().begin(), img.data().end());
  const auto logits = forward(m, Tensor<double>(Shape{2, 3, 8, 8}, two), tokens({{1, 2, 3}, {7, 8, 9}}), nn::Mode::eval);
  double diff = 0.0;
  for (std::size_t k = 0; k < kAnswers; ++k) diff += std::abs(logits[k] - logits[kAnswers + k]);
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, LogitsDependOnQuestionEmbedding) {
  auto m = tiny_model(6);
  std::mt19937_64 rng(6);
  const auto x = random_tensor({2, 3, 8, 8}, rng);
  const auto q = tokens({{1, 2, 3}, {4, 5}});
  m.word_embedding.zero_grad();
  backward(sum(mul(forward(m, x, q, nn::Mode::train), random_tensor({2, kAnswers}, rng))));
  const auto g = std::as_const(m.word_embedding).grad();
  EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
}

TEST(Predict, ArgmaxTieRule) {
  const std::vector<double> a = {0.1, 2.0, -1.0};
  EXPECT_EQ(argmax<double>(a), 1);
  const std::vector<double> tie = {0.0, 1.0, 3.0, -2.0, 0.5, 3.0};
  EXPECT_EQ(argmax<double>(tie), 2);
}

TEST(Predict, AgreesWithSoftmaxArgmax) {
  auto m = tiny_model(7);
  std::mt19937_64 rng(7);
  const auto x = random_tensor({4, 3, 8, 8}, rng);
  const auto q = tokens({{1}, {2, 3}, {4, 5, 6}, {7, 8}});
  const auto logits = forward(m, x, q, nn::Mode::eval);
  const auto answers = predict_batch(m, x, q);
  for (std::size_t n = 0; n < 4; ++n) {
    std::vector<double> p(kAnswers);
    double z = 0.0;
    for (std::size_t k = 0; k < kAnswers; ++k) z += p[k] = std::exp(logits[n * kAnswers + k]);
    for (auto& v : p) v /= z;
    EXPECT_EQ(answers[n], argmax<double>(p));
    const std::vector<double> img(x.data().begin() + static_cast<std::ptrdiff_t>(n * 192),
                                  x.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * 192));
    const std::vector<int> one(q.ids.begin() + static_cast<std::ptrdiff_t>(n * q.max_len),
                               q.ids.begin() + static_cast<std::ptrdiff_t>(n * q.max_len + q.lengths[n]));
    EXPECT_EQ(predict(m, Tensor<double>(Shape{3, 8, 8}, img), one), answers[n]);
  }
}

TEST(Model, CloneSharesNothing) {
  auto m = tiny_model(8);
  auto c = m.clone();
  c.word_embedding.data()[0] += 1.0;
  c.blocks[0].cbn1.stats.running_mean[0] += 1.0;
  EXPECT_NE(c.word_embedding[0], m.word_embedding[0]);
  EXPECT_NE(c.blocks[0].cbn1.stats.running_mean[0], m.blocks[0].cbn1.stats.running_mean[0]);
}

}  // namespace
}  // namespace cbn
