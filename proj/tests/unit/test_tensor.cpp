// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "cbn/error.hpp"
#include "cbn/ops.hpp"
#include "oracles.hpp"

namespace cbn {
namespace {

using testing::grad_check;
using testing::random_tensor;

Tensor<double> T2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, std::move(v)); }

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const auto a = T2(2, 2, {3, -1, 2, 5});
  const auto out = matmul(T2(2, 2, {1, 0, 0, 1}), a);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), std::vector<double>({3, -1, 2, 5}));
}

TEST(Matmul, HandExpansion) {
  const auto out = matmul(T2(2, 2, {1, 2, 3, 4}), T2(2, 1, {0, 1}));
  ASSERT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out[0], 2.0);
  EXPECT_EQ(out[1], 4.0);
}

TEST(Matmul, ZeroMatrixGivesZeros) {
  std::mt19937_64 rng(1);
  const auto out = matmul(Tensor<double>(Shape{3, 4}), random_tensor({4, 5}, rng));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesLoopReference) {
  std::mt19937_64 rng(2);
  const auto a = random_tensor({7, 13}, rng);
  const auto b = random_tensor({13, 5}, rng);
  const auto out = matmul(a, b);
  const auto ref = testing::naive_matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, 7, 13, 5);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2x3]"), std::string::npos) << what;
    EXPECT_NE(what.find("[4x2]"), std::string::npos) << what;
  }
}

TEST(Matmul, Gradient) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  const auto w = random_tensor({3, 2}, rng);
  const auto r = grad_check({a, b}, [&] { return sum(mul(matmul(a, b), w)); });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Conv2d, UnitPointwiseKernelIsIdentity) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 1, 5, 4}, rng);
  const auto out = conv2d(x, Tensor<double>(Shape{1, 1, 1, 1}, 1.0), 1, 0);
  ASSERT_EQ(out.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(Conv2d, AllOnesSumsToNine) {
  const auto out = conv2d(Tensor<double>(Shape{1, 1, 3, 3}, 1.0), Tensor<double>(Shape{1, 1, 3, 3}, 1.0), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(out[0], 9.0);
}

TEST(Conv2d, SlidingWindowOracle) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({1, 1, 4, 4}, rng);
  const auto k = random_tensor({1, 1, 3, 3}, rng);
  const auto out = conv2d(x, k, 1, 0);
  const auto ref = testing::naive_conv2d({x.data().begin(), x.data().end()}, x.shape(), {k.data().begin(), k.data().end()},
                                         k.shape(), 1, 0);
  ASSERT_EQ(out.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
}

TEST(Conv2d, MatchesNaiveReferenceOnAllSmallShapes) {
  std::mt19937_64 rng(6);
  std::size_t cases = 0;
  for (std::size_t n = 1; n <= 2; ++n)
    for (std::size_t c = 1; c <= 3; ++c)
      for (std::size_t h = 1; h <= 6; ++h)
        for (std::size_t w = 1; w <= 6; ++w)
          for (std::size_t kh : {1, 3})
            for (std::size_t stride : {1, 2})
              for (std::size_t pad : {0, 1}) {
                if (h + 2 * pad < kh || w + 2 * pad < kh) continue;
                const std::size_t o = 1 + (h + w) % 3;
                const auto x = random_tensor({n, c, h, w}, rng);
                const auto k = random_tensor({o, c, kh, kh}, rng);
                const auto out = conv2d(x, k, stride, pad);
                const auto ref = testing::naive_conv2d({x.data().begin(), x.data().end()}, x.shape(),
                                                       {k.data().begin(), k.data().end()}, k.shape(), stride, pad);
                ASSERT_EQ(out.numel(), ref.size());
                for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-12);
                ++cases;
              }
  EXPECT_GT(cases, 500u);
}

TEST(Conv2d, BiasIsAddedPerOutputChannel) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({2, 2, 4, 4}, rng);
  const auto k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor<double> bias(Shape{3}, std::vector<double>{1, -2, 0.5});
  const auto plain = conv2d(x, k, 1, 1);
  const auto biased = conv2d(x, k, bias, 1, 1);
  for (std::size_t i = 0; i < plain.numel(); ++i) {
    const std::size_t channel = (i / 16) % 3;
    EXPECT_NEAR(biased[i] - plain[i], bias[channel], 1e-12);
  }
}

TEST(Conv2d, BadGeometryThrows) {
  EXPECT_THROW(conv2d(Tensor<double>(Shape{1, 1, 2, 2}), Tensor<double>(Shape{1, 1, 3, 3}), 1, 0), GeometryError);
  EXPECT_THROW(conv2d(Tensor<double>(Shape{1, 1, 4, 4}), Tensor<double>(Shape{1, 1, 3, 3}), 0, 0), GeometryError);
}

TEST(Conv2d, Gradient) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 2, 5, 5}, rng);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  const auto w = random_tensor({2, 3, 3, 3}, rng);
  const auto r = grad_check({x, k, b}, [&] { return sum(mul(conv2d(x, k, b, 2, 1), w)); });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Elementwise, ScalarExamples) {
  const Tensor<double> x(Shape{2}, std::vector<double>{-1, 2});
  const auto r = relu(x);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  const Tensor<double> zero(Shape{1}, 0.0);
  EXPECT_EQ(sigmoid(zero)[0], 0.5);
  EXPECT_EQ(tanh(zero)[0], 0.0);
  const auto s = add(Tensor<double>(Shape{2}, std::vector<double>{1, 2}), Tensor<double>(Shape{2}, std::vector<double>{3, 4}));
  EXPECT_EQ(s[0], 4.0);
  EXPECT_EQ(s[1], 6.0);
}

TEST(Elementwise, ReluGradientAtZeroIsZero) {
  Tensor<double> x(Shape{3}, std::vector<double>{0.0, 1.0, -1.0});
  x.set_requires_grad();
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Elementwise, DispatchMatchesNamedFunctions) {
  std::mt19937_64 rng(9);
  const auto a = random_tensor({2, 3}, rng);
  const auto b = random_tensor({2, 3}, rng);
  const std::vector<Tensor<double>> two = {a, b};
  const std::vector<Tensor<double>> one = {a};
  EXPECT_EQ(elementwise<double>(Elementwise::sub, two)[4], sub(a, b)[4]);
  EXPECT_EQ(elementwise<double>(Elementwise::scale, one, 3.0)[1], 3.0 * a[1]);
  EXPECT_THROW(elementwise<double>(Elementwise::add, one), ContractError);
}

TEST(Elementwise, BroadcastRules) {
  std::mt19937_64 rng(10);
  const auto x = random_tensor({2, 3, 2, 2}, rng);
  const auto per_sample = random_tensor({2, 3}, rng);
  const auto per_channel = random_tensor({3}, rng);
  const auto a = add(x, per_sample);
  const auto b = mul(x, per_channel);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t i = (n * 3 + c) * 4 + s;
        EXPECT_EQ(a[i], x[i] + per_sample[n * 3 + c]);
        EXPECT_EQ(b[i], x[i] * per_channel[c]);
      }
  EXPECT_THROW(add(x, random_tensor({5}, rng)), ShapeError);
  EXPECT_THROW(add(x, random_tensor({2, 2}, rng)), ShapeError);
}

TEST(Elementwise, OutputsNeverAliasInputs) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({2, 3}, rng);
  const auto before = std::vector<double>(x.data().begin(), x.data().end());
  auto y = add(x, random_tensor({3}, rng));
  auto z = relu(x);
  auto w = reshape(x, {3, 2});
  for (auto& v : y.data()) v = 100;
  for (auto& v : z.data()) v = 100;
  for (auto& v : w.data()) v = 100;
  EXPECT_EQ(std::vector<double>(x.data().begin(), x.data().end()), before);
}

TEST(Elementwise, Gradients) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto c = random_tensor({3}, rng);
  auto s = random_tensor({2, 3}, rng);
  const auto w = random_tensor({2, 3, 2, 2}, rng);
  const auto r = grad_check({x, c, s}, [&] {
    auto y = add(mul(tanh(x), c), sigmoid(s));
    y = sub(y, scale(mul(x, x), 0.3));
    return sum(mul(y, w));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Reduce, Examples) {
  const Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(reduce(Reduction::mean, x, {0})[0], 2.0);
  EXPECT_DOUBLE_EQ(reduce(Reduction::var, x, {0})[0], 2.0 / 3.0);
  EXPECT_EQ(reduce(Reduction::var, Tensor<double>(Shape{3}, 1.0), {0})[0], 0.0);
  EXPECT_EQ(reduce(Reduction::sum, x, {0})[0], 6.0);
  EXPECT_EQ(reduce(Reduction::max, x, {0})[0], 3.0);
}

TEST(Reduce, KeepsAxesAndRejectsBadSets) {
  std::mt19937_64 rng(13);
  const auto x = random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(reduce(Reduction::mean, x, {0, 2}).shape(), (Shape{1, 3, 1}));
  EXPECT_THROW(reduce(Reduction::mean, x, std::span<const std::size_t>{}), DomainError);
  EXPECT_THROW(reduce(Reduction::mean, x, {0, 0}), DomainError);
  EXPECT_THROW(reduce(Reduction::mean, x, {3}), DomainError);
}

TEST(Reduce, Gradients) {
  std::mt19937_64 rng(14);
  auto x = random_tensor({2, 3, 4}, rng);
  const auto w = random_tensor({2, 1, 4}, rng);
  for (auto op : {Reduction::mean, Reduction::var, Reduction::sum, Reduction::max}) {
    const auto r = grad_check({x}, [&] { return sum(mul(reduce(op, x, {1}), w)); });
    EXPECT_LT(r.max_relative_error, 1e-4) << static_cast<int>(op) << ' ' << r.worst;
  }
}

TEST(GlobalMaxPool, Examples) {
  EXPECT_EQ(global_max_pool(Tensor<double>(Shape{1, 1, 3, 3}, 2.5))[0], 2.5);
  Tensor<double> spike(Shape{1, 1, 3, 3}, 0.0);
  spike[4] = 5.0;
  EXPECT_EQ(global_max_pool(spike)[0], 5.0);
}

TEST(GlobalMaxPool, GradientOnlyAtArgmax) {
  std::mt19937_64 rng(15);
  auto x = random_tensor({2, 2, 3, 3}, rng);
  x.set_requires_grad();
  backward(sum(global_max_pool(x)));
  for (std::size_t map = 0; map < 4; ++map) {
    const auto begin = x.data().begin() + static_cast<std::ptrdiff_t>(map * 9);
    const std::size_t arg = static_cast<std::size_t>(std::max_element(begin, begin + 9) - begin);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(x.grad()[map * 9 + i], i == arg ? 1.0 : 0.0);
  }
  const auto r = grad_check({x}, [&] { return sum(mul(global_max_pool(x), random_tensor({2, 2}, rng = std::mt19937_64(1)))); });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(GlobalMaxPool, TiesGoToFirstArgmax) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  backward(sum(global_max_pool(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>({1, 0, 0, 0}));
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  const std::vector<int> t = {2};
  EXPECT_NEAR(softmax_cross_entropy(Tensor<double>(Shape{1, 4}, 0.0), t).item(), std::log(4.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, LargeMarginGoesToZero) {
  Tensor<double> logits(Shape{1, 3}, 0.0);
  logits[1] = 1000.0;
  const std::vector<int> t = {1};
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, DirectFormula) {
  const Tensor<double> logits(Shape{2, 3}, std::vector<double>{0.5, -1.0, 2.0, 3.0, 0.0, -2.0});
  const std::vector<int> t = {0, 1};
  auto nll = [](double a, double b, double c, double target) {
    return -(target - std::log(std::exp(a) + std::exp(b) + std::exp(c)));
  };
  const double expected = 0.5 * (nll(0.5, -1.0, 2.0, 0.5) + nll(3.0, 0.0, -2.0, 0.0));
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), expected, 1e-6);
}

TEST(SoftmaxCrossEntropy, TargetOutOfRange) {
  const std::vector<int> t = {3};
  EXPECT_THROW(softmax_cross_entropy(Tensor<double>(Shape{1, 3}), t), IndexError);
}

TEST(SoftmaxCrossEntropy, Gradient) {
  std::mt19937_64 rng(16);
  auto logits = random_tensor({4, 5}, rng, 3.0);
  const std::vector<int> t = {0, 4, 2, 2};
  const auto r = grad_check({logits}, [&] { return softmax_cross_entropy(logits, t); });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>({1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad();
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>({2, 4}));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(backward(relu(x)), ContractError);
  GradTape<double>::current().clear();
}

TEST(Backward, TapeIsConsumed) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad();
  backward(sum(x));
  EXPECT_TRUE(GradTape<double>::current().empty());
}

TEST(Backward, CompositeGraph) {
  std::mt19937_64 rng(17);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto k = random_tensor({2, 5, 3, 3}, rng);
  auto table = random_tensor({6, 4}, rng);
  auto wl = random_tensor({3, 2}, rng);
  const std::vector<int> ids = {1, 5};
  const std::vector<int> targets = {2, 0};
  const auto r = grad_check({x, k, table, wl}, [&] {
    const std::vector<Tensor<double>> parts = {x, Tensor<double>(Shape{2, 2, 4, 4}, 0.25)};
    auto h = relu(conv2d(concat<double>(parts, 1), k, 1, 1));
    auto pooled = global_max_pool(h);
    auto e = slice_columns(embedding(table, ids), 1, 2);
    auto z = add(mul(pooled, e), reshape(reduce(Reduction::mean, h, {2, 3}), Shape{2, 2}));
    auto logits = linear(z, wl, Tensor<double>());
    return softmax_cross_entropy(logits, targets);
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Ops, RemainingGradients) {
  std::mt19937_64 rng(18);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto w = random_tensor({2, 4}, rng);
  auto bias = random_tensor({2}, rng);
  const std::vector<std::uint8_t> take = {1, 0, 1};
  const auto r = grad_check({a, b, w, bias}, [&] {
    auto y = linear(select_rows<double>(take, a, b), w, bias);
    return sum(mul(reshape(y, {6}), Tensor<double>(Shape{6}, std::vector<double>{1, -2, 3, 0.5, 2, -1})));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Ops, NoGradGuardRecordsNothing) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad();
  {
    NoGradGuard guard;
    (void)sum(relu(x));
    EXPECT_TRUE(GradTape<double>::current().empty());
  }
}

TEST(Ops, Deterministic) {
  std::mt19937_64 rng(19);
  const auto x = random_tensor({2, 3, 6, 6}, rng);
  const auto k = random_tensor({4, 3, 3, 3}, rng);
  const auto a = conv2d(Tensor<float>(x.shape(), std::vector<float>(x.data().begin(), x.data().end())),
                        Tensor<float>(k.shape(), std::vector<float>(k.data().begin(), k.data().end())), 1, 1);
  const auto b = conv2d(Tensor<float>(x.shape(), std::vector<float>(x.data().begin(), x.data().end())),
                        Tensor<float>(k.shape(), std::vector<float>(k.data().begin(), k.data().end())), 1, 1);
  EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)));
}

}  // namespace
}  // namespace cbn
