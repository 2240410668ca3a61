// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. All functions are defined for float and
// double; every result owns a fresh buffer.
//
// Broadcasting (add/sub/mul) is deliberately narrow. The smaller operand must
// either have the same rank with extents equal to the output's or 1, be a
// lower-rank prefix of the output shape (implicit trailing 1s, so [N,C]
// broadcasts over [N,C,H,W]), or be a vector matching axis 1 (a per-channel
// or per-feature vector over [N,C,...]).
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cbn/tensor.hpp"

namespace cbn {

/// [M,K] x [K,N] -> [M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[N,K] * weight[O,K]^T + bias[O]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Cross-correlation of input[N,C,H,W] with kernel[O,C,kh,kw]; output extent
/// is (H + 2*pad - kh) / stride + 1 (floor). `bias` ([O]) may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);

enum class Elementwise { relu, add, mul, sub, tanh, sigmoid, scale };

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// Dispatching form: unary ops take one tensor, binary ops two; `scale` uses `factor`.
template <typename T>
Tensor<T> elementwise(Elementwise op, std::span<const Tensor<T>> args, T factor = T{1});

/// Output shape of a broadcasting binary op; throws ShapeError.
Shape broadcast_shape(const Shape& a, const Shape& b);

enum class Reduction { mean, var, sum, max };

/// Reduces over `axes`, keeping them as extent-1 dimensions. `var` is the
/// population estimator; `max` routes its gradient to the first argmax.
template <typename T>
Tensor<T> reduce(Reduction op, const Tensor<T>& x, std::span<const std::size_t> axes);
template <typename T>
Tensor<T> reduce(Reduction op, const Tensor<T>& x, std::initializer_list<std::size_t> axes) {
  return reduce(op, x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

/// [N,C,H,W] -> [N,C]; gradient goes to the first spatial argmax.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x);

/// Mean over rows of -log softmax(logits)[target]; returns shape [1].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Columns [start, start+length) of a 2-D tensor.
template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t start, std::size_t length);

/// Rows of table[V,E] gathered by id -> [ids.size(), E].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Row-wise choice between two [N,...] tensors: row n comes from `a` where
/// take_a[n] != 0, otherwise from `b`.
template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b);

/// Sum of all elements -> [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

namespace blas {
/// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);
}  // namespace blas

}  // namespace cbn
