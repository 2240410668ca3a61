// SPDX-License-Identifier: Apache-2.0
#include "cbn/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "cbn/error.hpp"

namespace cbn {

namespace blas {

namespace {

template <typename T>
using RowMajorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                               Eigen::OuterStride<>>;
template <typename T>
using RowMajorMutMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, Eigen::OuterStride<>>;

template <typename T>
void gemm_impl(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
               std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const auto em = static_cast<Eigen::Index>(m), en = static_cast<Eigen::Index>(n), ek = static_cast<Eigen::Index>(k);
  RowMajorMutMap<T> cm(c, em, en, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  const RowMajorMap<T> am(a, trans_a ? ek : em, trans_a ? em : ek, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  const RowMajorMap<T> bm(b, trans_b ? en : ek, trans_b ? ek : en, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (beta == T{0}) {
      cm.noalias() = alpha * (lhs * rhs);
    } else {
      if (beta != T{1}) cm *= beta;
      cm.noalias() += alpha * (lhs * rhs);
    }
  };
  if (trans_a && trans_b) {
    run(am.transpose(), bm.transpose());
  } else if (trans_a) {
    run(am.transpose(), bm);
  } else if (trans_b) {
    run(am, bm.transpose());
  } else {
    run(am, bm);
  }
}

}  // namespace

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
                 std::size_t ldc) {
  gemm_impl<float>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                  const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                  std::size_t ldc) {
  gemm_impl<double>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace blas

namespace {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T>
void record(std::function<void()> fn) {
  GradTape<T>::current().record(std::move(fn));
}

template <typename T>
bool wants(const StoragePtr<T>& s) {
  return s && s->requires_grad;
}

// ---------------------------------------------------------------------------
// Broadcasting

// Strides of `small` laid over `out` (0 along broadcast axes). Returns an
// empty vector when `small` cannot broadcast into `out`.
std::vector<std::size_t> broadcast_strides(const Shape& out, const Shape& small) {
  const std::size_t rank = out.size();
  Shape aligned;
  if (small.size() == rank) {
    aligned = small;
  } else if (small.size() == 1 && rank >= 2 && small[0] == out[1]) {
    aligned.assign(rank, 1);
    aligned[1] = small[0];
  } else if (small.size() < rank) {
    aligned = small;
    aligned.resize(rank, 1);
  } else {
    return {};
  }
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    if (aligned[i] == out[i]) {
      strides[i] = aligned[i] == 1 ? 0 : stride;
    } else if (aligned[i] == 1) {
      strides[i] = 0;
    } else {
      return {};
    }
    stride *= aligned[i];
  }
  return strides;
}

bool broadcasts_into(const Shape& out, const Shape& small) {
  return out == small || !broadcast_strides(out, small).empty();
}

// Index of every output element into the broadcast operand.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& small) {
  const auto strides = broadcast_strides(out, small);
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> counter(out.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < total; ++i) {
    index[i] = offset;
    for (std::size_t axis = out.size(); axis-- > 0;) {
      ++counter[axis];
      offset += strides[axis];
      if (counter[axis] < out[axis]) break;
      offset -= strides[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return index;
}

enum class Binary { add, sub, mul };

template <typename T>
Tensor<T> binary(Binary op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  const bool a_full = a.shape() == out_shape;
  const bool b_full = b.shape() == out_shape;
  std::vector<std::size_t> ia, ib;
  if (!a_full) ia = broadcast_index(out_shape, a.shape());
  if (!b_full) ib = broadcast_index(out_shape, b.shape());
  auto ai = [&](std::size_t i) { return a_full ? i : ia[i]; };
  auto bi = [&](std::size_t i) { return b_full ? i : ib[i]; };

  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  const std::size_t n = o.size();
  switch (op) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[ai(i)] + y[bi(i)];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[ai(i)] - y[bi(i)];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[ai(i)] * y[bi(i)];
      break;
  }

  if (tracking<T>({&a, &b})) {
    out.set_requires_grad();
    record<T>([op, sa = a.storage(), sb = b.storage(), so = out.storage(), ia = std::move(ia),
               ib = std::move(ib)] {
      if (so->grad.empty()) return;
      const auto& g = so->grad;
      const std::size_t n = g.size();
      auto a_at = [&](std::size_t i) { return ia.empty() ? i : ia[i]; };
      auto b_at = [&](std::size_t i) { return ib.empty() ? i : ib[i]; };
      if (wants<T>(sa)) {
        auto& ga = sa->grad_buffer();
        if (op == Binary::mul) {
          for (std::size_t i = 0; i < n; ++i) ga[a_at(i)] += g[i] * sb->data[b_at(i)];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[a_at(i)] += g[i];
        }
      }
      if (wants<T>(sb)) {
        auto& gb = sb->grad_buffer();
        if (op == Binary::mul) {
          for (std::size_t i = 0; i < n; ++i) gb[b_at(i)] += g[i] * sa->data[a_at(i)];
        } else if (op == Binary::sub) {
          for (std::size_t i = 0; i < n; ++i) gb[b_at(i)] -= g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[b_at(i)] += g[i];
        }
      }
    });
  }
  return out;
}

enum class Unary { relu, tanh, sigmoid, scale };

template <typename T>
Tensor<T> unary(Unary op, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto in = x.data();
  const std::size_t n = o.size();
  switch (op) {
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
      break;
    case Unary::tanh:
      for (std::size_t i = 0; i < n; ++i) o[i] = std::tanh(in[i]);
      break;
    case Unary::sigmoid:
      for (std::size_t i = 0; i < n; ++i) o[i] = T{1} / (T{1} + std::exp(-in[i]));
      break;
    case Unary::scale:
      for (std::size_t i = 0; i < n; ++i) o[i] = in[i] * factor;
      break;
  }
  if (tracking<T>({&x})) {
    out.set_requires_grad();
    record<T>([op, factor, sx = x.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      const auto& g = so->grad;
      const auto& y = so->data;
      auto& gx = sx->grad_buffer();
      const std::size_t n = g.size();
      switch (op) {
        case Unary::relu:
          // relu'(0) = 0
          for (std::size_t i = 0; i < n; ++i) gx[i] += sx->data[i] > T{0} ? g[i] : T{0};
          break;
        case Unary::tanh:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (T{1} - y[i] * y[i]);
          break;
        case Unary::sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
          break;
        case Unary::scale:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * factor;
          break;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution helpers

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t o, kh, kw;       // kernel
  std::size_t stride, pad;
  std::size_t oh, ow;          // output
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  if (in.size() != 4 || k.size() != 4) {
    throw ShapeError("conv2d expects input [N,C,H,W] and kernel [O,C,kh,kw], got " + shape_str(in) +
                     " and " + shape_str(k));
  }
  if (in[1] != k[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(in) + " vs kernel " + shape_str(k));
  }
  if (stride == 0) throw GeometryError("conv2d stride must be >= 1");
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], stride, pad, 0, 0};
  const std::size_t ph = g.h + 2 * pad;
  const std::size_t pw = g.w + 2 * pad;
  if (g.kh > ph || g.kw > pw) {
    throw GeometryError("conv2d kernel " + shape_str(k) + " larger than padded input " + std::to_string(ph) +
                        "x" + std::to_string(pw));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// Column matrices hold the whole batch: row r of sample s starts at
// col + r * ld + s * col_cols(), with ld = n * col_cols().
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (y < 0 || y >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(y) * g.w;
          // Output columns whose input x = ox*stride + kj - pad lies in [0, w).
          const std::size_t lo = kj >= g.pad ? 0 : (g.pad - kj + g.stride - 1) / g.stride;
          const std::size_t hi = std::min(g.ow, (g.w + g.pad - kj + g.stride - 1) / g.stride);
          std::fill(dst, dst + std::min(lo, g.ow), T{0});
          if (hi > lo) {
            const T* s0 = src + (lo * g.stride + kj - g.pad);
            if (g.stride == 1) {
              std::copy(s0, s0 + (hi - lo), dst + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = s0[(ox - lo) * g.stride];
            }
          }
          if (hi < g.ow) std::fill(dst + std::max(hi, lo), dst + g.ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t ld, T* image) {
  for (std::size_t c = 0; c < g.c; ++c) {
    T* plane = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(y) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (x >= 0 && x < static_cast<long>(g.w)) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

std::string axes_str(std::span<const std::size_t> axes) {
  std::string s = "{";
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(axes[i]);
  }
  return s + "}";
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (a.size() >= b.size() && broadcasts_into(a, b)) return a;
  if (b.size() >= a.size() && broadcasts_into(b, a)) return b;
  throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  blas::gemm<T>(false, false, m, n, k, T{1}, a.data().data(), k, b.data().data(), n, T{0},
                out.data().data(), n);
  if (tracking<T>({&a, &b})) {
    out.set_requires_grad();
    record<T>([m, k, n, sa = a.storage(), sb = b.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      if (wants<T>(sa)) {
        blas::gemm<T>(false, true, m, k, n, T{1}, so->grad.data(), n, sb->data.data(), n, T{1},
                      sa->grad_buffer().data(), k);
      }
      if (wants<T>(sb)) {
        blas::gemm<T>(true, false, k, n, m, T{1}, sa->data.data(), k, so->grad.data(), n, T{1},
                      sb->grad_buffer().data(), n);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1), o = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  Tensor<T> out(Shape{n, o});
  auto y = out.data();
  if (bias.defined()) {
    for (std::size_t r = 0; r < n; ++r) std::copy(bias.data().begin(), bias.data().end(), y.begin() + r * o);
  }
  blas::gemm<T>(false, true, n, o, k, T{1}, x.data().data(), k, weight.data().data(), k,
                bias.defined() ? T{1} : T{0}, y.data(), o);
  if (tracking<T>({&x, &weight, &bias})) {
    out.set_requires_grad();
    record<T>([n, k, o, sx = x.storage(), sw = weight.storage(), sb = bias.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      const T* g = so->grad.data();
      if (wants<T>(sx)) {
        blas::gemm<T>(false, false, n, k, o, T{1}, g, o, sw->data.data(), k, T{1}, sx->grad_buffer().data(), k);
      }
      if (wants<T>(sw)) {
        blas::gemm<T>(true, false, o, k, n, T{1}, g, o, sx->data.data(), k, T{1}, sw->grad_buffer().data(), k);
      }
      if (wants<T>(sb)) {
        auto& gb = sb->grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < o; ++j) gb[j] += g[r * o + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  return conv2d(input, kernel, Tensor<T>(), stride, pad);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const std::size_t ld = g.n * cols;
  const std::size_t in_plane = g.c * g.h * g.w;
  const std::size_t out_plane = g.o * cols;
  Tensor<T> out(Shape{g.n, g.o, g.oh, g.ow});
  const bool track = tracking<T>({&input, &kernel, &bias});

  // One GEMM for the whole batch: [O, rows] x [rows, N*cols] -> [O, N*cols],
  // then scattered into [N, O, cols]. The column matrix is kept for the
  // kernel gradient.
  // Both buffers are fully overwritten, so they skip zero-initialization.
  std::shared_ptr<T[]> columns(new T[rows * ld]);
  const T* x = input.data().data();
  for (std::size_t s = 0; s < g.n; ++s) im2col(g, x + s * in_plane, columns.get() + s * cols, ld);
  const std::unique_ptr<T[]> product(new T[g.o * ld]);
  blas::gemm<T>(false, false, g.o, ld, rows, T{1}, kernel.data().data(), rows, columns.get(), ld, T{0},
                product.get(), ld);
  T* y = out.data().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    for (std::size_t oc = 0; oc < g.o; ++oc) {
      const T* src = product.get() + oc * ld + s * cols;
      T* dst = y + s * out_plane + oc * cols;
      const T b = bias.defined() ? bias[oc] : T{0};
      for (std::size_t j = 0; j < cols; ++j) dst[j] = src[j] + b;
    }
  }

  if (track) {
    out.set_requires_grad();
    record<T>([g, columns, si = input.storage(), sk = kernel.storage(),
               sb = bias.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      const std::size_t ld = g.n * cols;
      const std::size_t in_plane = g.c * g.h * g.w;
      const std::size_t out_plane = g.o * cols;
      const T* gy = so->grad.data();
      // Output gradient regrouped as [O, N*cols].
      std::vector<T> gyt(g.o * ld);
      for (std::size_t s = 0; s < g.n; ++s) {
        for (std::size_t oc = 0; oc < g.o; ++oc) {
          std::copy_n(gy + s * out_plane + oc * cols, cols, gyt.data() + oc * ld + s * cols);
        }
      }
      if (wants<T>(sk)) {
        blas::gemm<T>(false, true, g.o, rows, ld, T{1}, gyt.data(), ld, columns.get(), ld, T{1},
                      sk->grad_buffer().data(), rows);
      }
      if (wants<T>(sb)) {
        auto& gb = sb->grad_buffer();
        for (std::size_t oc = 0; oc < g.o; ++oc) {
          const T* p = gyt.data() + oc * ld;
          T acc{0};
          for (std::size_t j = 0; j < ld; ++j) acc += p[j];
          gb[oc] += acc;
        }
      }
      if (wants<T>(si)) {
        std::vector<T> dcol(rows * ld);
        blas::gemm<T>(true, false, rows, ld, g.o, T{1}, sk->data.data(), rows, gyt.data(), ld, T{0}, dcol.data(),
                      ld);
        T* gx = si->grad_buffer().data();
        for (std::size_t s = 0; s < g.n; ++s) col2im(g, dcol.data() + s * cols, ld, gx + s * in_plane);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(Unary::relu, x, T{1});
}
template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(Unary::tanh, x, T{1});
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(Unary::sigmoid, x, T{1});
}
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(Unary::scale, x, factor);
}
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(Binary::add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(Binary::sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(Binary::mul, a, b);
}

template <typename T>
Tensor<T> elementwise(Elementwise op, std::span<const Tensor<T>> args, T factor) {
  const bool is_binary = op == Elementwise::add || op == Elementwise::mul || op == Elementwise::sub;
  const std::size_t expected = is_binary ? 2 : 1;
  if (args.size() != expected) {
    throw ContractError("elementwise op expects " + std::to_string(expected) + " arguments, got " +
                        std::to_string(args.size()));
  }
  switch (op) {
    case Elementwise::relu: return relu(args[0]);
    case Elementwise::tanh: return tanh(args[0]);
    case Elementwise::sigmoid: return sigmoid(args[0]);
    case Elementwise::scale: return scale(args[0], factor);
    case Elementwise::add: return add(args[0], args[1]);
    case Elementwise::sub: return sub(args[0], args[1]);
    case Elementwise::mul: return mul(args[0], args[1]);
  }
  throw ContractError("unknown elementwise op");
}

template <typename T>
Tensor<T> reduce(Reduction op, const Tensor<T>& x, std::span<const std::size_t> axes) {
  if (axes.empty()) throw DomainError("reduce: empty reduction set");
  std::vector<bool> reduced(x.rank(), false);
  for (auto axis : axes) {
    if (axis >= x.rank() || reduced[axis]) {
      throw DomainError("reduce: axes " + axes_str(axes) + " invalid for shape " + shape_str(x.shape()));
    }
    reduced[axis] = true;
  }
  Shape out_shape = x.shape();
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (reduced[i]) {
      count *= out_shape[i];
      out_shape[i] = 1;
    }
  }
  // Maps each input element to its output slot.
  const auto target = broadcast_index(x.shape(), out_shape);
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto in = x.data();
  const std::size_t n = in.size();
  std::vector<std::size_t> argmax;
  std::vector<T> mean;

  switch (op) {
    case Reduction::sum:
    case Reduction::mean:
      for (std::size_t i = 0; i < n; ++i) o[target[i]] += in[i];
      if (op == Reduction::mean) {
        for (auto& v : o) v /= static_cast<T>(count);
      }
      break;
    case Reduction::var: {
      mean.assign(o.size(), T{0});
      for (std::size_t i = 0; i < n; ++i) mean[target[i]] += in[i];
      for (auto& m : mean) m /= static_cast<T>(count);
      for (std::size_t i = 0; i < n; ++i) {
        const T d = in[i] - mean[target[i]];
        o[target[i]] += d * d;
      }
      for (auto& v : o) v /= static_cast<T>(count);
      break;
    }
    case Reduction::max: {
      argmax.assign(o.size(), std::numeric_limits<std::size_t>::max());
      for (std::size_t i = 0; i < n; ++i) {
        auto& best = argmax[target[i]];
        if (best == std::numeric_limits<std::size_t>::max() || in[i] > in[best]) best = i;
      }
      for (std::size_t j = 0; j < o.size(); ++j) o[j] = in[argmax[j]];
      break;
    }
  }

  if (tracking<T>({&x})) {
    out.set_requires_grad();
    record<T>([op, count, target, argmax = std::move(argmax), mean = std::move(mean), sx = x.storage(),
               so = out.storage()] {
      if (so->grad.empty()) return;
      const auto& g = so->grad;
      auto& gx = sx->grad_buffer();
      const std::size_t n = gx.size();
      switch (op) {
        case Reduction::sum:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[target[i]];
          break;
        case Reduction::mean:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[target[i]] / static_cast<T>(count);
          break;
        case Reduction::var:
          for (std::size_t i = 0; i < n; ++i) {
            gx[i] += g[target[i]] * T{2} * (sx->data[i] - mean[target[i]]) / static_cast<T>(count);
          }
          break;
        case Reduction::max:
          for (std::size_t j = 0; j < argmax.size(); ++j) gx[argmax[j]] += g[j];
          break;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_max_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  std::vector<std::size_t> argmax(nc);
  auto in = x.data();
  for (std::size_t p = 0; p < nc; ++p) {
    std::size_t best = p * hw;
    for (std::size_t j = 1; j < hw; ++j) {
      if (in[p * hw + j] > in[best]) best = p * hw + j;
    }
    argmax[p] = best;
    out[p] = in[best];
  }
  if (tracking<T>({&x})) {
    out.set_requires_grad();
    record<T>([argmax = std::move(argmax), sx = x.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      auto& gx = sx->grad_buffer();
      for (std::size_t p = 0; p < argmax.size(); ++p) gx[argmax[p]] += so->grad[p];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy expects [N,K], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  std::vector<T> probs(n * k);
  auto z = logits.data();
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw IndexError("target " + std::to_string(t) + " outside [0," + std::to_string(k) + ")");
    }
    const T* row = z.data() + r * k;
    const T peak = *std::max_element(row, row + k);
    T denom{0};
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(row[j] - peak);
      denom += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= denom;
    total += -(row[t] - peak - std::log(denom));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  if (tracking<T>({&logits})) {
    out.set_requires_grad();
    std::vector<int> tgt(targets.begin(), targets.end());
    record<T>([n, k, probs = std::move(probs), tgt = std::move(tgt), sl = logits.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      const T g = so->grad[0] / static_cast<T>(n);
      auto& gl = sl->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = static_cast<int>(j) == tgt[r] ? T{1} : T{0};
          gl[r * k + j] += g * (probs[r * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat needs at least one tensor");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw ShapeError("concat extent mismatch: " + shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_stride = out_shape[axis] * inner;

  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + o * chunk, chunk, out.data().begin() + o * out_stride + offset);
    }
    offsets.push_back(offset);
    offset += chunk;
  }

  bool track = false;
  for (const auto& p : parts) track = track || tracking<T>({&p});
  if (track) {
    out.set_requires_grad();
    std::vector<StoragePtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.storage());
    record<T>([outer, inner, axis, out_stride, offsets = std::move(offsets), inputs = std::move(inputs),
               so = out.storage()] {
      if (so->grad.empty()) return;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!wants<T>(inputs[i])) continue;
        auto& gi = inputs[i]->grad_buffer();
        const std::size_t chunk = inputs[i]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = so->grad.data() + o * out_stride + offsets[i];
          T* dst = gi.data() + o * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking<T>({&x})) {
    out.set_requires_grad();
    record<T>([sx = x.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      auto& gx = sx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += so->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t start, std::size_t length) {
  if (x.rank() != 2 || length == 0 || start + length > x.dim(1)) {
    throw ShapeError("slice_columns [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), width = x.dim(1);
  Tensor<T> out(Shape{n, length});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(x.data().begin() + r * width + start, length, out.data().begin() + r * length);
  }
  if (tracking<T>({&x})) {
    out.set_requires_grad();
    record<T>([n, width, start, length, sx = x.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      auto& gx = sx->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < length; ++j) gx[r * width + start + j] += so->grad[r * length + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V,E], got " + shape_str(table.shape()));
  if (ids.empty()) throw ContractError("embedding lookup with no ids");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  Tensor<T> out(Shape{ids.size(), width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[r]) * width, width,
                out.data().begin() + r * width);
  }
  if (tracking<T>({&table})) {
    out.set_requires_grad();
    std::vector<int> rows(ids.begin(), ids.end());
    record<T>([width, rows = std::move(rows), st = table.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      auto& gt = st->grad_buffer();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        T* dst = gt.data() + static_cast<std::size_t>(rows[r]) * width;
        const T* src = so->grad.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || take_a.size() != a.dim(0)) {
    throw ShapeError("select_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) + " with " +
                     std::to_string(take_a.size()) + " selectors");
  }
  const std::size_t row = a.numel() / a.dim(0);
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < take_a.size(); ++r) {
    const auto& src = take_a[r] ? a : b;
    std::copy_n(src.data().begin() + r * row, row, out.data().begin() + r * row);
  }
  if (tracking<T>({&a, &b})) {
    out.set_requires_grad();
    std::vector<std::uint8_t> mask(take_a.begin(), take_a.end());
    record<T>([row, mask = std::move(mask), sa = a.storage(), sb = b.storage(), so = out.storage()] {
      if (so->grad.empty()) return;
      for (std::size_t r = 0; r < mask.size(); ++r) {
        const auto& dst = mask[r] ? sa : sb;
        if (!wants<T>(dst)) continue;
        auto& g = dst->grad_buffer();
        for (std::size_t j = 0; j < row; ++j) g[r * row + j] += so->grad[r * row + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reshape(reduce(Reduction::sum, x, axes), Shape{1});
}

#define CBN_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,       \
                            std::size_t);                                                            \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> tanh(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> elementwise(Elementwise, std::span<const Tensor<T>>, T);                        \
  template Tensor<T> reduce(Reduction, const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                              \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                  \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> slice_columns(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                              \
  template Tensor<T> select_rows(std::span<const std::uint8_t>, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> sum(const Tensor<T>&);

CBN_INSTANTIATE_OPS(float)
CBN_INSTANTIATE_OPS(double)

}  // namespace cbn
