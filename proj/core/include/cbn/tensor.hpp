// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a thread-local reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Operations in ops.hpp never
// write into their inputs: every result gets a fresh buffer. When gradient
// recording is enabled and any input requires a gradient, the operation pushes
// a closure onto the calling thread's GradTape; backward() replays the tape in
// reverse order and then clears it.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cbn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  /// Allocates a zero gradient on first use and returns it.
  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return static_cast<bool>(storage_); }

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t numel() const { return storage_->data.size(); }

  std::span<T> data() { return storage_->data; }
  std::span<const T> data() const { return storage_->data; }
  T& operator[](std::size_t i) { return storage_->data[i]; }
  const T& operator[](std::size_t i) const { return storage_->data[i]; }

  /// Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return storage_->grad.size() == storage_->data.size(); }
  std::span<T> grad() { return storage_->grad_buffer(); }
  std::span<const T> grad() const { return storage_->grad; }
  void zero_grad() { storage_->grad.clear(); }

  /// Deep copy of the values; the copy does not require a gradient.
  Tensor detach() const;

  bool shares_storage_with(const Tensor& other) const { return storage_ == other.storage_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

/// Per-thread, per-scalar-type record of executed differentiable operations.
template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void()>;

  static GradTape& current();

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Runs every recorded closure once, newest first, then empties the tape.
  void replay();

 private:
  std::vector<BackwardFn> entries_;
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Suspends tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Seeds d(loss)/d(loss) = 1 and propagates gradients through the tape.
/// Throws ContractError for a non-scalar loss or an empty tape.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace cbn
