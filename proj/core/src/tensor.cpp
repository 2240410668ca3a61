// SPDX-License-Identifier: Apache-2.0
#include "cbn/tensor.hpp"

#include <sstream>

#include "cbn/error.hpp"

namespace cbn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

thread_local int no_grad_depth = 0;

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : storage_(std::make_shared<TensorStorage<T>>()) {
  validate_shape(shape);
  storage_->data.assign(shape_numel(shape), fill);
  storage_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<TensorStorage<T>>()) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(storage_->shape, storage_->data);
}

template <typename T>
GradTape<T>& GradTape<T>::current() {
  thread_local GradTape tape;
  return tape;
}

template <typename T>
void GradTape<T>::replay() {
  // Closures may hold the last references to intermediate buffers; release
  // them as we go so peak memory falls during the backward sweep.
  auto entries = std::move(entries_);
  entries_.clear();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    (*it)();
    *it = nullptr;
  }
}

bool grad_enabled() { return no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  auto& tape = GradTape<T>::current();
  if (tape.empty()) throw ContractError("backward() called with an empty gradient tape");
  auto& g = loss.storage()->grad_buffer();
  g[0] += T{1};
  tape.replay();
}

template class Tensor<float>;
template class Tensor<double>;
template class GradTape<float>;
template class GradTape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace cbn
