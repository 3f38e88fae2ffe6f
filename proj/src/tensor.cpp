// SPDX-License-Identifier: Apache-2.0
#include "openus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace openus {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
std::size_t& kink_counter() {
  static thread_local std::size_t counter = 0;
  return counter;
}
}  // namespace detail

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
}

template <typename T>
void require_finite(std::span<const T> values, const char* what) {
  for (T v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  require_finite<T>(values, "tensor construction");
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->values = std::make_shared<std::vector<T>>(std::move(values));
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  std::vector<T> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->leaf) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return *node_->values;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*node_->values)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = node_->shape;
  n->values = node_->values;
  return from_node(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::alias_leaf() const {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = node_->shape;
  n->values = node_->values;
  n->requires_grad = node_->requires_grad;
  return from_node(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, *node_->values, requires_grad);
}

template <typename T>
void Tape<T>::record(std::shared_ptr<detail::Node<T>> node) {
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss");
  const auto& target = loss.node();
  auto it = std::find(nodes_.rbegin(), nodes_.rend(), target);
  if (it == nodes_.rend()) throw std::logic_error("loss was not produced on this tape");
  const std::size_t start = static_cast<std::size_t>(std::distance(it, nodes_.rend())) - 1;

  target->grad_slot()[0] += T(1);
  for (std::size_t i = start + 1; i-- > 0;) {
    auto& node = *nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
  clear();
}

template <typename T>
void Tape<T>::clear() {
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  nodes_.clear();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw std::logic_error("backward() without an active tape");
  tape->backward(loss);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace openus
