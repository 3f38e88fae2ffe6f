// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Values are immutable once
// produced by an op; only leaves may be mutated (optimizer/EMA updates), and
// only outside of a recording tape. Operations record onto the tape that is
// active on the calling thread (see Tape<T>::Scope); without an active tape
// nothing is recorded and results are plain constants.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace openus {

enum class DType : std::uint8_t { real32 = 0, real64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::real32 : DType::real64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand outside the domain of an operation (log of non-positive, division
/// by zero, non-positive temperature, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A NaN or Inf appeared in a tensor.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> values;
  std::vector<T> grad;  // empty means "no gradient slot"
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::span<T> grad_slot() {
    if (grad.empty()) grad.assign(values->size(), T(0));
    return grad;
  }
};

// Number of non-differentiable points (e.g. max ties) met by ops on this
// thread. grad_check reads it to flag kinks.
std::size_t& kink_counter();

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  static constexpr DType dtype = dtype_of<T>();

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values->size(); }

  std::span<const T> data() const { return *node_->values; }
  /// Writable view of a leaf's values. Shared with every alias of the leaf.
  std::span<T> mutable_data();
  T item() const;
  T operator[](std::size_t i) const { return (*node_->values)[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void clear_grad() const { node_->grad.clear(); }

  /// Constant sharing this tensor's values; never records.
  Tensor detach() const;
  /// New leaf sharing values but with its own gradient slot. Lets concurrent
  /// tapes differentiate w.r.t. the same parameters without sharing grads.
  Tensor alias_leaf() const;
  /// Deep copy as a leaf.
  Tensor clone(bool requires_grad) const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  /// Makes a tape the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Scope() { active_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { clear(); }

  static Tape* active() { return active_; }

  std::size_t size() const { return nodes_.size(); }
  void record(std::shared_ptr<detail::Node<T>> node);

  /// Seeds d(loss)=1 and runs every recorded node once, newest first, from
  /// the loss down. Leaves accumulate gradients; the tape is cleared.
  void backward(const Tensor<T>& loss);
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  static inline thread_local Tape* active_ = nullptr;
};

/// Backward on the tape active on this thread.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace openus
