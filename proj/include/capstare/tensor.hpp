// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with eager reverse-mode differentiation.
//
// Broadcasting rules for binary elementwise ops (add, sub, mul):
//   * identical shapes, or
//   * one operand holds a single element (scalar broadcast), or
//   * one operand's shape equals the trailing dimensions of the other
//     (e.g. [B, T, D] with [D] or [T, D]).
// Nothing else broadcasts; mismatches raise ShapeError.
//
// Gradient policy: every op whose inputs require gradients records a node.
// backward() walks the graph once, fills .grad on every reachable tensor that
// requires it and then releases the graph links. Calling backward() a second
// time on the same graph, or while a reachable leaf still holds a gradient
// from an earlier pass, raises ContractError. Clear leaves with zero_grad().
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capstare/errors.hpp"
#include "capstare/random.hpp"

namespace capstare {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialised on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
  bool wants_grad() const { return requires_grad && !released; }
};

bool grad_enabled() noexcept;

/// Adds to the innermost active FlopCounter, if any.
void add_flops(std::uint64_t n) noexcept;

/// Builds the result of a differentiable op. When gradients are enabled and
/// some input requires them, `backward` is recorded; it receives the output
/// node with its gradient populated and must accumulate into the inputs that
/// want a gradient.
template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> value,
                       const std::vector<BasicTensor<T>>& inputs,
                       std::function<void(Node<T>&)> backward);

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values);
  explicit BasicTensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(const Shape& shape);
  static BasicTensor ones(const Shape& shape);
  static BasicTensor full(const Shape& shape, T value);
  static BasicTensor scalar(T value);
  static BasicTensor randn(const Shape& shape, RandomSource& rng, T stddev = T(1));
  static BasicTensor uniform(const Shape& shape, RandomSource& rng, T lo, T hi);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node().value.size()); }

  std::span<const T> values() const { return node().value; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return defined() && node_->requires_grad; }
  /// Only leaves may toggle gradient tracking.
  BasicTensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node().leaf; }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// In-place access to a leaf's values (optimiser updates, perturbation in
  /// gradient checks). Throws ContractError on non-leaf tensors.
  std::span<T> mutable_values();

  void backward() const;

  /// Copy of the values with no gradient history.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node().value.begin(), node().value.end());
    return BasicTensor<U>(shape(), std::move(out));
  }

  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

 private:
  detail::Node<T>& node() const;

  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts floating-point operations executed by tensor ops on this thread
/// while alive. Conventions: matmul/conv multiply-accumulate = 2, one per
/// element for elementwise ops, additions and reductions, 4 per element for
/// softmax (shift, exp, accumulate, normalise). Shape-only ops are free.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t count() const noexcept { return count_; }
  void add(std::uint64_t n) noexcept { count_ += n; }

 private:
  std::uint64_t count_ = 0;
  FlopCounter* previous_;
};

// ---- elementwise ----------------------------------------------------------
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);
template <typename T> BasicTensor<T> neg(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& x);
/// Exact GELU: x * Phi(x) with the Gaussian CDF evaluated through erf.
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);

// ---- linear algebra -------------------------------------------------------
/// Matrix product. `b` of rank 2 broadcasts over the leading dimensions of
/// `a`; otherwise leading dimensions must match exactly. Rank-1 operands are
/// promoted to a row (a) or column (b) and the unit axis is dropped again.
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// 2-D convolution on [N, Cin, H, W] with weight [Cout, Cin, kh, kw] and
/// optional bias [Cout]; zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int padding);

// ---- shape ----------------------------------------------------------------
/// One extent may be -1 and is inferred.
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
/// Swaps the last two axes.
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& axes);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);
template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int axis, std::int64_t start, std::int64_t length);
/// narrow to one index and drop the axis.
template <typename T> BasicTensor<T> select(const BasicTensor<T>& x, int axis, std::int64_t index);

// ---- reductions (accumulated in double) ------------------------------------
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, int axis);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, int axis);

/// Numerically stable softmax (max-shifted) along `axis`.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, int axis);

/// Normalises a possibly negative axis index; throws ShapeError when out of range.
int normalize_axis(int axis, int rank);

}  // namespace capstare
