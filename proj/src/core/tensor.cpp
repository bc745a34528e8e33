// SPDX-License-Identifier: Apache-2.0
#include "capstare/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace capstare {

namespace {

thread_local bool t_grad_enabled = true;
thread_local FlopCounter* t_flop_counter = nullptr;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e < 1) throw ShapeError("invalid shape " + shape_str(shape) + ": extents must be >= 1");
  }
}

template <typename T>
void require_defined(const BasicTensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// Broadcast bookkeeping for binary elementwise ops: `big` provides the output
// shape, `small` repeats with period small_n.
struct Broadcast {
  bool a_is_big;
  std::int64_t small_n;
  Shape out;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T>
Broadcast plan_broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return {true, b.numel(), a.shape()};
  if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) return {true, b.numel(), a.shape()};
  if (a.numel() == 1 || is_suffix(a.shape(), b.shape())) return {false, a.numel(), b.shape()};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                   shape_str(b.shape()));
}

template <typename T, typename Fwd, typename DA, typename DB>
BasicTensor<T> binary_op(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, Fwd fwd,
                         DA da, DB db) {
  const Broadcast plan = plan_broadcast(a, b, name);
  const auto av = a.values();
  const auto bv = b.values();
  const std::int64_t n = shape_numel(plan.out);
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(av[i % an], bv[i % bn]);
  detail::add_flops(static_cast<std::uint64_t>(n));
  return detail::make_op<T>(plan.out, std::move(out), {a, b}, [da, db](detail::Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto n = static_cast<std::int64_t>(self.grad.size());
    const auto an = static_cast<std::int64_t>(na.value.size());
    const auto bn = static_cast<std::int64_t>(nb.value.size());
    if (na.wants_grad()) {
      auto g = na.grad_buffer();
      for (std::int64_t i = 0; i < n; ++i)
        g[i % an] += self.grad[i] * da(na.value[i % an], nb.value[i % bn]);
    }
    if (nb.wants_grad()) {
      auto g = nb.grad_buffer();
      for (std::int64_t i = 0; i < n; ++i)
        g[i % bn] += self.grad[i] * db(na.value[i % an], nb.value[i % bn]);
    }
  });
}

// dy/dx expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary_op(const BasicTensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  require_defined(x, name);
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  detail::add_flops(xv.size());
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [deriv](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(nx.value[i], self.value[i]);
  });
}

// [outer, n, inner] decomposition around an axis.
struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

namespace detail {

bool grad_enabled() noexcept { return t_grad_enabled; }

void add_flops(std::uint64_t n) noexcept {
  if (t_flop_counter) t_flop_counter->add(n);
}

template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> value, const std::vector<BasicTensor<T>>& inputs,
                       std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs)
      if (in.defined() && in.node_ptr()->wants_grad()) track = true;
  }
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

FlopCounter::FlopCounter() : previous_(t_flop_counter) { t_flop_counter = this; }
FlopCounter::~FlopCounter() {
  t_flop_counter = previous_;
  if (previous_) previous_->add(count_);
}

// ---- BasicTensor ------------------------------------------------------------

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::ones(const Shape& shape) {
  return full(shape, T(1));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value) {
  check_shape(shape);
  return BasicTensor(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::randn(const Shape& shape, RandomSource& rng, T stddev) {
  check_shape(shape);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal()) * stddev;
  return BasicTensor(shape, std::move(v));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uniform(const Shape& shape, RandomSource& rng, T lo, T hi) {
  check_shape(shape);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor(shape, std::move(v));
}

template <typename T>
detail::Node<T>& BasicTensor<T>::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return node().shape;
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
  return shape()[normalize_axis(axis, rank())];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at(): index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto ix : index) {
    if (ix < 0 || ix >= s[i]) throw ShapeError("at(): index out of range");
    flat = flat * s[i] + ix;
    ++i;
  }
  return node().value[flat];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  if (!node().leaf) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  return node().grad_buffer();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  node().grad.clear();
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  if (!node().leaf) throw ContractError("mutable_values on a non-leaf tensor");
  return node_->value;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node().value);
}

template <typename T>
void BasicTensor<T>::backward() const {
  auto& root = node();
  if (root.value.size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  if (root.released) throw ContractError("backward() called twice on the same graph");
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodeT* child = n->inputs[next++].get();
      if (child->wants_grad() && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) {
    if (n->leaf && !n->grad.empty())
      throw ContractError("backward() with a stale gradient on a leaf; call zero_grad() first");
    if (!n->leaf) n->grad.clear();
  }

  root.grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->leaf || !n->backward) continue;
    n->grad_buffer();
    n->backward(*n);
  }
  for (NodeT* n : order) {
    if (n->leaf) continue;
    n->inputs.clear();
    n->backward = nullptr;
    n->released = true;
  }
}

// ---- elementwise --------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary_op(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  return unary_op(
      x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary_op(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary_op(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return unary_op(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary_op(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

// ---- matmul -------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a_in, const BasicTensor<T>& b_in) {
  require_defined(a_in, "matmul");
  require_defined(b_in, "matmul");
  const bool a_vec = a_in.rank() == 1;
  const bool b_vec = b_in.rank() == 1;
  if (a_in.rank() == 0 || b_in.rank() == 0) throw ShapeError("matmul: rank-0 operand");
  BasicTensor<T> a = a_vec ? reshape(a_in, {1, a_in.dim(0)}) : a_in;
  BasicTensor<T> b = b_vec ? reshape(b_in, {b_in.dim(0), 1}) : b_in;

  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as.back();
  const std::int64_t kb = bs[bs.size() - 2];
  const std::int64_t n = bs.back();
  if (k != kb)
    throw ShapeError("matmul: inner extents differ, " + shape_str(as) + " x " + shape_str(bs));

  const bool shared_b = bs.size() == 2;
  std::int64_t batch = 1;
  Shape out_shape(as.begin(), as.end() - 2);
  if (shared_b) {
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  } else {
    if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))
      throw ShapeError("matmul: batch dimensions differ, " + shape_str(as) + " x " + shape_str(bs));
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  }
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  if (shared_b) {
    MapMat<T>(out.data(), batch * m, n).noalias() = CMapMat<T>(ap, batch * m, k) * CMapMat<T>(bp, k, n);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      MapMat<T>(out.data() + i * m * n, m, n).noalias() =
          CMapMat<T>(ap + i * m * k, m, k) * CMapMat<T>(bp + i * k * n, k, n);
    }
  }
  detail::add_flops(static_cast<std::uint64_t>(2 * batch * m * n * k));

  auto result = detail::make_op<T>(
      out_shape, std::move(out), {a, b}, [batch, m, k, n, shared_b](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const T* g = self.grad.data();
        if (shared_b) {
          CMapMat<T> G(g, batch * m, n);
          if (na.wants_grad())
            MapMat<T>(na.grad_buffer().data(), batch * m, k).noalias() +=
                G * CMapMat<T>(nb.value.data(), k, n).transpose();
          if (nb.wants_grad())
            MapMat<T>(nb.grad_buffer().data(), k, n).noalias() +=
                CMapMat<T>(na.value.data(), batch * m, k).transpose() * G;
          return;
        }
        for (std::int64_t i = 0; i < batch; ++i) {
          CMapMat<T> G(g + i * m * n, m, n);
          if (na.wants_grad())
            MapMat<T>(na.grad_buffer().data() + i * m * k, m, k).noalias() +=
                G * CMapMat<T>(nb.value.data() + i * k * n, k, n).transpose();
          if (nb.wants_grad())
            MapMat<T>(nb.grad_buffer().data() + i * k * n, k, n).noalias() +=
                CMapMat<T>(na.value.data() + i * m * k, m, k).transpose() * G;
        }
      });

  if (a_vec || b_vec) {
    Shape s = result.shape();
    if (b_vec) s.pop_back();
    if (a_vec) s.erase(s.end() - (b_vec ? 1 : 2));
    return reshape(result, s);
  }
  return result;
}

// ---- conv2d ---------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      int stride, int padding) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d: expected [N,C,H,W] input and [Co,Ci,kh,kw] weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  const std::int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: output would be empty");

  const std::int64_t rows = cin * kh * kw;
  const std::int64_t cols_n = batch * ho * wo;
  const std::int64_t plane = ho * wo;

  // im2col: [cin*kh*kw, batch*ho*wo]
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * cols_n), T(0));
  const T* xv = x.values().data();
  for (std::int64_t c = 0; c < cin; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* row = cols->data() + ((c * kh + ki) * kw + kj) * cols_n;
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* src = xv + (b * cin + c) * h * w;
          T* dst = row + b * plane;
          for (std::int64_t oi = 0; oi < ho; ++oi) {
            const std::int64_t ii = oi * stride - padding + ki;
            if (ii < 0 || ii >= h) continue;
            for (std::int64_t oj = 0; oj < wo; ++oj) {
              const std::int64_t jj = oj * stride - padding + kj;
              if (jj >= 0 && jj < w) dst[oi * wo + oj] = src[ii * w + jj];
            }
          }
        }
      }

  std::vector<T> prod(static_cast<std::size_t>(cout * cols_n));
  MapMat<T>(prod.data(), cout, cols_n).noalias() =
      CMapMat<T>(weight.values().data(), cout, rows) * CMapMat<T>(cols->data(), rows, cols_n);

  std::vector<T> out(static_cast<std::size_t>(batch * cout * plane));
  const T* bv = has_bias ? bias.values().data() : nullptr;
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* src = prod.data() + co * cols_n + b * plane;
      T* dst = out.data() + (b * cout + co) * plane;
      const T add = bv ? bv[co] : T(0);
      for (std::int64_t p = 0; p < plane; ++p) dst[p] = src[p] + add;
    }
  detail::add_flops(static_cast<std::uint64_t>(2 * cout * rows * cols_n + (has_bias ? cout * cols_n : 0)));

  std::vector<BasicTensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<T>(
      {batch, cout, ho, wo}, std::move(out), inputs,
      [=](detail::Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        // Gradient rearranged to [cout, batch*plane].
        std::vector<T> g(static_cast<std::size_t>(cout * cols_n));
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t co = 0; co < cout; ++co)
            std::copy_n(self.grad.data() + (b * cout + co) * plane, plane, g.data() + co * cols_n + b * plane);
        CMapMat<T> G(g.data(), cout, cols_n);
        if (has_bias && self.inputs[2]->wants_grad()) {
          auto gb = self.inputs[2]->grad_buffer();
          for (std::int64_t co = 0; co < cout; ++co) {
            double s = 0;
            for (std::int64_t p = 0; p < cols_n; ++p) s += g[co * cols_n + p];
            gb[co] += static_cast<T>(s);
          }
        }
        if (nw.wants_grad())
          MapMat<T>(nw.grad_buffer().data(), cout, rows).noalias() +=
              G * CMapMat<T>(cols->data(), rows, cols_n).transpose();
        if (nx.wants_grad()) {
          RowMat<T> dcols = CMapMat<T>(nw.value.data(), cout, rows).transpose() * G;
          auto gx = nx.grad_buffer();
          for (std::int64_t c = 0; c < cin; ++c)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* row = dcols.data() + ((c * kh + ki) * kw + kj) * cols_n;
                for (std::int64_t b = 0; b < batch; ++b) {
                  T* dst = gx.data() + (b * cin + c) * h * w;
                  const T* src = row + b * plane;
                  for (std::int64_t oi = 0; oi < ho; ++oi) {
                    const std::int64_t ii = oi * stride - padding + ki;
                    if (ii < 0 || ii >= h) continue;
                    for (std::int64_t oj = 0; oj < wo; ++oj) {
                      const std::int64_t jj = oj * stride - padding + kj;
                      if (jj >= 0 && jj < w) dst[ii * w + jj] += src[oi * wo + oj];
                    }
                  }
                }
              }
        }
      });
}

// ---- shape ops --------------------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  int infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
      infer = static_cast<int>(i);
    } else {
      if (shape[i] < 1) throw ShapeError("reshape: invalid target " + shape_str(shape));
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(shape));
    shape[infer] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return detail::make_op<T>(std::move(shape), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& axes) {
  require_defined(x, "permute");
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<int> ax(axes.size());
  std::vector<bool> used(r, false);
  for (int i = 0; i < r; ++i) {
    ax[i] = normalize_axis(axes[i], r);
    if (used[ax[i]]) throw ShapeError("permute: repeated axis");
    used[ax[i]] = true;
  }
  const Shape& in_shape = x.shape();
  Shape out_shape(r);
  std::vector<std::int64_t> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<std::int64_t> src_stride(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in_shape[ax[i]];
    src_stride[i] = in_strides[ax[i]];
  }
  // Map from output flat index to input flat index.
  const std::int64_t n = x.numel();
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::vector<std::int64_t> counter(r, 0);
  std::int64_t src = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    (*index)[i] = src;
    for (int d = r - 1; d >= 0; --d) {
      if (++counter[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = xv[(*index)[i]];
  return detail::make_op<T>(out_shape, std::move(out), {x}, [index](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*index)[i]] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  require_defined(x, "transpose");
  const int r = x.rank();
  if (r < 2) throw ShapeError("transpose: rank must be >= 2");
  std::vector<int> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const int r = parts[0].rank();
  const int ax = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != ax && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  const AxisSplit s = split_axis(out_shape, ax);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  auto offsets = std::make_shared<std::vector<std::int64_t>>();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets->push_back(off);
    const std::int64_t len = p.shape()[ax];
    const auto pv = p.values();
    for (std::int64_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.data() + o * len * s.inner, len * s.inner, out.data() + (o * s.n + off) * s.inner);
    off += len;
  }
  return detail::make_op<T>(out_shape, std::move(out), parts, [s, offsets](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& np = *self.inputs[i];
      if (!np.wants_grad()) continue;
      const std::int64_t len = np.value.size() / (s.outer * s.inner);
      auto g = np.grad_buffer();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        const T* src = self.grad.data() + (o * s.n + (*offsets)[i]) * s.inner;
        T* dst = g.data() + o * len * s.inner;
        for (std::int64_t j = 0; j < len * s.inner; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  require_defined(x, "narrow");
  const int ax = normalize_axis(axis, x.rank());
  if (start < 0 || length < 1 || start + length > x.shape()[ax])
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside extent " + std::to_string(x.shape()[ax]));
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const auto xv = x.values();
  for (std::int64_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  return detail::make_op<T>(out_shape, std::move(out), {x}, [s, start, length](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* src = self.grad.data() + o * length * s.inner;
      T* dst = g.data() + (o * s.n + start) * s.inner;
      for (std::int64_t j = 0; j < length * s.inner; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
BasicTensor<T> select(const BasicTensor<T>& x, int axis, std::int64_t index) {
  require_defined(x, "select");
  const int ax = normalize_axis(axis, x.rank());
  Shape s = x.shape();
  s.erase(s.begin() + ax);
  return reshape(narrow(x, ax, index, 1), s);
}

// ---- reductions -----------------------------------------------------------------------

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  require_defined(x, "sum");
  double acc = 0;
  for (T v : x.values()) acc += v;
  detail::add_flops(x.numel());
  return detail::make_op<T>({}, {static_cast<T>(acc)}, {x}, [](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require_defined(x, "mean");
  double acc = 0;
  for (T v : x.values()) acc += v;
  const double n = static_cast<double>(x.numel());
  detail::add_flops(x.numel());
  return detail::make_op<T>({}, {static_cast<T>(acc / n)}, {x}, [n](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    const T share = static_cast<T>(static_cast<double>(self.grad[0]) / n);
    for (auto& v : g) v += share;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis) {
  require_defined(x, "sum");
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner));
  const auto xv = x.values();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      double acc = 0;
      for (std::int64_t j = 0; j < s.n; ++j) acc += xv[(o * s.n + j) * s.inner + i];
      out[o * s.inner + i] = static_cast<T>(acc);
    }
  detail::add_flops(x.numel());
  return detail::make_op<T>(out_shape, std::move(out), {x}, [s](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t j = 0; j < s.n; ++j)
        for (std::int64_t i = 0; i < s.inner; ++i) g[(o * s.n + j) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  return scale(sum(x, ax), static_cast<T>(1.0 / static_cast<double>(x.shape()[ax])));
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  require_defined(x, "softmax");
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.n * s.inner + i;
      T mx = xv[base];
      for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0;
      for (std::int64_t j = 0; j < s.n; ++j) {
        const T e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::int64_t j = 0; j < s.n; ++j)
        out[base + j * s.inner] = static_cast<T>(out[base + j * s.inner] * inv);
    }
  detail::add_flops(4 * xv.size());
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [s](detail::Node<T>& self) {
    auto& nx = *self.inputs[0];
    if (!nx.wants_grad()) return;
    auto g = nx.grad_buffer();
    const auto& y = self.value;
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.n * s.inner + i;
        double dot = 0;
        for (std::int64_t j = 0; j < s.n; ++j) dot += self.grad[base + j * s.inner] * y[base + j * s.inner];
        for (std::int64_t j = 0; j < s.n; ++j) {
          const std::int64_t k = base + j * s.inner;
          g[k] += static_cast<T>(y[k] * (self.grad[k] - dot));
        }
      }
  });
}

// ---- explicit instantiation ---------------------------------------------------------------

#define CAPSTARE_INSTANTIATE_TENSOR(T)                                                                     \
  template class BasicTensor<T>;                                                                          \
  template BasicTensor<T> detail::make_op<T>(Shape, std::vector<T>, const std::vector<BasicTensor<T>>&,   \
                                             std::function<void(detail::Node<T>&)>);                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                           \
  template BasicTensor<T> neg(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                 int, int);                                                               \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                          \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                               \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                        \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                \
  template BasicTensor<T> narrow(const BasicTensor<T>&, int, std::int64_t, std::int64_t);                 \
  template BasicTensor<T> select(const BasicTensor<T>&, int, std::int64_t);                               \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> sum(const BasicTensor<T>&, int);                                                \
  template BasicTensor<T> mean(const BasicTensor<T>&, int);                                               \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);

CAPSTARE_INSTANTIATE_TENSOR(float)
CAPSTARE_INSTANTIATE_TENSOR(double)

}  // namespace capstare
