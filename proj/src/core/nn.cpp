// SPDX-License-Identifier: Apache-2.0
#include "capstare/nn.hpp"

#include <cmath>

namespace capstare::nn {

namespace {

template <typename T>
BasicTensor<T> uniform_param(const Shape& shape, double bound, RandomSource& rng) {
  auto t = BasicTensor<T>::uniform(shape, rng, static_cast<T>(-bound), static_cast<T>(bound));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
BasicTensor<T> zero_param(const Shape& shape) {
  auto t = BasicTensor<T>::zeros(shape);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
void check_gru_shapes(const BasicTensor<T>& x, const BasicTensor<T>& h, const GRUParams<T>& p) {
  if (x.dim(-1) != p.input_size())
    throw ShapeError("gru: input width " + std::to_string(x.dim(-1)) + " != " + std::to_string(p.input_size()));
  if (h.dim(-1) != p.hidden_size())
    throw ShapeError("gru: hidden width " + std::to_string(h.dim(-1)) + " != " +
                     std::to_string(p.hidden_size()));
}

// Gate arithmetic shared by gru_cell and gru_sequence; x_* are the already
// projected inputs x W_*^T, u_*t the transposed recurrent weights.
template <typename T>
BasicTensor<T> gru_step(const BasicTensor<T>& x_z, const BasicTensor<T>& x_r, const BasicTensor<T>& x_h,
                        const BasicTensor<T>& h, const BasicTensor<T>& u_zt, const BasicTensor<T>& u_rt,
                        const BasicTensor<T>& u_ht, const GRUParams<T>& p) {
  auto z = sigmoid(add(add(x_z, matmul(h, u_zt)), p.b_z));
  auto r = sigmoid(add(add(x_r, matmul(h, u_rt)), p.b_r));
  auto cand = tanh(add(add(x_h, matmul(mul(r, h), u_ht)), p.b_h));
  return add(mul(add_scalar(neg(z), T(1)), h), mul(z, cand));
}

}  // namespace

template <typename T>
LinearParams<T> init_linear(std::int64_t in, std::int64_t out, RandomSource& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_param<T>({out, in}, bound, rng), zero_param<T>({out})};
}

template <typename T>
GRUParams<T> init_gru(std::int64_t input, std::int64_t hidden, RandomSource& rng) {
  const double wb = 1.0 / std::sqrt(static_cast<double>(input));
  const double ub = 1.0 / std::sqrt(static_cast<double>(hidden));
  GRUParams<T> p;
  p.w_z = uniform_param<T>({hidden, input}, wb, rng);
  p.w_r = uniform_param<T>({hidden, input}, wb, rng);
  p.w_h = uniform_param<T>({hidden, input}, wb, rng);
  p.u_z = uniform_param<T>({hidden, hidden}, ub, rng);
  p.u_r = uniform_param<T>({hidden, hidden}, ub, rng);
  p.u_h = uniform_param<T>({hidden, hidden}, ub, rng);
  p.b_z = zero_param<T>({hidden});
  p.b_r = zero_param<T>({hidden});
  p.b_h = zero_param<T>({hidden});
  return p;
}

template <typename T>
NormParams<T> init_norm(std::int64_t channels) {
  NormParams<T> p;
  p.gain = BasicTensor<T>::ones({channels});
  p.gain.set_requires_grad(true);
  p.shift = zero_param<T>({channels});
  p.running_mean = BasicTensor<T>::zeros({channels});
  p.running_var = BasicTensor<T>::ones({channels});
  return p;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const LinearParams<T>& p) {
  if (x.dim(-1) != p.in_features())
    throw ShapeError("linear: input width " + std::to_string(x.dim(-1)) + " != " +
                     std::to_string(p.in_features()));
  return add(matmul(x, transpose(p.weight)), p.bias);
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormParams<T>& p, bool training) {
  if (x.rank() < 2) throw ShapeError("batch_norm: expected [N, C, ...], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0);
  const std::int64_t channels = x.dim(1);
  if (p.gain.numel() != channels || p.shift.numel() != channels)
    throw ShapeError("batch_norm: " + std::to_string(channels) + " channels, params sized " +
                     std::to_string(p.gain.numel()));
  if (training && batch < 2) throw ContractError("batch_norm: training mode needs a batch of at least 2");
  std::int64_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  const std::int64_t count = batch * spatial;
  const auto xv = x.values();

  std::vector<T> mean_c(channels), inv_std(channels);
  if (training) {
    auto rm = p.running_mean.mutable_values();
    auto rv = p.running_var.mutable_values();
    for (std::int64_t c = 0; c < channels; ++c) {
      double s = 0;
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t k = 0; k < spatial; ++k) s += xv[(n * channels + c) * spatial + k];
      const double mu = s / count;
      double ss = 0;
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t k = 0; k < spatial; ++k) {
          const double d = xv[(n * channels + c) * spatial + k] - mu;
          ss += d * d;
        }
      const double var = ss / count;
      mean_c[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + p.eps));
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      rm[c] = static_cast<T>((1.0 - p.momentum) * rm[c] + p.momentum * mu);
      rv[c] = static_cast<T>((1.0 - p.momentum) * rv[c] + p.momentum * unbiased);
    }
  } else {
    const auto rm = p.running_mean.values();
    const auto rv = p.running_var.values();
    for (std::int64_t c = 0; c < channels; ++c) {
      mean_c[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + p.eps));
    }
  }

  const auto gv = p.gain.values();
  const auto sv = p.shift.values();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  std::vector<T> out(xv.size());
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t k = 0; k < spatial; ++k) {
        const std::int64_t i = (n * channels + c) * spatial + k;
        (*xhat)[i] = (xv[i] - mean_c[c]) * inv_std[c];
        out[i] = (*xhat)[i] * gv[c] + sv[c];
      }
  detail::add_flops(static_cast<std::uint64_t>(4 * xv.size()));

  return detail::make_op<T>(
      x.shape(), std::move(out), {x, p.gain, p.shift},
      [=](detail::Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& ns = *self.inputs[2];
        const auto& g = self.grad;
        std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t k = 0; k < spatial; ++k) {
              const std::int64_t i = (n * channels + c) * spatial + k;
              sum_dy[c] += g[i];
              sum_dy_xhat[c] += g[i] * (*xhat)[i];
            }
        if (ng.wants_grad()) {
          auto gg = ng.grad_buffer();
          for (std::int64_t c = 0; c < channels; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (ns.wants_grad()) {
          auto gs = ns.grad_buffer();
          for (std::int64_t c = 0; c < channels; ++c) gs[c] += static_cast<T>(sum_dy[c]);
        }
        if (!nx.wants_grad()) return;
        auto gx = nx.grad_buffer();
        const auto& gain = ng.value;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < channels; ++c) {
            const double scale_c = static_cast<double>(gain[c]) * inv_std[c];
            for (std::int64_t k = 0; k < spatial; ++k) {
              const std::int64_t i = (n * channels + c) * spatial + k;
              if (training) {
                const double v =
                    scale_c * (g[i] - sum_dy[c] / count - (*xhat)[i] * sum_dy_xhat[c] / count);
                gx[i] += static_cast<T>(v);
              } else {
                gx[i] += static_cast<T>(scale_c * g[i]);
              }
            }
          }
      });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, const DropoutSpec& spec, RandomSource& rng) {
  if (spec.rate < 0.0 || spec.rate >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (!spec.training || spec.rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - spec.rate));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = rng.uniform() < spec.rate ? T(0) : keep_scale;
  return mul(x, BasicTensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
BasicTensor<T> gru_cell(const BasicTensor<T>& x, const BasicTensor<T>& h, const GRUParams<T>& p) {
  check_gru_shapes(x, h, p);
  if (x.rank() != h.rank() || (x.rank() == 2 && x.dim(0) != h.dim(0)))
    throw ShapeError("gru_cell: input " + shape_str(x.shape()) + " vs state " + shape_str(h.shape()));
  return gru_step(matmul(x, transpose(p.w_z)), matmul(x, transpose(p.w_r)), matmul(x, transpose(p.w_h)), h,
                  transpose(p.u_z), transpose(p.u_r), transpose(p.u_h), p);
}

template <typename T>
GRUTrajectory<T> gru_sequence(const BasicTensor<T>& xs, const BasicTensor<T>& h0, const GRUParams<T>& p) {
  if (xs.rank() != 2 && xs.rank() != 3)
    throw ShapeError("gru_sequence: expected [T, I] or [B, T, I], got " + shape_str(xs.shape()));
  const int time_axis = xs.rank() - 2;
  const std::int64_t steps = xs.dim(time_axis);
  if (steps < 1) throw ContractError("gru_sequence: empty sequence");
  check_gru_shapes(xs, h0, p);
  if (h0.rank() != xs.rank() - 1 || (xs.rank() == 3 && h0.dim(0) != xs.dim(0)))
    throw ShapeError("gru_sequence: initial state " + shape_str(h0.shape()) + " vs inputs " +
                     shape_str(xs.shape()));

  const auto proj_z = matmul(xs, transpose(p.w_z));
  const auto proj_r = matmul(xs, transpose(p.w_r));
  const auto proj_h = matmul(xs, transpose(p.w_h));
  const auto u_zt = transpose(p.u_z);
  const auto u_rt = transpose(p.u_r);
  const auto u_ht = transpose(p.u_h);

  Shape step_shape = h0.shape();
  step_shape.insert(step_shape.end() - 1, 1);
  std::vector<BasicTensor<T>> states;
  states.reserve(steps);
  BasicTensor<T> h = h0;
  for (std::int64_t t = 0; t < steps; ++t) {
    h = gru_step(select(proj_z, time_axis, t), select(proj_r, time_axis, t), select(proj_h, time_axis, t), h,
                 u_zt, u_rt, u_ht, p);
    states.push_back(reshape(h, step_shape));
  }
  return {h, concat(states, time_axis)};
}

#define CAPSTARE_INSTANTIATE_NN(T)                                                                    \
  template LinearParams<T> init_linear<T>(std::int64_t, std::int64_t, RandomSource&);                \
  template GRUParams<T> init_gru<T>(std::int64_t, std::int64_t, RandomSource&);                      \
  template NormParams<T> init_norm<T>(std::int64_t);                                                 \
  template BasicTensor<T> linear(const BasicTensor<T>&, const LinearParams<T>&);                     \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, NormParams<T>&, bool);                   \
  template BasicTensor<T> dropout(const BasicTensor<T>&, const DropoutSpec&, RandomSource&);         \
  template BasicTensor<T> gru_cell(const BasicTensor<T>&, const BasicTensor<T>&, const GRUParams<T>&); \
  template GRUTrajectory<T> gru_sequence(const BasicTensor<T>&, const BasicTensor<T>&, const GRUParams<T>&);

CAPSTARE_INSTANTIATE_NN(float)
CAPSTARE_INSTANTIATE_NN(double)

}  // namespace capstare::nn
