// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>

#include "capstare/tensor.hpp"

namespace capstare::nn {

/// Fully connected layer parameters: weight [out, in], bias [out].
template <typename T>
struct LinearParams {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }
};

/// GRU parameters. Input weights are [H, I], recurrent weights [H, H], one
/// bias [H] per gate (update z, reset r, candidate h).
template <typename T>
struct GRUParams {
  BasicTensor<T> w_z, w_r, w_h;
  BasicTensor<T> u_z, u_r, u_h;
  BasicTensor<T> b_z, b_r, b_h;

  std::int64_t input_size() const { return w_z.dim(1); }
  std::int64_t hidden_size() const { return w_z.dim(0); }
};

/// Batch normalisation over axis 1. gain/shift are trainable; the running
/// statistics are buffers updated in training mode.
template <typename T>
struct NormParams {
  BasicTensor<T> gain;
  BasicTensor<T> shift;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct DropoutSpec {
  double rate = 0.1;
  bool training = false;
};

/// Weights uniform in +-1/sqrt(in), bias zero.
template <typename T>
LinearParams<T> init_linear(std::int64_t in, std::int64_t out, RandomSource& rng);

/// W_* uniform in +-1/sqrt(I), U_* uniform in +-1/sqrt(H), biases zero.
template <typename T>
GRUParams<T> init_gru(std::int64_t input, std::int64_t hidden, RandomSource& rng);

template <typename T>
NormParams<T> init_norm(std::int64_t channels);

/// x W^T + b on the last axis.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const LinearParams<T>& p);

/// Normalises per channel (axis 1) over every other axis. Training mode uses
/// batch statistics (biased variance) and folds them into the running
/// estimates with the unbiased variance; evaluation mode uses the running
/// estimates. A constant channel normalises to zero, so the output is the
/// shift.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormParams<T>& p, bool training);

/// Inverted dropout. Identity (same tensor) in evaluation mode or at rate 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, const DropoutSpec& spec, RandomSource& rng);

/// One GRU step with h' = (1 - z) * h + z * h_cand. Accepts unbatched
/// ([I], [H]) or batched ([B, I], [B, H]) operands.
template <typename T>
BasicTensor<T> gru_cell(const BasicTensor<T>& x, const BasicTensor<T>& h, const GRUParams<T>& p);

template <typename T>
struct GRUTrajectory {
  BasicTensor<T> last;  // [H] or [B, H]
  BasicTensor<T> all;   // [T, H] or [B, T, H]
};

/// Runs gru_cell over the time axis of xs ([T, I] or [B, T, I]).
template <typename T>
GRUTrajectory<T> gru_sequence(const BasicTensor<T>& xs, const BasicTensor<T>& h0, const GRUParams<T>& p);

template <typename T>
std::int64_t param_count(const LinearParams<T>& p) {
  return p.weight.numel() + p.bias.numel();
}

template <typename T>
std::int64_t param_count(const GRUParams<T>& p) {
  return p.w_z.numel() + p.w_r.numel() + p.w_h.numel() + p.u_z.numel() + p.u_r.numel() + p.u_h.numel() +
         p.b_z.numel() + p.b_r.numel() + p.b_h.numel();
}

}  // namespace capstare::nn
