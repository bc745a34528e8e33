// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capstare/model.hpp"

namespace capstare {

struct GazeAngles {
  double pitch = 0.0;  // radians, positive looks up
  double yaw = 0.0;    // radians, positive looks right
};

struct Ray3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

/// Unit gaze ray (cos p sin y, sin p, cos p cos y).
Ray3 gaze_ray(const GazeAngles& a);

/// Angle between the two gaze rays, in degrees.
double angular_error_deg(const GazeAngles& predicted, const GazeAngles& truth);

/// Mean angular error over rows of [B, 2] (pitch, yaw) tensors.
double mean_angular_error_deg(const Tensor& predicted, const Tensor& truth);
/// Per-row angular errors of [B, 2] tensors.
std::vector<double> angular_errors_deg(const Tensor& predicted, const Tensor& truth);

/// Temporal-consistency proxy: population variance of each run of `window`
/// consecutive values, averaged over all runs. NaN when there are fewer
/// values than `window`. Logged for inspection only.
double sliding_variance(const std::vector<double>& values, std::size_t window);

std::int64_t linear_param_count(std::int64_t in, std::int64_t out);
std::int64_t gru_param_count(std::int64_t input, std::int64_t hidden);
std::int64_t conv_param_count(std::int64_t cin, std::int64_t cout, std::int64_t kernel);

/// Closed-form trainable parameter count. A frozen encoder contributes nothing,
/// a shared decoder is counted once.
std::int64_t count_params(const ModelConfig& cfg);

/// Analytic cost of one forward pass at batch 1, per frame. Multiply-adds
/// count 2, bias additions 1, softmax 4 per element. Activations,
/// normalisation, dropout, scaling and residual additions are left out.
struct FlopBreakdown {
  double encoder = 0;
  double location_projection = 0;
  double pooling = 0;
  double attention_projections = 0;  // Q, K, V and output maps
  double attention_scores = 0;       // Q K^T
  double attention_softmax = 0;
  double attention_mix = 0;          // A V
  double decoders = 0;
  double fusion = 0;

  double total() const;
};

/// Per-sequence breakdown (not divided by T).
FlopBreakdown flop_breakdown(const ModelConfig& cfg);

/// flop_breakdown(cfg).total() / seq_len.
double count_flops(const ModelConfig& cfg);

/// Runs one eval forward at batch 1 under a FlopCounter and divides by T.
double instrumented_flops(GazeModel<float>& model);

struct LatencyStats {
  std::vector<double> samples_ms;
  double mean_ms = 0;
  double p95_ms = 0;
};

/// Wall-clock time of eval forwards on one batch-1 sequence. ConfigError when
/// iters < 10.
LatencyStats measure_latency(GazeModel<float>& model, int warmup, int iters);

struct MetricReport {
  std::string cell;
  std::uint64_t seed = 0;
  double err_deg = 0;
  std::int64_t params = 0;
  double flops = 0;
  double latency_ms = 0;

  static std::string csv_header();  // cell,seed,err_deg,params,flops,latency_ms
  std::string csv_row() const;
  std::string text() const;
};

/// Linear-interpolated quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> data, double q);

}  // namespace capstare
