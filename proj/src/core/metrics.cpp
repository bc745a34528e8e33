// SPDX-License-Identifier: Apache-2.0
#include "capstare/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace capstare {

Ray3 gaze_ray(const GazeAngles& a) {
  return {std::cos(a.pitch) * std::sin(a.yaw), std::sin(a.pitch), std::cos(a.pitch) * std::cos(a.yaw)};
}

double angular_error_deg(const GazeAngles& predicted, const GazeAngles& truth) {
  const auto u = gaze_ray(predicted);
  const auto v = gaze_ray(truth);
  // atan2 of |u x v| and u.v stays accurate near 0 and 180 degrees, where
  // acos of the clamped dot product loses about half the digits.
  const double cx = u.y * v.z - u.z * v.y;
  const double cy = u.z * v.x - u.x * v.z;
  const double cz = u.x * v.y - u.y * v.x;
  const double dot = u.x * v.x + u.y * v.y + u.z * v.z;
  return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / std::numbers::pi;
}

std::vector<double> angular_errors_deg(const Tensor& predicted, const Tensor& truth) {
  if (predicted.rank() != 2 || predicted.dim(1) != 2 || predicted.shape() != truth.shape())
    throw ShapeError("angular error: expected matching [B, 2] tensors, got " + shape_str(predicted.shape()) +
                     " and " + shape_str(truth.shape()));
  const auto p = predicted.values();
  const auto t = truth.values();
  std::vector<double> out(static_cast<std::size_t>(predicted.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = angular_error_deg({p[2 * i], p[2 * i + 1]}, {t[2 * i], t[2 * i + 1]});
  return out;
}

double sliding_variance(const std::vector<double>& values, std::size_t window) {
  if (window < 2) throw ConfigError("sliding variance: window must be at least 2");
  if (values.size() < window) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  const std::size_t runs = values.size() - window + 1;
  for (std::size_t s = 0; s < runs; ++s) {
    double mean = 0;
    for (std::size_t i = s; i < s + window; ++i) mean += values[i];
    mean /= static_cast<double>(window);
    double var = 0;
    for (std::size_t i = s; i < s + window; ++i) var += (values[i] - mean) * (values[i] - mean);
    total += var / static_cast<double>(window);
  }
  return total / static_cast<double>(runs);
}

double mean_angular_error_deg(const Tensor& predicted, const Tensor& truth) {
  if (predicted.rank() != 2 || predicted.dim(1) != 2 || predicted.shape() != truth.shape())
    throw ShapeError("angular error: expected matching [B, 2] tensors, got " + shape_str(predicted.shape()) +
                     " and " + shape_str(truth.shape()));
  const auto p = predicted.values();
  const auto t = truth.values();
  const auto n = predicted.dim(0);
  if (n == 0) throw ShapeError("angular error: empty batch");
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i)
    total += angular_error_deg({p[2 * i], p[2 * i + 1]}, {t[2 * i], t[2 * i + 1]});
  return total / static_cast<double>(n);
}

std::int64_t linear_param_count(std::int64_t in, std::int64_t out) { return out * in + out; }
std::int64_t gru_param_count(std::int64_t input, std::int64_t hidden) {
  return 3 * (hidden * input + hidden * hidden + hidden);
}
std::int64_t conv_param_count(std::int64_t cin, std::int64_t cout, std::int64_t kernel) {
  return cout * cin * kernel * kernel + cout;
}

std::int64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  std::int64_t n = 0;
  if (!cfg.encoder.frozen) {
    std::int64_t cin = cfg.encoder.in_channels;
    for (auto cout : cfg.encoder.channels) {
      n += conv_param_count(cin, cout, cfg.encoder.kernel) + 2 * cout;  // conv + norm gain/shift
      cin = cout;
    }
  }
  const auto d = cfg.capsule_dim;
  n += linear_param_count(cfg.encoder.output_channels(), d);
  if (cfg.use_capsules) n += cfg.num_capsules * d;
  if (cfg.use_attention) n += 4 * linear_param_count(d, d);
  const std::int64_t decoders = cfg.decoder_mode == DecoderMode::dual ? 2 : 1;
  n += decoders * (gru_param_count(cfg.decoder_input(), cfg.hidden_dim) + linear_param_count(cfg.hidden_dim, 2));
  if (cfg.decoder_mode != DecoderMode::single) n += linear_param_count(4, 2);
  return n;
}

double FlopBreakdown::total() const {
  return encoder + location_projection + pooling + attention_projections + attention_scores +
         attention_softmax + attention_mix + decoders + fusion;
}

FlopBreakdown flop_breakdown(const ModelConfig& cfg) {
  cfg.validate();
  FlopBreakdown f;
  const double t = static_cast<double>(cfg.seq_len);
  const auto& e = cfg.encoder;
  double cin = static_cast<double>(e.in_channels);
  std::int64_t size = e.image_size;
  const int pad = e.kernel / 2;
  for (auto c : e.channels) {
    size = (size + 2 * pad - e.kernel) / e.stride + 1;
    const double outputs = static_cast<double>(c) * static_cast<double>(size * size);
    f.encoder += t * outputs * (2.0 * cin * e.kernel * e.kernel + 1.0);
    cin = static_cast<double>(c);
  }
  const double n = static_cast<double>(size * size);
  const double d = static_cast<double>(cfg.capsule_dim);
  f.location_projection = t * n * (2.0 * cin * d + d);
  double tokens = n;
  if (cfg.use_capsules) {
    const double k = static_cast<double>(cfg.num_capsules);
    f.pooling = t * (2.0 * n * k * d + 4.0 * n * k + 2.0 * k * n * d);
    tokens = k;
  }
  if (cfg.use_attention) {
    const double l = t * tokens;
    const double h = static_cast<double>(cfg.num_heads);
    f.attention_projections = 4.0 * (2.0 * l * d * d + l * d);
    f.attention_scores = 2.0 * l * l * d;
    f.attention_softmax = 4.0 * h * l * l;
    f.attention_mix = 2.0 * l * l * d;
  }
  const double in = static_cast<double>(cfg.decoder_input());
  const double hid = static_cast<double>(cfg.hidden_dim);
  const double per_decoder = t * 3.0 * (2.0 * in * hid + 2.0 * hid * hid + hid) + 2.0 * 2.0 * hid + 2.0;
  f.decoders = static_cast<double>(cfg.decoder_count()) * per_decoder;
  if (cfg.decoder_mode != DecoderMode::single) f.fusion = 2.0 * 4.0 * 2.0 + 2.0;
  return f;
}

double count_flops(const ModelConfig& cfg) { return flop_breakdown(cfg).total() / static_cast<double>(cfg.seq_len); }

namespace {

FrameBatch<float> probe_batch(const ModelConfig& cfg) {
  const auto s = cfg.encoder.image_size;
  return {Tensor::full({1, cfg.seq_len, cfg.encoder.in_channels, s, s}, 0.5f)};
}

}  // namespace

double instrumented_flops(GazeModel<float>& model) {
  const auto batch = probe_batch(model.config());
  RandomSource rng(0);
  NoGradGuard no_grad;
  FlopCounter counter;
  model.forward(batch, Mode::eval, rng);
  return static_cast<double>(counter.count()) / static_cast<double>(model.config().seq_len);
}

LatencyStats measure_latency(GazeModel<float>& model, int warmup, int iters) {
  if (iters < 10) throw ConfigError("latency: at least 10 timed iterations are required");
  const auto batch = probe_batch(model.config());
  RandomSource rng(0);
  NoGradGuard no_grad;
  for (int i = 0; i < warmup; ++i) model.forward(batch, Mode::eval, rng);
  LatencyStats s;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(batch, Mode::eval, rng);
    const auto t1 = std::chrono::steady_clock::now();
    s.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double total = 0;
  for (double v : s.samples_ms) total += v;
  s.mean_ms = total / iters;
  s.p95_ms = quantile(s.samples_ms, 0.95);
  return s;
}

std::string MetricReport::csv_header() { return "cell,seed,err_deg,params,flops,latency_ms"; }

std::string MetricReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%llu,%.17g,%lld,%.0f,%.17g", static_cast<unsigned long long>(seed), err_deg,
                static_cast<long long>(params), flops, latency_ms);
  return cell + buf;
}

std::string MetricReport::text() const {
  std::ostringstream os;
  os << "error      " << err_deg << " deg\n"
     << "params     " << params << "\n"
     << "flops      " << flops << " per frame\n"
     << "latency    " << latency_ms << " ms per sequence\n";
  return os.str();
}

double quantile(std::vector<double> data, double q) {
  if (data.empty()) throw ContractError("quantile of an empty sample");
  std::sort(data.begin(), data.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(data.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, data.size() - 1);
  return data[lo] + (pos - static_cast<double>(lo)) * (data[hi] - data[lo]);
}

}  // namespace capstare
