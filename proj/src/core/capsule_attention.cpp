// SPDX-License-Identifier: Apache-2.0
#include "capstare/capsule_attention.hpp"

#include <algorithm>
#include <cmath>

namespace capstare {

template <typename T>
double AttentionParams<T>::scale() const {
  const double d = static_cast<double>(dim());
  return scale_mode == AttentionScale::literal ? std::sqrt(d) : std::sqrt(d / static_cast<double>(heads));
}

template <typename T>
CapsuleProjection<T> init_capsule_projection(std::int64_t channels, std::int64_t dim, std::int64_t capsules,
                                             RandomSource& rng) {
  if (channels < 1 || dim < 1) throw ConfigError("capsules: channels and dimension must be positive");
  CapsuleProjection<T> p;
  p.phi = nn::init_linear<T>(channels, dim, rng);
  if (capsules > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    p.pool_queries =
        BasicTensor<T>::uniform({capsules, dim}, rng, static_cast<T>(-bound), static_cast<T>(bound));
    p.pool_queries.set_requires_grad(true);
  }
  return p;
}

template <typename T>
AttentionParams<T> init_attention(std::int64_t dim, std::int64_t heads, AttentionScale mode, RandomSource& rng) {
  if (heads < 1 || dim % heads != 0)
    throw ConfigError("attention: dimension " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  AttentionParams<T> p;
  p.query = nn::init_linear<T>(dim, dim, rng);
  p.key = nn::init_linear<T>(dim, dim, rng);
  p.value = nn::init_linear<T>(dim, dim, rng);
  p.output = nn::init_linear<T>(dim, dim, rng);
  p.heads = heads;
  p.scale_mode = mode;
  return p;
}

template <typename T>
BasicTensor<T> location_embeddings(const FeatureMap<T>& fm, const nn::LinearParams<T>& phi) {
  const auto& f = fm.features;
  if (f.rank() != 4) throw ShapeError("capsules: feature map must be [N, C, H, W], got " + shape_str(f.shape()));
  if (f.dim(1) != phi.in_features())
    throw ShapeError("capsules: feature map has " + std::to_string(f.dim(1)) + " channels, projection expects " +
                     std::to_string(phi.in_features()));
  const auto frames = f.dim(0);
  auto locs = reshape(permute(f, {0, 2, 3, 1}), {frames, f.dim(2) * f.dim(3), f.dim(1)});
  return nn::linear(locs, phi);
}

template <typename T>
Formation<T> form_capsules(const FeatureMap<T>& fm, std::int64_t batch, const CapsuleProjection<T>& p,
                           const nn::DropoutSpec& dropout, RandomSource& rng) {
  if (!p.pool_queries.defined()) throw ContractError("form_capsules: projection has no pooling queries");
  const auto frames = fm.features.dim(0);
  if (batch < 1 || frames % batch != 0)
    throw ShapeError("form_capsules: " + std::to_string(frames) + " frames do not split into batch " +
                     std::to_string(batch));
  const auto steps = frames / batch;
  const auto locations = fm.height() * fm.width();
  const auto d = p.capsule_dim();
  const auto k = p.num_capsules();

  auto loc = location_embeddings(fm, p.phi);                              // [F, N, D]
  auto logits = matmul(loc, transpose(p.pool_queries));                   // [F, N, K]
  logits = scale(logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto weights = transpose(softmax(logits, 1));                           // [F, K, N]
  auto caps = matmul(weights, loc);                                       // [F, K, D]
  caps = nn::dropout(caps, dropout, rng);
  return {{reshape(caps, {batch, steps, k, d})}, reshape(weights, {batch, steps, k, locations})};
}

template <typename T>
Routing<T> route(const CapsuleSet<T>& caps, const AttentionParams<T>& p) {
  const auto& c = caps.caps;
  if (c.rank() != 4) throw ShapeError("route: capsules must be [B, T, K, D], got " + shape_str(c.shape()));
  const auto b = c.dim(0), t = c.dim(1), k = c.dim(2), d = c.dim(3);
  if (d != p.dim()) throw ShapeError("route: capsule width " + std::to_string(d) + " != " + std::to_string(p.dim()));
  if (d % p.heads != 0)
    throw ConfigError("route: dimension " + std::to_string(d) + " is not divisible by " +
                      std::to_string(p.heads) + " heads");
  const auto tokens = t * k;
  const auto h = p.heads;
  const auto dh = d / h;

  auto x = reshape(c, {b, tokens, d});
  auto split_heads = [&](const BasicTensor<T>& y) { return permute(reshape(y, {b, tokens, h, dh}), {0, 2, 1, 3}); };
  auto q = split_heads(nn::linear(x, p.query));
  auto kk = split_heads(nn::linear(x, p.key));
  auto v = split_heads(nn::linear(x, p.value));

  auto scores = scale(matmul(q, transpose(kk)), static_cast<T>(1.0 / p.scale()));  // [B, h, L, L]
  auto attn = softmax(scores, -1);
  auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, tokens, d});
  auto out = add(nn::linear(ctx, p.output), x);
  return {{reshape(out, {b, t, k, d})}, attn};
}

std::vector<Heatmap> capsule_heatmaps(std::span<const float> pooling, std::int64_t capsules, std::int64_t height,
                                      std::int64_t width) {
  if (capsules < 1 || height < 1 || width < 1) throw ShapeError("capsule_heatmaps: invalid dimensions");
  const auto n = height * width;
  if (static_cast<std::int64_t>(pooling.size()) != capsules * n)
    throw ShapeError("capsule_heatmaps: " + std::to_string(pooling.size()) + " weights do not match " +
                     std::to_string(capsules) + " capsules over " + std::to_string(height) + "x" +
                     std::to_string(width) + " locations");
  std::vector<Heatmap> maps;
  maps.reserve(capsules);
  for (std::int64_t c = 0; c < capsules; ++c) {
    const auto row = pooling.subspan(c * n, n);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    Heatmap m{height, width, std::vector<std::uint8_t>(n, 128)};
    const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
    if (range > 1e-12) {
      for (std::int64_t i = 0; i < n; ++i)
        m.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (row[i] - *lo) / range));
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

#define CAPSTARE_INSTANTIATE_CAPS(T)                                                                          \
  template struct AttentionParams<T>;                                                                         \
  template CapsuleProjection<T> init_capsule_projection<T>(std::int64_t, std::int64_t, std::int64_t,          \
                                                           RandomSource&);                                    \
  template AttentionParams<T> init_attention<T>(std::int64_t, std::int64_t, AttentionScale, RandomSource&);   \
  template BasicTensor<T> location_embeddings(const FeatureMap<T>&, const nn::LinearParams<T>&);              \
  template Formation<T> form_capsules(const FeatureMap<T>&, std::int64_t, const CapsuleProjection<T>&,        \
                                      const nn::DropoutSpec&, RandomSource&);                                 \
  template Routing<T> route(const CapsuleSet<T>&, const AttentionParams<T>&);

CAPSTARE_INSTANTIATE_CAPS(float)
CAPSTARE_INSTANTIATE_CAPS(double)

}  // namespace capstare
