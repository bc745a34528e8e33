// SPDX-License-Identifier: Apache-2.0
//
// Capsule formation and spatiotemporal attention routing.
//
// Formation projects every feature-map location to a D-dimensional
// embedding with a shared linear map (a 1x1 convolution) and pools the N
// location embeddings into K capsules. Each capsule owns a learned query;
// its pooling weights over locations are softmax(<query, loc_n> / sqrt(D)).
//
// Routing is one pass of multi-head self-attention over all T*K capsules of
// a sequence, each capsule a token, followed by an output projection and a
// residual connection. No positional information is injected, so routing
// is equivariant to token permutations.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "capstare/encoder.hpp"
#include "capstare/nn.hpp"

namespace capstare {

template <typename T>
struct CapsuleProjection {
  nn::LinearParams<T> phi;     // C -> D
  BasicTensor<T> pool_queries;  // [K, D]; undefined when capsules are disabled

  std::int64_t capsule_dim() const { return phi.out_features(); }
  std::int64_t num_capsules() const { return pool_queries.dim(0); }
};

/// [B, T, K, D]
template <typename T>
struct CapsuleSet {
  BasicTensor<T> caps;

  std::int64_t batch() const { return caps.dim(0); }
  std::int64_t steps() const { return caps.dim(1); }
  std::int64_t count() const { return caps.dim(2); }
  std::int64_t dim() const { return caps.dim(3); }
};

enum class AttentionScale {
  per_head,  // sqrt(D / heads)
  literal,   // sqrt(D)
};

template <typename T>
struct AttentionParams {
  nn::LinearParams<T> query, key, value, output;
  std::int64_t heads = 1;
  AttentionScale scale_mode = AttentionScale::per_head;

  std::int64_t dim() const { return query.in_features(); }
  double scale() const;
};

template <typename T>
CapsuleProjection<T> init_capsule_projection(std::int64_t channels, std::int64_t dim, std::int64_t capsules,
                                             RandomSource& rng);

/// Throws ConfigError when `dim` is not divisible by `heads`.
template <typename T>
AttentionParams<T> init_attention(std::int64_t dim, std::int64_t heads, AttentionScale mode, RandomSource& rng);

template <typename T>
struct Formation {
  CapsuleSet<T> capsules;
  BasicTensor<T> pooling;  // [B, T, K, N], rows sum to one
};

/// Location embeddings phi(F): [(B*T), N, D] with N = H*W in row-major
/// spatial order.
template <typename T>
BasicTensor<T> location_embeddings(const FeatureMap<T>& fm, const nn::LinearParams<T>& phi);

template <typename T>
Formation<T> form_capsules(const FeatureMap<T>& fm, std::int64_t batch, const CapsuleProjection<T>& p,
                           const nn::DropoutSpec& dropout, RandomSource& rng);

template <typename T>
struct Routing {
  CapsuleSet<T> capsules;
  BasicTensor<T> attention;  // [B, heads, T*K, T*K], rows sum to one
};

template <typename T>
Routing<T> route(const CapsuleSet<T>& caps, const AttentionParams<T>& p);

struct Heatmap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major grayscale

  std::uint8_t at(std::int64_t row, std::int64_t col) const { return pixels[row * width + col]; }
};

/// One heatmap per capsule from a [K, N] pooling matrix of a single frame.
/// Each row is min-max scaled to [0, 255]; a constant row maps to flat 128.
std::vector<Heatmap> capsule_heatmaps(std::span<const float> pooling, std::int64_t capsules,
                                      std::int64_t height, std::int64_t width);

}  // namespace capstare
