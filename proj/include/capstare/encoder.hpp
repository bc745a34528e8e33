// SPDX-License-Identifier: Apache-2.0
//
// Per-frame spatial feature extractor. The toy backbone is a stack of
// strided 3x3 convolution blocks (conv -> GELU -> batch norm); the last
// block's normalisation is the batch norm over the encoder's output channels.
// Any other backbone can feed the rest of the model through FeatureMap, e.g.
// precomputed activations read with load_features().
#pragma once

#include <string>
#include <vector>

#include "capstare/nn.hpp"

namespace capstare {

struct EncoderConfig {
  std::int64_t image_size = 64;
  std::int64_t in_channels = 3;
  std::vector<std::int64_t> channels{16, 32, 64};
  int kernel = 3;
  int stride = 2;
  bool frozen = false;

  /// Output spatial extent for a square input, following the stride schedule
  /// with padding kernel/2.
  std::int64_t output_size() const;
  std::int64_t output_channels() const { return channels.back(); }
};

template <typename T>
struct ConvBlock {
  BasicTensor<T> weight;  // [Cout, Cin, k, k]
  BasicTensor<T> bias;    // [Cout]
  nn::NormParams<T> norm;
};

template <typename T>
struct EncoderParams {
  std::vector<ConvBlock<T>> blocks;
  int stride = 2;
  int padding = 1;
  bool frozen = false;

  /// Freezing stops gradients from reaching any encoder parameter.
  void set_frozen(bool frozen);
};

/// Frames [B, T, C, H, W] with values in [0, 1].
template <typename T>
struct FrameBatch {
  BasicTensor<T> pixels;

  std::int64_t batch() const { return pixels.dim(0); }
  std::int64_t steps() const { return pixels.dim(1); }
};

/// Per-frame feature maps [(B*T), C, H, W].
template <typename T>
struct FeatureMap {
  BasicTensor<T> features;

  std::int64_t channels() const { return features.dim(1); }
  std::int64_t height() const { return features.dim(2); }
  std::int64_t width() const { return features.dim(3); }
};

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, RandomSource& rng);

/// Throws ShapeError on a wrong channel count and ContractError on pixels
/// outside [0, 1].
template <typename T>
FeatureMap<T> encode(const FrameBatch<T>& frames, EncoderParams<T>& p, bool training);

/// Writes the feature-file format: "CSFT", u32 version, u32 rank,
/// u32 dims[rank], then little-endian float32 values.
void save_features(const std::string& path, const Tensor& features);

/// Reads a rank-4 feature file; FormatError on bad magic, version or shape.
FeatureMap<float> load_features(const std::string& path);

inline constexpr std::uint32_t kFeatureFileVersion = 1;

}  // namespace capstare
