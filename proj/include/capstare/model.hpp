// SPDX-License-Identifier: Apache-2.0
//
// Full gaze model: encoder -> capsule formation -> attention routing ->
// GRU decoder(s) -> fusion head. The output is (pitch, yaw) in radians.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capstare/capsule_attention.hpp"
#include "capstare/encoder.hpp"

namespace capstare {

enum class DecoderMode {
  dual,         // two independently initialised decoders, fused
  single,       // one decoder, no fusion
  dual_shared,  // one decoder applied twice, fused
};

const char* decoder_mode_name(DecoderMode m);
DecoderMode parse_decoder_mode(const std::string& s);  // ConfigError on unknown names

struct ModelConfig {
  EncoderConfig encoder;
  std::int64_t num_capsules = 4;
  std::int64_t num_heads = 4;
  std::int64_t capsule_dim = 64;
  std::int64_t hidden_dim = 128;
  std::int64_t seq_len = 9;
  DecoderMode decoder_mode = DecoderMode::dual;
  bool use_capsules = true;
  bool use_attention = true;
  // Decoder 0 reads capsules [0, K/2), decoder 1 reads [K/2, K).
  bool decoder_split = false;
  double dropout = 0.1;
  AttentionScale attention_scale = AttentionScale::per_head;

  /// ConfigError naming the offending field.
  void validate() const;
  /// Tokens per frame: K with capsules, N = H*W locations without.
  std::int64_t tokens_per_frame() const;
  std::int64_t decoder_count() const { return decoder_mode == DecoderMode::single ? 1 : 2; }
  /// Per-step decoder input width.
  std::int64_t decoder_input() const;
};

template <typename T>
struct DecoderParams {
  nn::GRUParams<T> gru;
  nn::LinearParams<T> head;  // H -> 2
};

template <typename T>
struct FusionParams {
  nn::LinearParams<T> fc;  // 4 -> 2
};

/// Runs the GRU over [B, T, K, D] from a zero state and maps the final
/// hidden state to (pitch, yaw): [B, 2].
template <typename T>
BasicTensor<T> decode(const CapsuleSet<T>& caps, const DecoderParams<T>& p);

/// concat(y1, y2) -> linear: [B, 2].
template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& y1, const BasicTensor<T>& y2, const FusionParams<T>& p);

enum class Mode { train, eval };

template <typename T>
struct ForwardResult {
  BasicTensor<T> prediction;               // [B, 2]
  std::vector<BasicTensor<T>> branches;    // per-decoder outputs
  BasicTensor<T> attention;                // [B, h, L, L]; undefined without routing
  BasicTensor<T> pooling;                  // [B, T, K, N]; undefined without capsules
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
class GazeModel {
 public:
  GazeModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  ForwardResult<T> forward(const FrameBatch<T>& frames, Mode mode, RandomSource& rng);
  /// Skips the encoder; `features` holds B*T frames in batch-major order.
  ForwardResult<T> forward_features(const FeatureMap<T>& features, std::int64_t batch, Mode mode,
                                    RandomSource& rng);

  /// Every parameter tensor once (shared decoders appear once), including
  /// frozen ones.
  std::vector<NamedTensor<T>> parameters() const;
  /// Parameters that receive gradients.
  std::vector<NamedTensor<T>> trainable() const;
  /// Non-trainable state (normalisation running statistics).
  std::vector<NamedTensor<T>> buffers() const;
  std::int64_t trainable_count() const;
  void zero_grad();

  /// Same architecture and values in another precision.
  template <typename U>
  GazeModel<U> cast() const {
    GazeModel<U> out(cfg_, seed_);
    auto src = parameters();
    auto bsrc = buffers();
    src.insert(src.end(), bsrc.begin(), bsrc.end());
    auto dst = out.parameters();
    auto bdst = out.buffers();
    dst.insert(dst.end(), bdst.begin(), bdst.end());
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto vals = src[i].tensor.values();
      auto d = dst[i].tensor.mutable_values();
      for (std::size_t j = 0; j < vals.size(); ++j) d[j] = static_cast<U>(vals[j]);
    }
    return out;
  }

  EncoderParams<T>& encoder() { return encoder_; }
  const CapsuleProjection<T>& capsules() const { return capsules_; }
  const AttentionParams<T>& attention() const { return attention_; }
  const DecoderParams<T>& decoder(int i) const { return decoders_[i]; }
  const FusionParams<T>& fusion() const { return fusion_; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  EncoderParams<T> encoder_;
  CapsuleProjection<T> capsules_;
  AttentionParams<T> attention_;
  DecoderParams<T> decoders_[2];
  FusionParams<T> fusion_;
};

}  // namespace capstare
