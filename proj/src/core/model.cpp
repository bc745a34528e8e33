// SPDX-License-Identifier: Apache-2.0
#include "capstare/model.hpp"

namespace capstare {

const char* decoder_mode_name(DecoderMode m) {
  switch (m) {
    case DecoderMode::dual: return "dual";
    case DecoderMode::single: return "single";
    case DecoderMode::dual_shared: return "dual_shared";
  }
  return "?";
}

DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "dual") return DecoderMode::dual;
  if (s == "single") return DecoderMode::single;
  if (s == "dual_shared" || s == "shared") return DecoderMode::dual_shared;
  throw ConfigError("unknown decoder mode '" + s + "' (expected dual, single or dual_shared)");
}

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("model." + field + ": " + why);
}

}  // namespace

void ModelConfig::validate() const {
  require(encoder.image_size >= 4, "image_size", "must be at least 4");
  require(encoder.in_channels >= 1, "in_channels", "must be positive");
  require(!encoder.channels.empty(), "encoder_channels", "needs at least one block");
  for (auto c : encoder.channels) require(c >= 1, "encoder_channels", "widths must be positive");
  require(encoder.output_size() >= 1, "image_size", "too small for the encoder strides");
  require(num_capsules >= 1, "num_capsules", "must be positive");
  require(num_heads >= 1, "num_heads", "must be positive");
  require(capsule_dim >= 1, "capsule_dim", "must be positive");
  require(capsule_dim % num_heads == 0, "num_heads",
          "capsule_dim " + std::to_string(capsule_dim) + " is not divisible by " + std::to_string(num_heads) +
              " heads");
  require(hidden_dim >= 1, "hidden_dim", "must be positive");
  require(seq_len >= 1, "seq_len", "must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
  if (decoder_split) {
    require(decoder_mode != DecoderMode::single, "decoder_split", "needs two decoders");
    require(tokens_per_frame() % 2 == 0, "decoder_split", "needs an even number of tokens per frame");
  }
}

std::int64_t ModelConfig::tokens_per_frame() const {
  if (use_capsules) return num_capsules;
  const auto s = encoder.output_size();
  return s * s;
}

std::int64_t ModelConfig::decoder_input() const {
  const auto tokens = decoder_split ? tokens_per_frame() / 2 : tokens_per_frame();
  return tokens * capsule_dim;
}

template <typename T>
BasicTensor<T> decode(const CapsuleSet<T>& caps, const DecoderParams<T>& p) {
  const auto& c = caps.caps;
  if (c.rank() != 4) throw ShapeError("decode: capsules must be [B, T, K, D], got " + shape_str(c.shape()));
  auto xs = reshape(c, {c.dim(0), c.dim(1), c.dim(2) * c.dim(3)});
  auto h0 = BasicTensor<T>::zeros({c.dim(0), p.gru.hidden_size()});
  return nn::linear(nn::gru_sequence(xs, h0, p.gru).last, p.head);
}

template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& y1, const BasicTensor<T>& y2, const FusionParams<T>& p) {
  return nn::linear(concat<T>({y1, y2}, -1), p.fc);
}

template <typename T>
GazeModel<T>::GazeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  RandomSource root(seed);
  auto enc_rng = root.derive("encoder");
  encoder_ = init_encoder<T>(cfg_.encoder, enc_rng);
  auto cap_rng = root.derive("capsules");
  capsules_ = init_capsule_projection<T>(cfg_.encoder.output_channels(), cfg_.capsule_dim,
                                         cfg_.use_capsules ? cfg_.num_capsules : 0, cap_rng);
  if (cfg_.use_attention) {
    auto att_rng = root.derive("attention");
    attention_ = init_attention<T>(cfg_.capsule_dim, cfg_.num_heads, cfg_.attention_scale, att_rng);
  }
  for (int i = 0; i < cfg_.decoder_count(); ++i) {
    auto rng = root.derive("decoder" + std::to_string(i));
    decoders_[i].gru = nn::init_gru<T>(cfg_.decoder_input(), cfg_.hidden_dim, rng);
    decoders_[i].head = nn::init_linear<T>(cfg_.hidden_dim, 2, rng);
    if (cfg_.decoder_mode == DecoderMode::dual_shared) {
      decoders_[1] = decoders_[0];
      break;
    }
  }
  if (cfg_.decoder_mode != DecoderMode::single) {
    auto fuse_rng = root.derive("fusion");
    fusion_.fc = nn::init_linear<T>(4, 2, fuse_rng);
  }
}

template <typename T>
ForwardResult<T> GazeModel<T>::forward(const FrameBatch<T>& frames, Mode mode, RandomSource& rng) {
  if (frames.pixels.rank() != 5)
    throw ShapeError("forward: expected [B, T, C, H, W], got " + shape_str(frames.pixels.shape()));
  if (frames.pixels.dim(3) != cfg_.encoder.image_size || frames.pixels.dim(4) != cfg_.encoder.image_size)
    throw ShapeError("forward: frames are " + std::to_string(frames.pixels.dim(3)) + "x" +
                     std::to_string(frames.pixels.dim(4)) + ", model expects " +
                     std::to_string(cfg_.encoder.image_size));
  auto fm = encode(frames, encoder_, mode == Mode::train);
  return forward_features(fm, frames.batch(), mode, rng);
}

template <typename T>
ForwardResult<T> GazeModel<T>::forward_features(const FeatureMap<T>& fm, std::int64_t batch, Mode mode,
                                                RandomSource& rng) {
  const bool training = mode == Mode::train;
  const nn::DropoutSpec drop{cfg_.dropout, training};
  const auto frames = fm.features.dim(0);
  if (batch < 1 || frames % batch != 0)
    throw ShapeError("forward: " + std::to_string(frames) + " feature maps do not split into batch " +
                     std::to_string(batch));
  const auto steps = frames / batch;
  if (steps != cfg_.seq_len)
    throw ShapeError("forward: sequence length " + std::to_string(steps) + " != configured " +
                     std::to_string(cfg_.seq_len));

  ForwardResult<T> r;
  CapsuleSet<T> tokens;
  if (cfg_.use_capsules) {
    auto f = form_capsules(fm, batch, capsules_, drop, rng);
    tokens = f.capsules;
    r.pooling = f.pooling;
  } else {
    auto loc = nn::dropout(location_embeddings(fm, capsules_.phi), drop, rng);
    tokens.caps = reshape(loc, {batch, steps, loc.dim(1), loc.dim(2)});
  }
  if (cfg_.use_attention) {
    auto routed = route(tokens, attention_);
    tokens = routed.capsules;
    r.attention = routed.attention;
  }

  const auto k = tokens.count();
  for (int i = 0; i < 2; ++i) {
    if (i == 1 && cfg_.decoder_mode == DecoderMode::single) break;
    CapsuleSet<T> input = tokens;
    if (cfg_.decoder_split) input.caps = narrow(tokens.caps, 2, i * (k / 2), k / 2);
    r.branches.push_back(decode(input, decoders_[i]));
  }
  r.prediction = r.branches.size() == 1 ? r.branches[0] : fuse(r.branches[0], r.branches[1], fusion_);
  return r;
}

template <typename T>
std::vector<NamedTensor<T>> GazeModel<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  auto put = [&](std::string name, const BasicTensor<T>& t) { out.push_back({std::move(name), t}); };
  auto put_linear = [&](const std::string& prefix, const nn::LinearParams<T>& p) {
    put(prefix + ".weight", p.weight);
    put(prefix + ".bias", p.bias);
  };
  for (std::size_t i = 0; i < encoder_.blocks.size(); ++i) {
    const auto& b = encoder_.blocks[i];
    const auto prefix = "encoder.block" + std::to_string(i);
    put(prefix + ".conv.weight", b.weight);
    put(prefix + ".conv.bias", b.bias);
    put(prefix + ".norm.gain", b.norm.gain);
    put(prefix + ".norm.shift", b.norm.shift);
  }
  put_linear("capsule.phi", capsules_.phi);
  if (cfg_.use_capsules) put("capsule.queries", capsules_.pool_queries);
  if (cfg_.use_attention) {
    put_linear("attention.query", attention_.query);
    put_linear("attention.key", attention_.key);
    put_linear("attention.value", attention_.value);
    put_linear("attention.output", attention_.output);
  }
  const int unique = cfg_.decoder_mode == DecoderMode::dual ? 2 : 1;
  for (int i = 0; i < unique; ++i) {
    const auto& d = decoders_[i];
    const auto prefix = "decoder" + std::to_string(i);
    put(prefix + ".gru.w_z", d.gru.w_z);
    put(prefix + ".gru.w_r", d.gru.w_r);
    put(prefix + ".gru.w_h", d.gru.w_h);
    put(prefix + ".gru.u_z", d.gru.u_z);
    put(prefix + ".gru.u_r", d.gru.u_r);
    put(prefix + ".gru.u_h", d.gru.u_h);
    put(prefix + ".gru.b_z", d.gru.b_z);
    put(prefix + ".gru.b_r", d.gru.b_r);
    put(prefix + ".gru.b_h", d.gru.b_h);
    put_linear(prefix + ".head", d.head);
  }
  if (cfg_.decoder_mode != DecoderMode::single) put_linear("fusion", fusion_.fc);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> GazeModel<T>::trainable() const {
  auto all = parameters();
  std::vector<NamedTensor<T>> out;
  for (auto& p : all)
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> GazeModel<T>::buffers() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < encoder_.blocks.size(); ++i) {
    const auto prefix = "encoder.block" + std::to_string(i) + ".norm";
    out.push_back({prefix + ".running_mean", encoder_.blocks[i].norm.running_mean});
    out.push_back({prefix + ".running_var", encoder_.blocks[i].norm.running_var});
  }
  return out;
}

template <typename T>
std::int64_t GazeModel<T>::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& p : trainable()) n += p.tensor.numel();
  return n;
}

template <typename T>
void GazeModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template class GazeModel<float>;
template class GazeModel<double>;
template BasicTensor<float> decode(const CapsuleSet<float>&, const DecoderParams<float>&);
template BasicTensor<double> decode(const CapsuleSet<double>&, const DecoderParams<double>&);
template BasicTensor<float> fuse(const BasicTensor<float>&, const BasicTensor<float>&, const FusionParams<float>&);
template BasicTensor<double> fuse(const BasicTensor<double>&, const BasicTensor<double>&,
                                  const FusionParams<double>&);

}  // namespace capstare
