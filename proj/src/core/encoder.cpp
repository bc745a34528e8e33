// SPDX-License-Identifier: Apache-2.0
#include "capstare/encoder.hpp"

#include <cmath>

#include "binary_io.hpp"

namespace capstare {

std::int64_t EncoderConfig::output_size() const {
  std::int64_t s = image_size;
  const int pad = kernel / 2;
  for (std::size_t i = 0; i < channels.size(); ++i) s = (s + 2 * pad - kernel) / stride + 1;
  return s;
}

template <typename T>
void EncoderParams<T>::set_frozen(bool f) {
  frozen = f;
  for (auto& b : blocks) {
    b.weight.set_requires_grad(!f);
    b.bias.set_requires_grad(!f);
    b.norm.gain.set_requires_grad(!f);
    b.norm.shift.set_requires_grad(!f);
  }
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, RandomSource& rng) {
  if (cfg.channels.empty()) throw ConfigError("encoder: at least one conv block is required");
  if (cfg.output_size() < 1) throw ConfigError("encoder: image too small for the stride schedule");
  EncoderParams<T> p;
  p.stride = cfg.stride;
  p.padding = cfg.kernel / 2;
  std::int64_t cin = cfg.in_channels;
  for (auto cout : cfg.channels) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * cfg.kernel * cfg.kernel));
    ConvBlock<T> b;
    b.weight = BasicTensor<T>::uniform({cout, cin, cfg.kernel, cfg.kernel}, rng, static_cast<T>(-bound),
                                       static_cast<T>(bound));
    b.bias = BasicTensor<T>::zeros({cout});
    b.norm = nn::init_norm<T>(cout);
    p.blocks.push_back(std::move(b));
    cin = cout;
  }
  p.set_frozen(cfg.frozen);
  return p;
}

template <typename T>
FeatureMap<T> encode(const FrameBatch<T>& frames, EncoderParams<T>& p, bool training) {
  const auto& px = frames.pixels;
  if (px.rank() != 5) throw ShapeError("encode: expected [B, T, C, H, W], got " + shape_str(px.shape()));
  const std::int64_t cin = p.blocks.front().weight.dim(1);
  if (px.dim(2) != cin)
    throw ShapeError("encode: frames have " + std::to_string(px.dim(2)) + " channels, encoder expects " +
                     std::to_string(cin));
  for (T v : px.values())
    if (!(v >= T(0) && v <= T(1))) throw ContractError("encode: pixel values must lie in [0, 1]");

  auto x = reshape(px, {px.dim(0) * px.dim(1), px.dim(2), px.dim(3), px.dim(4)});
  for (auto& b : p.blocks) {
    x = conv2d(x, b.weight, b.bias, p.stride, p.padding);
    x = gelu(x);
    x = nn::batch_norm(x, b.norm, training);
  }
  return {x};
}

void save_features(const std::string& path, const Tensor& features) {
  io::LeWriter w;
  w.raw("CSFT");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(features.rank()));
  for (auto d : features.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : features.values()) w.f32(v);
  io::write_file(path, w.bytes());
}

FeatureMap<float> load_features(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::LeReader r(bytes, path);
  if (bytes.size() < 4 || r.raw(4) != "CSFT")
    throw FormatError(FormatError::Kind::bad_magic, path + ": not a feature file");
  const auto version = r.u32();
  if (version != kFeatureFileVersion)
    throw FormatError(FormatError::Kind::version,
                      path + ": feature file version " + std::to_string(version) + " unsupported");
  const auto rank = r.u32();
  if (rank != 4)
    throw FormatError(FormatError::Kind::shape_mismatch,
                      path + ": feature maps are rank 4, file declares rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = r.u32();
    if (d == 0) throw FormatError(FormatError::Kind::shape_mismatch, path + ": zero extent in header");
    shape.push_back(d);
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (r.remaining() != n * 4)
    throw FormatError(FormatError::Kind::corrupt, path + ": payload holds " + std::to_string(r.remaining()) +
                                                      " bytes, header implies " + std::to_string(n * 4));
  std::vector<float> values(n);
  for (auto& v : values) v = r.f32();
  return {Tensor(shape, std::move(values))};
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;
template EncoderParams<float> init_encoder<float>(const EncoderConfig&, RandomSource&);
template EncoderParams<double> init_encoder<double>(const EncoderConfig&, RandomSource&);
template FeatureMap<float> encode(const FrameBatch<float>&, EncoderParams<float>&, bool);
template FeatureMap<double> encode(const FrameBatch<double>&, EncoderParams<double>&, bool);

}  // namespace capstare
