// SPDX-License-Identifier: Apache-2.0
#include "capstare/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace capstare {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  if (count < 1) throw ConfigError("data.count must be positive");
  if (seq_len < 1) throw ConfigError("data.seq_len must be positive");
  if (image_size < 16) throw ConfigError("data.image_size must be at least 16");
  if (head_amp < 0 || saccade_amp < 0) throw ConfigError("data amplitudes must be non-negative");
  if (head_amp + saccade_amp > std::numbers::pi / 3 + 1e-12)
    throw ConfigError("data.head_amp + data.saccade_amp must not exceed pi/3");
  if (!(saccade_prob >= 0 && saccade_prob <= 1)) throw ConfigError("data.saccade_prob must lie in [0, 1]");
  if (head_freq < 0) throw ConfigError("data.head_freq must be non-negative");
  if (noise < 0) throw ConfigError("data.noise must be non-negative");
}

FaceGeometry FaceGeometry::for_size(std::int64_t size) {
  const double s = static_cast<double>(size);
  return {0.28 * s, 0.18 * s, 0.12 * s, -0.06 * s, 0.085 * s, 0.04 * s};
}

namespace {

struct Disk {
  double x, y, r;

  bool contains(double px, double py) const {
    const double dx = px - x, dy = py - y;
    return dx * dx + dy * dy < r * r;
  }
  // True when the boundary passes within `margin` of the point.
  bool near_edge(double px, double py, double margin) const {
    const double d = std::hypot(px - x, py - y);
    return std::abs(d - r) <= margin;
  }
};

// Shapes in coordinates relative to the face centre.
struct Scene {
  double cx, cy;
  Disk face;
  Disk eye[2];
  Disk pupil[2];

  int layer(double x, double y) const {
    if (!face.contains(x, y)) return 0;
    for (int i = 0; i < 2; ++i)
      if (eye[i].contains(x, y)) return pupil[i].contains(x, y) ? 3 : 2;
    return 1;
  }
  bool near_edge(double x, double y, double margin) const {
    if (face.near_edge(x, y, margin)) return true;
    for (int i = 0; i < 2; ++i)
      if (eye[i].near_edge(x, y, margin) || pupil[i].near_edge(x, y, margin)) return true;
    return false;
  }
};

Scene layout(const FramePose& pose, std::int64_t size, double saccade_amp) {
  const auto g = FaceGeometry::for_size(size);
  Scene s;
  s.cx = 0.5 * static_cast<double>(size) + g.head_shift_per_rad * pose.head.yaw;
  s.cy = 0.5 * static_cast<double>(size) - g.head_shift_per_rad * pose.head.pitch;
  s.face = {0, 0, g.face_radius};
  double ox = 0, oy = 0;
  if (saccade_amp > 0) {
    ox = g.pupil_travel() * pose.eye.yaw / saccade_amp;
    oy = -g.pupil_travel() * pose.eye.pitch / saccade_amp;
  }
  for (int i = 0; i < 2; ++i) {
    const double ex = i == 0 ? -g.eye_dx : g.eye_dx;
    s.eye[i] = {ex, g.eye_dy, g.eye_radius};
    s.pupil[i] = {ex + ox, g.eye_dy + oy, g.pupil_radius};
  }
  return s;
}

constexpr int kSuper = 16;
const Colour kLayers[4] = {kBackground, kFace, kEyeWhite, kPupil};

std::string frame_name(std::int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03lld.png", static_cast<long long>(t));
  return buf;
}

GazeAngles in_disk(RandomSource& rng, double radius) {
  const double r = radius * std::sqrt(rng.uniform());
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  return {r * std::sin(theta), r * std::cos(theta)};
}

}  // namespace

Image render_frame(const FramePose& pose, std::int64_t size, double saccade_amp, double noise, RandomSource* rng) {
  const auto scene = layout(pose, size, saccade_amp);
  Image img{3, size, size, std::vector<float>(static_cast<std::size_t>(3 * size * size))};
  const auto plane = size * size;
  for (std::int64_t py = 0; py < size; ++py) {
    for (std::int64_t px = 0; px < size; ++px) {
      const double x = (static_cast<double>(px) + 0.5) - scene.cx;
      const double y = (static_cast<double>(py) + 0.5) - scene.cy;
      double weight[4] = {0, 0, 0, 0};
      if (!scene.near_edge(x, y, 0.7072)) {
        weight[scene.layer(x, y)] = 1.0;
      } else {
        for (int i = 0; i < kSuper; ++i)
          for (int j = 0; j < kSuper; ++j) {
            const double sx = (static_cast<double>(px) + (j + 0.5) / kSuper) - scene.cx;
            const double sy = (static_cast<double>(py) + (i + 0.5) / kSuper) - scene.cy;
            weight[scene.layer(sx, sy)] += 1.0 / (kSuper * kSuper);
          }
      }
      for (int c = 0; c < 3; ++c) {
        double v = 0;
        for (int l = 0; l < 4; ++l) v += weight[l] * kLayers[l][c];
        img.data[c * plane + py * size + px] = static_cast<float>(v);
      }
    }
  }
  if (rng != nullptr && noise > 0)
    for (auto& v : img.data) v = std::clamp(v + static_cast<float>(noise * rng->normal()), 0.0f, 1.0f);
  return img;
}

std::vector<FramePose> sample_trajectory(const SyntheticSpec& spec, RandomSource& rng) {
  const double two_pi = 2.0 * std::numbers::pi;
  const double phase_pitch = two_pi * rng.uniform();
  const double phase_yaw = two_pi * rng.uniform();
  std::vector<FramePose> poses(static_cast<std::size_t>(spec.seq_len));
  GazeAngles eye = in_disk(rng, spec.saccade_amp);
  for (std::int64_t t = 0; t < spec.seq_len; ++t) {
    if (t > 0 && rng.bernoulli(spec.saccade_prob)) eye = in_disk(rng, spec.saccade_amp);
    const double w = two_pi * spec.head_freq * static_cast<double>(t);
    poses[t].head = {spec.head_amp * std::sin(w + phase_pitch), spec.head_amp * std::sin(w + phase_yaw)};
    poses[t].eye = eye;
  }
  return poses;
}

Sequence generate_sequence(const SyntheticSpec& spec, std::int64_t index) {
  RandomSource rng(RandomSource::mix(spec.seed, static_cast<std::uint64_t>(index)));
  auto poses = sample_trajectory(spec, rng);
  auto noise_rng = rng.derive("noise");
  Sequence seq;
  char id[32];
  std::snprintf(id, sizeof id, "seq_%05lld", static_cast<long long>(index));
  seq.id = id;
  const auto& last = poses.back();
  seq.label = {last.head.pitch + last.eye.pitch, last.head.yaw + last.eye.yaw};
  if (spec.ambiguity && seq.label.yaw < 0) {
    poses.back().head.yaw = -poses.back().head.yaw;
    poses.back().eye.yaw = -poses.back().eye.yaw;
  }
  for (const auto& p : poses)
    seq.frames.push_back(render_frame(p, spec.image_size, spec.saccade_amp, spec.noise, &noise_rng));
  return seq;
}

std::vector<Sequence> generate(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<Sequence> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) out.push_back(generate_sequence(spec, i));
  return out;
}

void save_dataset(const std::string& root, const std::vector<Sequence>& seqs) {
  const fs::path base(root);
  std::error_code ec;
  fs::create_directories(base / "sequences", ec);
  if (ec) throw DataError(DataError::Kind::invalid, "cannot create " + (base / "sequences").string());
  std::ofstream labels(base / "labels.csv");
  if (!labels) throw DataError(DataError::Kind::invalid, "cannot write " + (base / "labels.csv").string());
  labels << "seq_id,pitch_rad,yaw_rad\n";
  char buf[64];
  for (const auto& s : seqs) {
    const auto dir = base / "sequences" / s.id;
    fs::create_directories(dir, ec);
    for (std::size_t t = 0; t < s.frames.size(); ++t) write_png((dir / frame_name(t)).string(), s.frames[t]);
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", s.label.pitch, s.label.yaw);
    labels << s.id << buf;
  }
}

namespace {

double parse_number(const std::string& field, const std::string& where) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != field.size() || !std::isfinite(v))
    throw DataError(DataError::Kind::parse, where + ": '" + field + "' is not a number");
  return v;
}

}  // namespace

std::vector<Sequence> load_dataset(const std::string& root) {
  const fs::path base(root);
  const auto labels_path = base / "labels.csv";
  std::ifstream in(labels_path);
  if (!in) throw DataError(DataError::Kind::missing_file, "missing file " + labels_path.string());

  std::vector<Sequence> seqs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("seq_id", 0) == 0) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    const auto where = labels_path.string() + " line " + std::to_string(lineno);
    if (fields.size() != 3)
      throw DataError(DataError::Kind::parse, where + ": expected 3 fields, found " + std::to_string(fields.size()));
    Sequence s;
    s.id = fields[0];
    s.label = {parse_number(fields[1], where), parse_number(fields[2], where)};
    seqs.push_back(std::move(s));
  }
  if (seqs.empty()) throw DataError(DataError::Kind::count_mismatch, labels_path.string() + " lists no sequences");

  const auto seq_root = base / "sequences";
  std::set<std::string> dirs;
  if (fs::is_directory(seq_root))
    for (const auto& e : fs::directory_iterator(seq_root))
      if (e.is_directory()) dirs.insert(e.path().filename().string());
  if (dirs.size() != seqs.size())
    throw DataError(DataError::Kind::count_mismatch, labels_path.string() + " lists " +
                                                         std::to_string(seqs.size()) + " sequences but " +
                                                         seq_root.string() + " holds " +
                                                         std::to_string(dirs.size()));

  std::int64_t steps = -1;
  std::int64_t height = -1, width = -1;
  for (auto& s : seqs) {
    const auto dir = seq_root / s.id;
    std::int64_t present = 0;
    while (fs::exists(dir / frame_name(present))) ++present;
    if (steps < 0) steps = std::max<std::int64_t>(present, 1);
    for (std::int64_t t = 0; t < steps; ++t) {
      s.frames.push_back(read_png((dir / frame_name(t)).string()));
      const auto& img = s.frames.back();
      if (height < 0) {
        height = img.height;
        width = img.width;
      } else if (img.height != height || img.width != width) {
        throw DataError(DataError::Kind::invalid, (dir / frame_name(t)).string() + " is " +
                                                      std::to_string(img.height) + "x" +
                                                      std::to_string(img.width) + ", expected " +
                                                      std::to_string(height) + "x" + std::to_string(width));
      }
    }
    if (present > steps)
      throw DataError(DataError::Kind::count_mismatch, dir.string() + " holds " + std::to_string(present) +
                                                           " frames, expected " + std::to_string(steps));
  }
  return seqs;
}

std::pair<std::vector<Sequence>, std::vector<Sequence>> split(const std::vector<Sequence>& seqs, double fraction,
                                                              std::uint64_t seed) {
  const auto n = seqs.size();
  const auto first = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (!(fraction > 0 && fraction < 1) || first == 0 || first >= n)
    throw DataError(DataError::Kind::invalid, "split: fraction " + std::to_string(fraction) + " of " +
                                                  std::to_string(n) + " sequences leaves a side empty");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RandomSource rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  std::pair<std::vector<Sequence>, std::vector<Sequence>> out;
  for (std::size_t i = 0; i < n; ++i) (i < first ? out.first : out.second).push_back(seqs[order[i]]);
  return out;
}

Batch make_batch(const std::vector<Sequence>& seqs, const std::vector<std::size_t>& indices, std::int64_t steps) {
  if (indices.empty()) throw DataError(DataError::Kind::invalid, "make_batch: no sequences selected");
  const auto& first = seqs.at(indices[0]).frames.at(0);
  const auto c = first.channels, h = first.height, w = first.width;
  const auto frame_size = c * h * w;
  const auto b = static_cast<std::int64_t>(indices.size());
  std::vector<float> pixels(static_cast<std::size_t>(b * steps * frame_size));
  std::vector<float> targets(static_cast<std::size_t>(2 * b));
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& s = seqs.at(indices[i]);
    const auto total = static_cast<std::int64_t>(s.frames.size());
    if (total < steps)
      throw DataError(DataError::Kind::invalid, s.id + " has " + std::to_string(total) + " frames, " +
                                                    std::to_string(steps) + " requested");
    for (std::int64_t t = 0; t < steps; ++t) {
      const auto& img = s.frames[total - steps + t];
      if (img.channels != c || img.height != h || img.width != w)
        throw DataError(DataError::Kind::invalid, s.id + ": inconsistent frame size");
      std::copy(img.data.begin(), img.data.end(), pixels.begin() + (i * steps + t) * frame_size);
    }
    targets[2 * i] = static_cast<float>(s.label.pitch);
    targets[2 * i + 1] = static_cast<float>(s.label.yaw);
  }
  return {{Tensor({b, steps, c, h, w}, std::move(pixels))}, Tensor({b, 2}, std::move(targets))};
}

}  // namespace capstare
