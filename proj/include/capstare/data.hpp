// SPDX-License-Identifier: Apache-2.0
//
// Procedural gaze sequences. Each frame shows a face disk with two eyes
// (white disks) and pupils. Head rotation translates the whole face; eye
// rotation moves the pupils inside the eye disks. Head angles follow a slow
// sinusoid, eye angles hold still and jump to a new target (a saccade) with
// a fixed probability per frame. The label is head + eye at the last frame.
//
// Colours of background, face, eye white and pupil are chosen so that the
// per-pixel coverages of the nested shapes can be recovered by a 3x3 linear
// solve, which is what makes labels checkable from noise-free renders.
#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "capstare/encoder.hpp"
#include "capstare/image.hpp"
#include "capstare/metrics.hpp"

namespace capstare {

struct SyntheticSpec {
  std::int64_t count = 512;
  std::int64_t seq_len = 9;
  std::int64_t image_size = 64;
  double head_amp = 0.3;      // radians, bound on |head pitch| and |head yaw|
  double head_freq = 0.02;    // cycles per frame
  double saccade_prob = 0.15;  // per frame
  double saccade_amp = 0.25;  // radians, bound on the eye rotation magnitude
  double noise = 0.02;        // pixel noise standard deviation
  // The last frame is drawn with its yaw sign folded to non-negative, so
  // only earlier frames reveal the sign of the label yaw.
  bool ambiguity = false;
  std::uint64_t seed = 0;

  /// ConfigError unless amplitudes are non-negative with
  /// head_amp + saccade_amp <= pi/3 and the probability lies in [0, 1].
  void validate() const;
};

struct FramePose {
  GazeAngles head;
  GazeAngles eye;
};

struct Sequence {
  std::string id;
  std::vector<Image> frames;
  GazeAngles label;
};

/// Drawing geometry in pixels for an image of side `size`.
struct FaceGeometry {
  double face_radius, head_shift_per_rad;
  double eye_dx, eye_dy, eye_radius, pupil_radius;

  static FaceGeometry for_size(std::int64_t size);
  double pupil_travel() const { return eye_radius - pupil_radius; }
};

using Colour = std::array<float, 3>;
inline constexpr Colour kBackground{0.10f, 0.10f, 0.10f};
inline constexpr Colour kFace{0.85f, 0.65f, 0.50f};
inline constexpr Colour kEyeWhite{0.95f, 0.95f, 0.95f};
inline constexpr Colour kPupil{0.10f, 0.20f, 0.60f};

/// Anti-aliased render. Pupils sit at eye_angle / saccade_amp * travel from
/// the eye centre; positive yaw moves right, positive pitch moves up.
/// Noise is added only when `rng` is non-null and noise > 0.
Image render_frame(const FramePose& pose, std::int64_t size, double saccade_amp, double noise,
                   RandomSource* rng);

/// Head and eye poses of one sequence of `spec.seq_len` frames.
std::vector<FramePose> sample_trajectory(const SyntheticSpec& spec, RandomSource& rng);

/// Sequence `index` of the dataset; depends only on (spec, index).
Sequence generate_sequence(const SyntheticSpec& spec, std::int64_t index);
std::vector<Sequence> generate(const SyntheticSpec& spec);

/// Layout: root/labels.csv (seq_id,pitch_rad,yaw_rad) and
/// root/sequences/<seq_id>/frame_000.png ...
void save_dataset(const std::string& root, const std::vector<Sequence>& seqs);
std::vector<Sequence> load_dataset(const std::string& root);

/// Seeded shuffle; the first round(fraction * n) go to the first set.
/// DataError when either side would be empty.
std::pair<std::vector<Sequence>, std::vector<Sequence>> split(const std::vector<Sequence>& seqs, double fraction,
                                                              std::uint64_t seed);

struct Batch {
  FrameBatch<float> frames;  // [B, T, C, H, W]
  Tensor targets;            // [B, 2] (pitch, yaw)
};

/// Stacks the last `steps` frames of the selected sequences.
Batch make_batch(const std::vector<Sequence>& seqs, const std::vector<std::size_t>& indices, std::int64_t steps);

}  // namespace capstare
