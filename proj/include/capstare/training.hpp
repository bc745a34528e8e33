// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "capstare/data.hpp"
#include "capstare/model.hpp"

namespace capstare {

struct TrainConfig {
  double lr = 1e-5;
  double lr_min = 0.0;
  double weight_decay = 1e-5;
  // false: L2 term added to the gradient (Adam); true: AdamW-style shrinkage.
  bool decoupled_weight_decay = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t epochs = 30;
  std::int64_t batch_size = 32;
  std::int64_t val_batch_size = 16;
  std::int64_t max_steps = 0;  // 0 = no limit
  std::int64_t eval_every = 1;
  std::uint64_t seed = 0;
  std::string log_path;  // CSV log; empty disables it

  void validate() const;
};

/// Cosine annealing from lr_max at epoch 0 towards lr_min at epoch `epochs`.
double cosine_lr(std::int64_t epoch, std::int64_t epochs, double lr_max, double lr_min);

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& predicted, const BasicTensor<T>& target);

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m, v;  // one per trainable tensor
};

/// Adam update of every tensor in `params` that holds a gradient.
void adam_step(const std::vector<NamedTensor<float>>& params, AdamState& state, const TrainConfig& cfg, double lr);

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based count of completed epochs
  std::int64_t step = 0;
  double lr = 0;
  double train_mse = 0;
  double val_err_deg = std::numeric_limits<double>::quiet_NaN();
};

struct TrainState {
  std::int64_t epoch = 0;  // epochs completed
  AdamState adam;
};

/// Eval-mode predictions [N, 2] using the last seq_len frames.
Tensor predict(GazeModel<float>& model, const std::vector<Sequence>& seqs, std::int64_t batch_size);
double evaluate(GazeModel<float>& model, const std::vector<Sequence>& seqs, std::int64_t batch_size);

using EpochHook = std::function<void(const EpochRecord&, const TrainState&)>;

/// Trains from state.epoch up to cfg.epochs. Shuffling and dropout draw from
/// a stream derived from (seed, epoch), so resuming from a saved state
/// reproduces an uninterrupted run. NumericError on a non-finite loss.
std::vector<EpochRecord> train(GazeModel<float>& model, const std::vector<Sequence>& train_set,
                               const std::vector<Sequence>& val_set, const TrainConfig& cfg, TrainState& state,
                               const EpochHook& hook = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  std::string config_echo;  // key = value lines; state lines start with "#!"
  std::vector<NamedTensor<float>> entries;

  const NamedTensor<float>* find(const std::string& name) const;
  /// Integer value of a "#! key = value" state line, or `fallback`.
  std::int64_t state_value(const std::string& key, std::int64_t fallback) const;
};

/// "CSTR", u32 version, length-prefixed config echo, u32 entry count, then
/// per entry: name, u32 rank, u32 dims, float32 values (all little-endian).
void write_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::string& path);

CheckpointFile make_checkpoint(const GazeModel<float>& model, const TrainState* state, const std::string& config_echo);
/// Copies parameters and buffers (and optimiser state when `state` is set).
/// FormatError(shape_mismatch) naming the first missing or mis-shaped tensor.
void restore_checkpoint(GazeModel<float>& model, TrainState* state, const CheckpointFile& file);

}  // namespace capstare
