// SPDX-License-Identifier: Apache-2.0
#include "capstare/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"

namespace capstare {

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("train.lr must be non-negative");
  if (lr_min < 0 || lr_min > lr) throw ConfigError("train.lr_min must lie in [0, train.lr]");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (batch_size < 1 || val_batch_size < 1) throw ConfigError("train batch sizes must be positive");
  if (max_steps < 0) throw ConfigError("train.max_steps must be non-negative");
  if (eval_every < 1) throw ConfigError("train.eval_every must be positive");
}

double cosine_lr(std::int64_t epoch, std::int64_t epochs, double lr_max, double lr_min) {
  if (epochs < 1 || epoch < 0 || epoch > epochs)
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epochs) + "]");
  const double progress = static_cast<double>(epoch) / static_cast<double>(epochs);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& predicted, const BasicTensor<T>& target) {
  if (predicted.shape() != target.shape())
    throw ShapeError("mse: " + shape_str(predicted.shape()) + " vs " + shape_str(target.shape()));
  auto d = sub(predicted, target);
  return mean(mul(d, d));
}

template Tensor mse_loss(const Tensor&, const Tensor&);
template Tensor64 mse_loss(const Tensor64&, const Tensor64&);

void adam_step(const std::vector<NamedTensor<float>>& params, AdamState& state, const TrainConfig& cfg, double lr) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].tensor;
    if (!p.has_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(p.numel()), 0.0f);
      v.assign(static_cast<std::size_t>(p.numel()), 0.0f);
    }
    const auto g = p.grad();
    auto x = p.mutable_values();
    for (std::size_t j = 0; j < x.size(); ++j) {
      double grad = g[j];
      if (!cfg.decoupled_weight_decay) grad += cfg.weight_decay * x[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double xj = x[j];
      if (cfg.decoupled_weight_decay) xj -= lr * cfg.weight_decay * xj;
      xj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      x[j] = static_cast<float>(xj);
    }
  }
}

Tensor predict(GazeModel<float>& model, const std::vector<Sequence>& seqs, std::int64_t batch_size) {
  NoGradGuard no_grad;
  RandomSource rng(0);
  std::vector<float> out;
  out.reserve(seqs.size() * 2);
  for (std::size_t start = 0; start < seqs.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(seqs.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    auto batch = make_batch(seqs, idx, model.config().seq_len);
    auto r = model.forward(batch.frames, Mode::eval, rng);
    const auto v = r.prediction.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor({static_cast<std::int64_t>(seqs.size()), 2}, std::move(out));
}

double evaluate(GazeModel<float>& model, const std::vector<Sequence>& seqs, std::int64_t batch_size) {
  auto pred = predict(model, seqs, batch_size);
  std::vector<float> truth;
  for (const auto& s : seqs) {
    truth.push_back(static_cast<float>(s.label.pitch));
    truth.push_back(static_cast<float>(s.label.yaw));
  }
  return mean_angular_error_deg(pred, Tensor(pred.shape(), std::move(truth)));
}

namespace {

double grad_norm(const std::vector<NamedTensor<float>>& params) {
  double s = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (float g : p.tensor.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

}  // namespace

std::vector<EpochRecord> train(GazeModel<float>& model, const std::vector<Sequence>& train_set,
                               const std::vector<Sequence>& val_set, const TrainConfig& cfg, TrainState& state,
                               const EpochHook& hook) {
  cfg.validate();
  if (train_set.empty()) throw DataError(DataError::Kind::invalid, "train: empty training set");
  const auto steps_per_seq = model.config().seq_len;
  const auto params = model.trainable();

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    const bool fresh = state.epoch == 0;
    log.open(cfg.log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw ConfigError("cannot write training log " + cfg.log_path);
    if (fresh) log << "epoch,step,lr,train_mse,val_err_deg\n";
  }

  std::vector<EpochRecord> history;
  const auto n = train_set.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  bool stop = cfg.max_steps > 0 && state.adam.step >= cfg.max_steps;
  for (std::int64_t epoch = state.epoch; epoch < cfg.epochs && !stop; ++epoch) {
    RandomSource rng(RandomSource::mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min);

    double loss_sum = 0;
    std::int64_t loss_count = 0;
    for (std::size_t start = 0; start < n && !stop; start += bs) {
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(n, start + bs));
      // Batch statistics need at least two frames.
      if (static_cast<std::int64_t>(idx.size()) * steps_per_seq < 2) continue;
      auto batch = make_batch(train_set, idx, steps_per_seq);
      auto r = model.forward(batch.frames, Mode::train, rng);
      auto loss = mse_loss(r.prediction, batch.targets);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch + 1 << ", step " << state.adam.step + 1
           << " (lr " << lr << ", batch of " << idx.size() << ", first sequence " << train_set[idx[0]].id << ")";
        throw NumericError(os.str());
      }
      loss.backward();
      const double gn = grad_norm(params);
      if (!std::isfinite(gn)) {
        std::ostringstream os;
        os << "non-finite gradient at epoch " << epoch + 1 << ", step " << state.adam.step + 1 << " (loss "
           << value << ", lr " << lr << ")";
        throw NumericError(os.str());
      }
      adam_step(params, state.adam, cfg, lr);
      model.zero_grad();
      loss_sum += value * static_cast<double>(idx.size());
      loss_count += static_cast<std::int64_t>(idx.size());
      if (cfg.max_steps > 0 && state.adam.step >= cfg.max_steps) stop = true;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.step = state.adam.step;
    rec.lr = lr;
    rec.train_mse = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    const bool last = epoch + 1 == cfg.epochs || stop;
    if (!val_set.empty() && ((epoch + 1) % cfg.eval_every == 0 || last))
      rec.val_err_deg = evaluate(model, val_set, cfg.val_batch_size);
    state.epoch = epoch + 1;
    history.push_back(rec);
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.6f\n", static_cast<long long>(rec.epoch),
                    static_cast<long long>(rec.step), rec.lr, rec.train_mse, rec.val_err_deg);
      log << buf << std::flush;
    }
    if (hook) hook(rec, state);
  }
  return history;
}

const NamedTensor<float>* CheckpointFile::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::int64_t CheckpointFile::state_value(const std::string& key, std::int64_t fallback) const {
  std::istringstream in(config_echo);
  std::string line;
  const std::string prefix = "#! " + key + " = ";
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) {
      const auto text = line.substr(prefix.size());
      try {
        // Seeds use the full unsigned range; keep the bit pattern.
        if (!text.empty() && text[0] == '-') return std::stoll(text);
        return static_cast<std::int64_t>(std::stoull(text));
      } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::corrupt, "checkpoint state line '" + line + "' is not an integer");
      }
    }
  return fallback;
}

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
  io::LeWriter w;
  w.raw("CSTR");
  w.u32(kCheckpointVersion);
  w.str(file.config_echo);
  w.u32(static_cast<std::uint32_t>(file.entries.size()));
  for (const auto& e : file.entries) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.tensor.values()) w.f32(v);
  }
  io::write_file(path, w.bytes());
}

CheckpointFile read_checkpoint(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::LeReader r(bytes, path);
  if (bytes.size() < 4 || r.raw(4) != "CSTR")
    throw FormatError(FormatError::Kind::bad_magic, path + ": not a checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::version, path + ": checkpoint version " + std::to_string(version) +
                                                      " unsupported (expected " +
                                                      std::to_string(kCheckpointVersion) + ")");
  CheckpointFile file;
  file.config_echo = r.str();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> e;
    e.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw FormatError(FormatError::Kind::corrupt, path + ": implausible rank for " + e.name);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    if (r.remaining() < n * 4) throw FormatError(FormatError::Kind::corrupt, path + ": truncated tensor " + e.name);
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    e.tensor = Tensor(shape, std::move(values));
    file.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError(FormatError::Kind::corrupt, path + ": trailing bytes after last tensor");
  return file;
}

CheckpointFile make_checkpoint(const GazeModel<float>& model, const TrainState* state, const std::string& echo) {
  CheckpointFile f;
  f.config_echo = echo;
  if (!f.config_echo.empty() && f.config_echo.back() != '\n') f.config_echo += '\n';
  if (state != nullptr) {
    f.config_echo += "#! epoch = " + std::to_string(state->epoch) + "\n";
    f.config_echo += "#! adam_step = " + std::to_string(state->adam.step) + "\n";
  }
  f.config_echo += "#! model_seed = " + std::to_string(model.seed()) + "\n";
  for (const auto& p : model.parameters()) f.entries.push_back({p.name, p.tensor.detach()});
  for (const auto& b : model.buffers()) f.entries.push_back({b.name, b.tensor.detach()});
  if (state != nullptr) {
    const auto params = model.trainable();
    for (std::size_t i = 0; i < params.size() && i < state->adam.m.size(); ++i) {
      if (state->adam.m[i].empty()) continue;
      f.entries.push_back({"adam.m/" + params[i].name, Tensor(params[i].tensor.shape(), state->adam.m[i])});
      f.entries.push_back({"adam.v/" + params[i].name, Tensor(params[i].tensor.shape(), state->adam.v[i])});
    }
  }
  return f;
}

namespace {

const NamedTensor<float>& expect(const CheckpointFile& f, const std::string& name, const Shape& shape) {
  const auto* e = f.find(name);
  if (e == nullptr) throw FormatError(FormatError::Kind::shape_mismatch, "checkpoint lacks tensor " + name);
  if (e->tensor.shape() != shape)
    throw FormatError(FormatError::Kind::shape_mismatch, "tensor " + name + " has shape " +
                                                             shape_str(e->tensor.shape()) + ", model expects " +
                                                             shape_str(shape));
  return *e;
}

}  // namespace

void restore_checkpoint(GazeModel<float>& model, TrainState* state, const CheckpointFile& file) {
  auto targets = model.parameters();
  const auto bufs = model.buffers();
  targets.insert(targets.end(), bufs.begin(), bufs.end());
  // Validate everything before touching the model.
  for (const auto& t : targets) expect(file, t.name, t.tensor.shape());
  for (auto& t : targets) {
    const auto src = file.find(t.name)->tensor.values();
    auto dst = t.tensor.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (state == nullptr) return;
  state->epoch = file.state_value("epoch", 0);
  state->adam.step = file.state_value("adam_step", 0);
  const auto params = model.trainable();
  state->adam.m.assign(params.size(), {});
  state->adam.v.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (file.find("adam.m/" + params[i].name) == nullptr) continue;
    const auto& m = expect(file, "adam.m/" + params[i].name, params[i].tensor.shape());
    const auto& v = expect(file, "adam.v/" + params[i].name, params[i].tensor.shape());
    state->adam.m[i].assign(m.tensor.values().begin(), m.tensor.values().end());
    state->adam.v[i].assign(v.tensor.values().begin(), v.tensor.values().end());
  }
}

}  // namespace capstare
