// SPDX-License-Identifier: Apache-2.0
#include "capstare/capstare.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <numeric>
#include <string>

#include "capstare/ablation.hpp"
#include "capstare/config.hpp"
#include "capstare/metrics.hpp"
#include "capstare/training.hpp"

using namespace capstare;
namespace fs = std::filesystem;

struct cs_config {
  RunConfig cfg;
};

struct cs_model {
  RunConfig cfg;
  GazeModel<float> model;
};

namespace {

thread_local std::string g_error;

cs_status status_of(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return CS_ERR_CONFIG;
    case ErrorCategory::data:
    case ErrorCategory::shape: return CS_ERR_DATA;
    case ErrorCategory::numeric: return CS_ERR_NUMERIC;
    case ErrorCategory::format: return CS_ERR_FORMAT;
    default: return CS_ERR_INTERNAL;
  }
}

template <typename F>
cs_status guarded(F&& f) {
  try {
    g_error.clear();
    f();
    return CS_OK;
  } catch (const Error& e) {
    g_error = e.what();
    return status_of(e.category());
  } catch (const fs::filesystem_error& e) {
    g_error = e.what();
    return CS_ERR_DATA;
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return CS_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return CS_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw ConfigError(std::string(what) + " must not be NULL");
}

void copy_out(const std::string& s, char* buf, size_t cap, size_t* needed) {
  if (needed != nullptr) *needed = s.size() + 1;
  if (buf != nullptr && cap > s.size()) std::memcpy(buf, s.c_str(), s.size() + 1);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

struct Loaded {
  RunConfig cfg;
  CheckpointFile file;
};

Loaded open_checkpoint(const std::string& path) {
  Loaded l;
  l.file = read_checkpoint(path);
  l.cfg = parse_config_text(l.file.config_echo, path + " (config echo)");
  return l;
}

GazeModel<float> model_from(const Loaded& l) {
  GazeModel<float> m(l.cfg.model, static_cast<std::uint64_t>(l.file.state_value("model_seed", 0)));
  restore_checkpoint(m, nullptr, l.file);
  return m;
}

// Data section from `data_cfg` when given, model from the checkpoint.
RunConfig eval_config(const RunConfig& ckpt, const cs_config* data_cfg) {
  RunConfig r = ckpt;
  if (data_cfg != nullptr) {
    r.data = data_cfg->cfg.data;
    r.out_dir = data_cfg->cfg.out_dir;
    r.train.val_batch_size = data_cfg->cfg.train.val_batch_size;
  }
  return r;
}

}  // namespace

extern "C" {

const char* cs_last_error(void) { return g_error.c_str(); }

const char* cs_status_name(cs_status s) {
  switch (s) {
    case CS_OK: return "ok";
    case CS_ERR_CONFIG: return "config";
    case CS_ERR_DATA: return "data";
    case CS_ERR_NUMERIC: return "numeric";
    case CS_ERR_FORMAT: return "format";
    default: return "internal";
  }
}

const char* cs_version(void) { return "0.1.0"; }

cs_status cs_config_new(cs_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new cs_config{};
  });
}

cs_status cs_config_load(const char* path, cs_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new cs_config{load_config(path)};
  });
}

cs_status cs_config_set(cs_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    set_config_value(cfg->cfg, key, value, "cs_config_set");
  });
}

cs_status cs_config_apply_flag(cs_config* cfg, const char* flag) {
  return guarded([&] {
    require(cfg, "config");
    require(flag, "flag");
    apply_flag(cfg->cfg, flag);
  });
}

cs_status cs_config_get(const cs_config* cfg, const char* key, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(cfg, "config");
    require(key, "key");
    copy_out(get_config_value(cfg->cfg, key), buf, cap, needed);
  });
}

cs_status cs_config_echo(const cs_config* cfg, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(cfg, "config");
    copy_out(echo_config(cfg->cfg), buf, cap, needed);
  });
}

cs_status cs_config_validate(const cs_config* cfg) {
  return guarded([&] {
    require(cfg, "config");
    cfg->cfg.validate();
  });
}

void cs_config_free(cs_config* cfg) { delete cfg; }

cs_status cs_train(const cs_config* c, const char* resume, cs_log_fn log, void* user) {
  return guarded([&] {
    require(c, "config");
    auto cfg = c->cfg;
    cfg.validate();
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    const auto echo = echo_config(cfg);
    write_text(out / "config.txt", echo);
    auto emit = [&](const std::string& s) {
      if (log != nullptr) log(s.c_str(), user);
    };

    auto [train_set, val_set] = load_run_data(cfg);
    emit("data: " + std::to_string(train_set.size()) + " train / " + std::to_string(val_set.size()) +
         " validation sequences");
    GazeModel<float> model(cfg.model, cfg.init_seed());
    TrainState state;
    if (resume != nullptr) {
      const auto file = read_checkpoint(resume);
      restore_checkpoint(model, &state, file);
      emit("resuming after epoch " + std::to_string(state.epoch));
    }
    cfg.train.log_path = (out / "train_log.csv").string();
    const auto ckpt = (out / "checkpoint.cst").string();
    train(model, train_set, val_set, cfg.train, state, [&](const EpochRecord& r, const TrainState& s) {
      write_checkpoint(ckpt, make_checkpoint(model, &s, echo));
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %lld step %lld lr %.3g train_mse %.6f val_err %.3f deg",
                    static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.lr, r.train_mse,
                    r.val_err_deg);
      emit(buf);
    });
    if (state.epoch == 0) write_checkpoint(ckpt, make_checkpoint(model, &state, echo));
    emit("checkpoint: " + ckpt);
  });
}

cs_status cs_eval(const char* checkpoint, const cs_config* data_cfg, cs_report* out) {
  return guarded([&] {
    require(checkpoint, "checkpoint");
    auto l = open_checkpoint(checkpoint);
    auto model = model_from(l);
    const auto cfg = eval_config(l.cfg, data_cfg);
    auto [train_set, val_set] = load_run_data(cfg);
    MetricReport r;
    r.cell = "eval";
    r.seed = cfg.train.seed;
    const auto pred = predict(model, val_set, cfg.train.val_batch_size);
    Tensor truth({pred.dim(0), 2}, std::vector<float>(static_cast<std::size_t>(pred.numel())));
    for (std::size_t i = 0; i < val_set.size(); ++i) {
      truth.mutable_values()[2 * i] = static_cast<float>(val_set[i].label.pitch);
      truth.mutable_values()[2 * i + 1] = static_cast<float>(val_set[i].label.yaw);
    }
    const auto errs = angular_errors_deg(pred, truth);
    r.err_deg = std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size());
    r.params = model.trainable_count();
    r.flops = count_flops(cfg.model);
    r.latency_ms = measure_latency(model, 2, 10).mean_ms;
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "eval.csv", MetricReport::csv_header() + "\n" + r.csv_row() + "\n");
    if (out != nullptr) *out = {r.err_deg, r.params, r.flops, r.latency_ms, sliding_variance(errs, 5)};
  });
}

cs_status cs_gen_data(const cs_config* c, const char* root) {
  return guarded([&] {
    require(c, "config");
    require(root, "root");
    save_dataset(root, generate(synthetic_spec(c->cfg)));
  });
}

cs_status cs_export_heatmaps(const char* checkpoint, const cs_config* data_cfg, const int64_t* samples,
                             size_t count, const char* out_dir) {
  return guarded([&] {
    require(checkpoint, "checkpoint");
    require(out_dir, "out_dir");
    if (count > 0) require(samples, "samples");
    auto l = open_checkpoint(checkpoint);
    if (!l.cfg.model.use_capsules) throw ConfigError("export-heatmaps: the checkpoint's model has no capsules");
    auto model = model_from(l);
    const auto cfg = eval_config(l.cfg, data_cfg);
    auto [train_set, val_set] = load_run_data(cfg);
    const auto k = cfg.model.num_capsules;
    const auto t_len = cfg.model.seq_len;
    const auto side = cfg.model.encoder.output_size();
    RandomSource rng(0);
    NoGradGuard no_grad;
    for (size_t i = 0; i < count; ++i) {
      const auto idx = samples[i];
      if (idx < 0 || idx >= static_cast<std::int64_t>(val_set.size()))
        throw DataError(DataError::Kind::invalid, "sample " + std::to_string(idx) + " outside the " +
                                                      std::to_string(val_set.size()) + " validation sequences");
      auto batch = make_batch(val_set, {static_cast<std::size_t>(idx)}, t_len);
      auto r = model.forward(batch.frames, Mode::eval, rng);
      const auto pool = r.pooling.values();  // [1, T, K, N]
      const fs::path dir = fs::path(out_dir) / ("sample_" + std::to_string(idx));
      fs::create_directories(dir);
      std::ofstream csv(dir / "weights.csv");
      if (!csv) throw ConfigError("cannot write " + (dir / "weights.csv").string());
      csv << "sequence,frame,capsule,location,row,col,weight\n";
      const auto n = side * side;
      for (std::int64_t t = 0; t < t_len; ++t) {
        const auto frame = pool.subspan(static_cast<std::size_t>(t * k * n), static_cast<std::size_t>(k * n));
        const auto maps = capsule_heatmaps(frame, k, side, side);
        for (std::int64_t c = 0; c < k; ++c) {
          write_gray_png((dir / ("caps_" + std::to_string(c) + "_" + std::to_string(t) + ".png")).string(), side,
                         side, maps[c].pixels);
          for (std::int64_t j = 0; j < n; ++j) {
            char buf[160];
            std::snprintf(buf, sizeof buf, ",%lld,%lld,%lld,%lld,%lld,%.9g\n", static_cast<long long>(t),
                          static_cast<long long>(c), static_cast<long long>(j), static_cast<long long>(j / side),
                          static_cast<long long>(j % side), static_cast<double>(frame[c * n + j]));
            csv << val_set[idx].id << buf;
          }
        }
      }
    }
  });
}

cs_status cs_count(const cs_config* c, int64_t* params, double* flops_per_frame) {
  return guarded([&] {
    require(c, "config");
    if (params != nullptr) *params = count_params(c->cfg.model);
    if (flops_per_frame != nullptr) *flops_per_frame = count_flops(c->cfg.model);
  });
}

cs_status cs_bench(const cs_config* c, int32_t warmup, int32_t iters, cs_latency* out) {
  return guarded([&] {
    require(c, "config");
    GazeModel<float> model(c->cfg.model, c->cfg.init_seed());
    const auto s = measure_latency(model, warmup, iters);
    if (out != nullptr) *out = {s.mean_ms, s.p95_ms, iters};
  });
}

cs_status cs_ablate(const cs_config* c, const char* grid, int64_t seeds, const char* out_dir, cs_log_fn log,
                    void* user) {
  return guarded([&] {
    require(c, "config");
    require(grid, "grid");
    require(out_dir, "out_dir");
    c->cfg.validate();
    const std::string g = grid;
    const auto spec = fs::exists(g) ? load_grid(g) : builtin_grid(g);
    AblationOptions opt;
    opt.seeds = seeds;
    opt.progress = [&](const std::string& s) {
      if (log != nullptr) log(s.c_str(), user);
    };
    const auto result = run_ablation(c->cfg, spec, out_dir, opt);
    if (log != nullptr) log(render_table(spec, result.cells).c_str(), user);
  });
}

cs_status cs_model_load(const char* checkpoint, cs_model** out) {
  return guarded([&] {
    require(checkpoint, "checkpoint");
    require(out, "out");
    auto l = open_checkpoint(checkpoint);
    auto m = model_from(l);
    *out = new cs_model{l.cfg, std::move(m)};
  });
}

cs_status cs_model_predict(cs_model* m, const float* pixels, int64_t batch, float* out) {
  return guarded([&] {
    require(m, "model");
    require(pixels, "pixels");
    require(out, "out");
    if (batch < 1) throw ConfigError("batch must be positive");
    const auto& mc = m->cfg.model;
    const auto s = mc.encoder.image_size;
    const Shape shape{batch, mc.seq_len, mc.encoder.in_channels, s, s};
    std::vector<float> values(pixels, pixels + shape_numel(shape));
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!(values[i] >= 0.0f && values[i] <= 1.0f))
        throw DataError(DataError::Kind::invalid, "pixel " + std::to_string(i) + " = " + std::to_string(values[i]) +
                                                      " lies outside [0, 1]");
    RandomSource rng(0);
    NoGradGuard no_grad;
    const auto r = m->model.forward({Tensor(shape, std::move(values))}, Mode::eval, rng);
    const auto v = r.prediction.values();
    std::copy(v.begin(), v.end(), out);
  });
}

cs_status cs_model_shape(const cs_model* m, int64_t* seq_len, int64_t* image_size) {
  return guarded([&] {
    require(m, "model");
    if (seq_len != nullptr) *seq_len = m->cfg.model.seq_len;
    if (image_size != nullptr) *image_size = m->cfg.model.encoder.image_size;
  });
}

void cs_model_free(cs_model* m) { delete m; }

}  // extern "C"
