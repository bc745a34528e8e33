/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the capstare gaze model. All handles are opaque; every
 * call that can fail returns a cs_status and leaves a message retrievable
 * with cs_last_error() on the calling thread.
 */
#ifndef CAPSTARE_H
#define CAPSTARE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CS_API __declspec(dllexport)
#else
#define CS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values double as process exit codes. */
typedef enum cs_status {
  CS_OK = 0,
  CS_ERR_INTERNAL = 1,
  CS_ERR_CONFIG = 2,
  CS_ERR_DATA = 3,
  CS_ERR_NUMERIC = 4,
  CS_ERR_FORMAT = 5
} cs_status;

typedef struct cs_config cs_config;
typedef struct cs_model cs_model;

typedef void (*cs_log_fn)(const char* line, void* user);

typedef struct cs_report {
  double err_deg;
  int64_t params;
  double flops;
  double latency_ms;
  /* mean variance of per-sample error over windows of 5 consecutive
   * validation samples (deg^2); NaN with fewer than 5 samples */
  double err_window_var;
} cs_report;

typedef struct cs_latency {
  double mean_ms;
  double p95_ms;
  int32_t iters;
} cs_latency;

CS_API const char* cs_last_error(void);
CS_API const char* cs_status_name(cs_status s);
CS_API const char* cs_version(void);

/* ---- configuration ---- */
CS_API cs_status cs_config_new(cs_config** out);
CS_API cs_status cs_config_load(const char* path, cs_config** out);
CS_API cs_status cs_config_set(cs_config* cfg, const char* key, const char* value);
/* "--key=value" */
CS_API cs_status cs_config_apply_flag(cs_config* cfg, const char* flag);
/* Copies a NUL-terminated string into buf when it fits; *needed receives
 * the full length including the terminator. */
CS_API cs_status cs_config_get(const cs_config* cfg, const char* key, char* buf, size_t cap, size_t* needed);
CS_API cs_status cs_config_echo(const cs_config* cfg, char* buf, size_t cap, size_t* needed);
CS_API cs_status cs_config_validate(const cs_config* cfg);
CS_API void cs_config_free(cs_config* cfg);

/* ---- commands ---- */
/* Trains on cfg's data; writes <out.dir>/{config.txt, train_log.csv,
 * checkpoint.cst}. A non-NULL resume path continues from that checkpoint. */
CS_API cs_status cs_train(const cs_config* cfg, const char* resume, cs_log_fn log, void* user);
/* Evaluates a checkpoint on the validation split of data_cfg (or of the
 * checkpoint's own config when NULL); writes <out.dir>/eval.csv. */
CS_API cs_status cs_eval(const char* checkpoint, const cs_config* data_cfg, cs_report* out);
CS_API cs_status cs_gen_data(const cs_config* cfg, const char* root);
/* For each validation sample index: K grayscale PNGs per frame plus a
 * weights CSV, under out_dir/sample_<i>/. */
CS_API cs_status cs_export_heatmaps(const char* checkpoint, const cs_config* data_cfg, const int64_t* samples,
                                    size_t count, const char* out_dir);
CS_API cs_status cs_count(const cs_config* cfg, int64_t* params, double* flops_per_frame);
CS_API cs_status cs_bench(const cs_config* cfg, int32_t warmup, int32_t iters, cs_latency* out);
/* grid: a built-in grid name or a grid file path; seeds <= 0 keeps the
 * grid default. Reports go to out_dir/<grid>/. */
CS_API cs_status cs_ablate(const cs_config* cfg, const char* grid, int64_t seeds, const char* out_dir,
                           cs_log_fn log, void* user);

/* ---- inference ---- */
CS_API cs_status cs_model_load(const char* checkpoint, cs_model** out);
/* pixels: [batch, T, 3, S, S] in [0, 1]; out: [batch, 2] pitch/yaw. */
CS_API cs_status cs_model_predict(cs_model* model, const float* pixels, int64_t batch, float* out);
CS_API cs_status cs_model_shape(const cs_model* model, int64_t* seq_len, int64_t* image_size);
CS_API void cs_model_free(cs_model* model);

#ifdef __cplusplus
}
#endif

#endif /* CAPSTARE_H */
