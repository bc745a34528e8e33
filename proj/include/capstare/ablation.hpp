// SPDX-License-Identifier: Apache-2.0
//
// Ablation harness. A grid is a list of named cells, each a set of config
// overrides applied on top of a base RunConfig. Every cell is trained with
// the same seeds and the same data; seed s of a cell uses
// train.seed = base seed + s. Finished runs are cached on disk keyed by the
// full effective config, so an interrupted grid resumes where it stopped
// and identical cells shared between grids are trained once.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "capstare/config.hpp"
#include "capstare/metrics.hpp"

namespace capstare {

using ConfigDelta = std::vector<std::pair<std::string, std::string>>;

struct AblationCell {
  std::string name;
  ConfigDelta delta;
};

struct AblationGrid {
  std::string name;
  ConfigDelta base;  // applied before every cell's delta
  std::vector<AblationCell> cells;
  std::int64_t seeds = 5;

  /// ConfigError when a delta names an unknown key.
  void validate() const;
  std::int64_t run_count() const { return seeds * static_cast<std::int64_t>(cells.size()); }
};

std::vector<std::string> builtin_grid_names();
/// heads_caps, dims, components, decoder or seqlen.
AblationGrid builtin_grid(const std::string& name);

/// Grid file: "name = <grid>", "seeds = <n>", "base <key>=<value> ...",
/// "cell <name> <key>=<value> ..." lines; '#' comments.
AblationGrid load_grid(const std::string& path);

struct CellSummary {
  std::string cell;
  std::int64_t runs = 0;
  double median_err = 0, q1_err = 0, q3_err = 0;
  std::int64_t params = 0;
  double flops = 0;
  double latency_ms = 0;  // mean over runs
  std::vector<std::string> failures;

  bool iqr_overlaps(const CellSummary& other) const { return q1_err <= other.q3_err && other.q1_err <= q3_err; }
};

struct AblationOptions {
  std::int64_t seeds = 0;  // 0 keeps the grid's count
  int latency_iters = 10;
  std::function<void(const std::string&)> progress;
};

struct AblationResult {
  std::vector<MetricReport> runs;
  std::vector<std::string> failures;  // "cell,seed,category,message"
  std::vector<CellSummary> cells;

  const CellSummary& cell(const std::string& name) const;
};

/// Writes <out>/<grid>/{raw.csv, summary.csv, table.txt, failures.csv,
/// base_config.txt} and per-run training logs under <out>/<grid>/runs/.
/// Failed runs are listed and the grid continues.
AblationResult run_ablation(const RunConfig& base, const AblationGrid& grid, const std::string& out_dir,
                            const AblationOptions& options = {});

/// Effective config of one run.
RunConfig cell_config(const RunConfig& base, const AblationGrid& grid, const AblationCell& cell, std::int64_t seed);

std::vector<CellSummary> summarize(const AblationGrid& grid, const std::vector<MetricReport>& runs,
                                   const std::vector<std::string>& failures);
std::vector<MetricReport> read_raw_csv(const std::string& path);
std::string render_table(const AblationGrid& grid, const std::vector<CellSummary>& cells);

}  // namespace capstare
