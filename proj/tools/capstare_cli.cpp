// SPDX-License-Identifier: Apache-2.0
//
// capstare command-line front end. Every verb accepts --config FILE plus any
// number of --section.key=value overrides applied after the file.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "capstare/capstare.h"

namespace {

struct Failure {
  cs_status status;
};

void check(cs_status s) {
  if (s != CS_OK) throw Failure{s};
}

void print_line(const char* line, void*) {
  std::cout << line << "\n" << std::flush;
}

class ConfigHandle {
 public:
  ConfigHandle() = default;
  ConfigHandle(const ConfigHandle&) = delete;
  ConfigHandle& operator=(const ConfigHandle&) = delete;
  ~ConfigHandle() { cs_config_free(cfg_); }

  void build(const std::string& path, const std::vector<std::string>& overrides) {
    check(path.empty() ? cs_config_new(&cfg_) : cs_config_load(path.c_str(), &cfg_));
    for (const auto& f : overrides) check(cs_config_apply_flag(cfg_, f.c_str()));
  }
  cs_config* get() const { return cfg_; }
  std::string value(const char* key) const {
    size_t need = 0;
    check(cs_config_get(cfg_, key, nullptr, 0, &need));
    std::string s(need, '\0');
    check(cs_config_get(cfg_, key, s.data(), s.size(), &need));
    s.resize(need - 1);
    return s;
  }

 private:
  cs_config* cfg_ = nullptr;
};

std::vector<std::string> overrides_of(const CLI::App* sub) {
  auto rest = sub->remaining();
  for (const auto& r : rest)
    if (r.rfind("--", 0) != 0 || r.find('=') == std::string::npos) {
      std::cerr << "error[config]: unexpected argument '" << r << "' (overrides are --section.key=value)\n";
      throw Failure{CS_ERR_CONFIG};
    }
  return rest;
}

std::vector<std::int64_t> parse_samples(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoll(part));
    } catch (const std::exception&) {
      std::cerr << "error[config]: --samples expects comma-separated indices, got '" << s << "'\n";
      throw Failure{CS_ERR_CONFIG};
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capstare: capsule-attention gaze estimation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cs_version()));

  std::string config_path, checkpoint, out, grid, samples = "0", resume;
  std::int64_t seeds = 0;
  int warmup = 3, iters = 20;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "config file (key = value lines)")->check(CLI::ExistingFile);
    sub->allow_extras();
    return sub;
  };

  auto* train = add_config(app.add_subcommand("train", "train a model; writes checkpoint, log and config echo"));
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = add_config(app.add_subcommand("eval", "evaluate a checkpoint on the validation split"));
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

  auto* gen = add_config(app.add_subcommand("gen-data", "write a synthetic dataset directory"));
  gen->add_option("--out", out, "dataset root (default: data.path)");

  auto* ablate = add_config(app.add_subcommand("ablate", "run an ablation grid"));
  ablate->add_option("--grid", grid, "heads_caps, dims, components, decoder, seqlen or a grid file")->required();
  ablate->add_option("--seeds", seeds, "seeds per cell (default: grid setting)");
  ablate->add_option("--out", out, "report directory (default: out.dir)");

  auto* heat = add_config(app.add_subcommand("export-heatmaps", "write capsule pooling heatmaps"));
  heat->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  heat->add_option("--samples", samples, "validation sample indices, comma separated");
  heat->add_option("--out", out, "output directory (default: <out.dir>/heatmaps)");

  auto* count = add_config(app.add_subcommand("count", "print parameter count and FLOPs per frame"));
  auto* bench = add_config(app.add_subcommand("bench", "measure forward latency"));
  bench->add_option("--warmup", warmup, "untimed iterations");
  bench->add_option("--iters", iters, "timed iterations (at least 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : CS_ERR_CONFIG;
  }

  try {
    ConfigHandle cfg;
    if (train->parsed()) {
      cfg.build(config_path, overrides_of(train));
      check(cs_train(cfg.get(), resume.empty() ? nullptr : resume.c_str(), print_line, nullptr));
    } else if (eval->parsed()) {
      const auto ov = overrides_of(eval);
      const bool custom = !config_path.empty() || !ov.empty();
      if (custom) cfg.build(config_path, ov);
      cs_report r{};
      check(cs_eval(checkpoint.c_str(), custom ? cfg.get() : nullptr, &r));
      std::printf("err_deg %.4f\nparams %lld\nflops_per_frame %.0f\nlatency_ms %.3f\nerr_window_var %.4f\n",
                  r.err_deg, static_cast<long long>(r.params), r.flops, r.latency_ms, r.err_window_var);
    } else if (gen->parsed()) {
      cfg.build(config_path, overrides_of(gen));
      const auto root = out.empty() ? cfg.value("data.path") : out;
      if (root.empty()) {
        std::cerr << "error[config]: gen-data needs --out or data.path\n";
        return CS_ERR_CONFIG;
      }
      check(cs_gen_data(cfg.get(), root.c_str()));
      std::cout << "wrote " << root << "\n";
    } else if (ablate->parsed()) {
      cfg.build(config_path, overrides_of(ablate));
      const auto dir = out.empty() ? cfg.value("out.dir") : out;
      check(cs_ablate(cfg.get(), grid.c_str(), seeds, dir.c_str(), print_line, nullptr));
    } else if (heat->parsed()) {
      const auto ov = overrides_of(heat);
      const bool custom = !config_path.empty() || !ov.empty();
      cfg.build(config_path, ov);
      const auto dir = out.empty() ? cfg.value("out.dir") + "/heatmaps" : out;
      const auto idx = parse_samples(samples);
      check(cs_export_heatmaps(checkpoint.c_str(), custom ? cfg.get() : nullptr, idx.data(), idx.size(),
                               dir.c_str()));
      std::cout << "wrote " << dir << "\n";
    } else if (count->parsed()) {
      cfg.build(config_path, overrides_of(count));
      std::int64_t params = 0;
      double flops = 0;
      check(cs_count(cfg.get(), &params, &flops));
      std::printf("params %lld\nflops_per_frame %.0f\n", static_cast<long long>(params), flops);
    } else if (bench->parsed()) {
      cfg.build(config_path, overrides_of(bench));
      cs_latency lat{};
      check(cs_bench(cfg.get(), warmup, iters, &lat));
      std::printf("iters %d\nmean_ms %.4f\np95_ms %.4f\n", lat.iters, lat.mean_ms, lat.p95_ms);
    }
  } catch (const Failure& f) {
    const char* msg = cs_last_error();
    if (msg != nullptr && *msg != '\0') std::cerr << "error[" << cs_status_name(f.status) << "]: " << msg << "\n";
    return f.status;
  }
  return 0;
}
