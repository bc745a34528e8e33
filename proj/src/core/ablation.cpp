// SPDX-License-Identifier: Apache-2.0
#include "capstare/ablation.hpp"

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace capstare {

namespace fs = std::filesystem;

void AblationGrid::validate() const {
  if (seeds < 1) throw ConfigError("grid " + name + ": seeds must be positive");
  if (cells.empty()) throw ConfigError("grid " + name + ": no cells");
  RunConfig probe;
  for (const auto& [k, v] : base) set_config_value(probe, k, v, "grid " + name + " base");
  for (const auto& c : cells)
    for (const auto& [k, v] : c.delta) set_config_value(probe, k, v, "grid " + name + " cell " + c.name);
}

std::vector<std::string> builtin_grid_names() { return {"heads_caps", "dims", "components", "decoder", "seqlen"}; }

AblationGrid builtin_grid(const std::string& name) {
  AblationGrid g;
  g.name = name;
  if (name == "heads_caps") {
    for (int k : {4, 8})
      for (int h : {4, 8})
        g.cells.push_back({"K" + std::to_string(k) + "_h" + std::to_string(h),
                           {{"model.num_capsules", std::to_string(k)}, {"model.num_heads", std::to_string(h)}}});
  } else if (name == "dims") {
    const int rows[][2] = {{64, 64}, {64, 128}, {64, 256}, {128, 128}, {128, 256}, {256, 256}};
    for (const auto& r : rows)
      g.cells.push_back({"D" + std::to_string(r[0]) + "_H" + std::to_string(r[1]),
                         {{"model.capsule_dim", std::to_string(r[0])}, {"model.hidden_dim", std::to_string(r[1])}}});
  } else if (name == "components") {
    g.cells = {{"caps+attn", {{"model.use_capsules", "true"}, {"model.use_attention", "true"}}},
               {"caps_only", {{"model.use_capsules", "true"}, {"model.use_attention", "false"}}},
               {"attn_only", {{"model.use_capsules", "false"}, {"model.use_attention", "true"}}},
               {"neither", {{"model.use_capsules", "false"}, {"model.use_attention", "false"}}}};
  } else if (name == "decoder") {
    g.cells = {{"dual", {{"model.decoder_mode", "dual"}}},
               {"single", {{"model.decoder_mode", "single"}}},
               {"dual_shared", {{"model.decoder_mode", "dual_shared"}}}};
  } else if (name == "seqlen") {
    g.base = {{"data.ambiguity", "true"}, {"data.seq_len", "9"}};
    g.cells = {{"T9", {{"model.seq_len", "9"}}}, {"T1", {{"model.seq_len", "1"}}}};
  } else {
    std::string names;
    for (const auto& n : builtin_grid_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown grid '" + name + "' (built-in grids: " + names + ")");
  }
  return g;
}

namespace {

ConfigDelta parse_assignments(std::istringstream& in, const std::string& where) {
  ConfigDelta d;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + tok + "'");
    d.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return d;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

MetricReport parse_row(const std::string& line, const std::string& where) {
  const auto f = split_csv(line);
  if (f.size() != 6) throw DataError(DataError::Kind::parse, where + ": expected 6 fields");
  try {
    MetricReport r;
    r.cell = f[0];
    r.seed = std::stoull(f[1]);
    r.err_deg = std::stod(f[2]);
    r.params = std::stoll(f[3]);
    r.flops = std::stod(f[4]);
    r.latency_ms = std::stod(f[5]);
    return r;
  } catch (const std::exception&) {
    throw DataError(DataError::Kind::parse, where + ": malformed row '" + line + "'");
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
  return s;
}

}  // namespace

AblationGrid load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid file " + path);
  AblationGrid g;
  g.name = fs::path(path).stem().string();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    const auto where = path + " line " + std::to_string(lineno);
    if (head == "name" || head == "seeds") {
      std::string eq, value;
      if (!(ls >> eq >> value) || eq != "=") throw ConfigError(where + ": expected '" + head + " = <value>'");
      if (head == "name") {
        g.name = value;
      } else {
        try {
          g.seeds = std::stoll(value);
        } catch (const std::exception&) {
          throw ConfigError(where + ": seeds must be an integer");
        }
      }
    } else if (head == "base") {
      auto d = parse_assignments(ls, where);
      g.base.insert(g.base.end(), d.begin(), d.end());
    } else if (head == "cell") {
      AblationCell c;
      if (!(ls >> c.name)) throw ConfigError(where + ": cell needs a name");
      c.delta = parse_assignments(ls, where);
      g.cells.push_back(std::move(c));
    } else {
      throw ConfigError(where + ": unknown directive '" + head + "'");
    }
  }
  g.validate();
  return g;
}

const CellSummary& AblationResult::cell(const std::string& name) const {
  for (const auto& c : cells)
    if (c.cell == name) return c;
  throw ContractError("no ablation cell named " + name);
}

RunConfig cell_config(const RunConfig& base, const AblationGrid& grid, const AblationCell& cell, std::int64_t seed) {
  RunConfig cfg = base;
  for (const auto& [k, v] : grid.base) set_config_value(cfg, k, v, "grid " + grid.name);
  for (const auto& [k, v] : cell.delta) set_config_value(cfg, k, v, "cell " + cell.name);
  cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(seed);
  cfg.validate();
  return cfg;
}

std::vector<CellSummary> summarize(const AblationGrid& grid, const std::vector<MetricReport>& runs,
                                   const std::vector<std::string>& failures) {
  std::vector<CellSummary> out;
  for (const auto& c : grid.cells) {
    CellSummary s;
    s.cell = c.name;
    std::vector<double> errs;
    double latency = 0;
    for (const auto& r : runs) {
      if (r.cell != c.name) continue;
      errs.push_back(r.err_deg);
      latency += r.latency_ms;
      s.params = r.params;
      s.flops = r.flops;
    }
    for (const auto& f : failures)
      if (f.rfind(c.name + ",", 0) == 0) s.failures.push_back(f);
    s.runs = static_cast<std::int64_t>(errs.size());
    if (!errs.empty()) {
      s.median_err = quantile(errs, 0.5);
      s.q1_err = quantile(errs, 0.25);
      s.q3_err = quantile(errs, 0.75);
      s.latency_ms = latency / static_cast<double>(errs.size());
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<MetricReport> read_raw_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::missing_file, "missing file " + path);
  std::vector<MetricReport> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != MetricReport::csv_header())
        throw DataError(DataError::Kind::parse, path + ": unexpected header '" + line + "'");
      continue;
    }
    if (!line.empty()) rows.push_back(parse_row(line, path + " line " + std::to_string(lineno)));
  }
  return rows;
}

std::string render_table(const AblationGrid& grid, const std::vector<CellSummary>& cells) {
  std::ostringstream os;
  char buf[256];
  os << "grid " << grid.name << "\n";
  std::snprintf(buf, sizeof buf, "%-14s | %-9s | %-16s | %-9s | %-11s | %-10s | %s\n", "cell", "Err (deg)",
                "IQR", "Size (M)", "Infer (ms)", "FLOPs (M)", "runs");
  os << buf << std::string(91, '-') << "\n";
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%-14s | %9.3f | [%6.3f, %6.3f] | %9.4f | %11.3f | %10.3f | %lld%s\n",
                  c.cell.c_str(), c.median_err, c.q1_err, c.q3_err, static_cast<double>(c.params) / 1e6,
                  c.latency_ms, c.flops / 1e6, static_cast<long long>(c.runs),
                  c.failures.empty() ? "" : (" (" + std::to_string(c.failures.size()) + " failed)").c_str());
    os << buf;
  }
  return os.str();
}

AblationResult run_ablation(const RunConfig& base, const AblationGrid& grid, const std::string& out_dir,
                            const AblationOptions& options) {
  grid.validate();
  const auto seeds = options.seeds > 0 ? options.seeds : grid.seeds;
  const fs::path root = fs::path(out_dir) / grid.name;
  const fs::path cache = fs::path(out_dir) / "cache";
  fs::create_directories(root / "runs");
  fs::create_directories(cache);
  write_text(root / "base_config.txt", echo_config(base));

  auto note = [&](const std::string& msg) {
    if (options.progress) options.progress(msg);
  };

  // Datasets keyed by their data section, generated once per grid.
  std::map<std::string, std::pair<std::vector<Sequence>, std::vector<Sequence>>> datasets;

  AblationResult result;
  for (const auto& cell : grid.cells) {
    for (std::int64_t s = 0; s < seeds; ++s) {
      try {
        auto cfg = cell_config(base, grid, cell, s);
        const auto echo = echo_config(cfg);
        const auto key = hex64(RandomSource::mix(0, echo));
        const auto cached = cache / (key + ".csv");
        if (fs::exists(cached)) {
          std::ifstream in(cached);
          std::string line;
          std::getline(in, line);
          auto r = parse_row(line, cached.string());
          r.cell = cell.name;
          result.runs.push_back(r);
          note(cell.name + " seed " + std::to_string(s) + ": cached " + std::to_string(r.err_deg) + " deg");
          continue;
        }
        std::string data_key;
        for (const auto& k : config_keys())
          if (k.rfind("data.", 0) == 0 || k == "model.image_size") data_key += k + "=" + get_config_value(cfg, k) + ";";
        auto it = datasets.find(data_key);
        if (it == datasets.end()) {
          note("generating data for " + cell.name);
          it = datasets.emplace(data_key, load_run_data(cfg)).first;
        }
        const auto& [train_set, val_set] = it->second;

        const auto run_dir = root / "runs" / sanitize(cell.name);
        fs::create_directories(run_dir);
        cfg.train.log_path = (run_dir / ("seed" + std::to_string(s) + ".csv")).string();
        GazeModel<float> model(cfg.model, cfg.init_seed());
        TrainState state;
        train(model, train_set, val_set, cfg.train, state);

        MetricReport r;
        r.cell = cell.name;
        r.seed = cfg.train.seed;
        r.err_deg = evaluate(model, val_set, cfg.train.val_batch_size);
        r.params = model.trainable_count();
        r.flops = count_flops(cfg.model);
        r.latency_ms = measure_latency(model, 2, std::max(options.latency_iters, 10)).mean_ms;
        write_text(cached, r.csv_row() + "\n");
        result.runs.push_back(r);
        note(cell.name + " seed " + std::to_string(s) + ": " + std::to_string(r.err_deg) + " deg");
      } catch (const Error& e) {
        std::string msg = e.what();
        for (auto& c : msg)
          if (c == ',' || c == '\n') c = ';';
        result.failures.push_back(cell.name + "," + std::to_string(s) + "," + category_name(e.category()) + "," +
                                  msg);
        note(cell.name + " seed " + std::to_string(s) + " failed: " + e.what());
      }
    }
  }

  std::string raw = MetricReport::csv_header() + "\n";
  for (const auto& r : result.runs) raw += r.csv_row() + "\n";
  write_text(root / "raw.csv", raw);
  std::string fails = "cell,seed,category,message\n";
  for (const auto& f : result.failures) fails += f + "\n";
  write_text(root / "failures.csv", fails);

  result.cells = summarize(grid, result.runs, result.failures);
  std::string summary = "cell,runs,median_err_deg,q1_err_deg,q3_err_deg,params,flops,latency_ms,failures\n";
  char buf[256];
  for (const auto& c : result.cells) {
    std::snprintf(buf, sizeof buf, ",%lld,%.6f,%.6f,%.6f,%lld,%.0f,%.4f,%zu\n", static_cast<long long>(c.runs),
                  c.median_err, c.q1_err, c.q3_err, static_cast<long long>(c.params), c.flops, c.latency_ms,
                  c.failures.size());
    summary += c.cell + buf;
  }
  write_text(root / "summary.csv", summary);
  write_text(root / "table.txt", render_table(grid, result.cells));
  return result;
}

}  // namespace capstare
