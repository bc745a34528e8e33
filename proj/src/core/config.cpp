// SPDX-License-Identifier: Apache-2.0
#include "capstare/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace capstare {

namespace {

struct BadValue {
  std::string why;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename I>
void parse_int(const std::string& s, I& out) {
  I v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw BadValue{"expected an integer"};
  out = v;
}

void parse_value(const std::string& s, std::int64_t& out) { parse_int(s, out); }
void parse_value(const std::string& s, std::uint64_t& out) { parse_int(s, out); }
void parse_value(const std::string& s, int& out) { parse_int(s, out); }

void parse_value(const std::string& s, double& out) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw BadValue{"expected a number"};
  out = v;
}

void parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
  } else if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
  } else {
    throw BadValue{"expected true or false"};
  }
}

void parse_value(const std::string& s, std::string& out) { out = s; }

void parse_value(const std::string& s, DecoderMode& out) {
  try {
    out = parse_decoder_mode(s);
  } catch (const ConfigError&) {
    throw BadValue{"expected dual, single or dual_shared"};
  }
}

void parse_value(const std::string& s, AttentionScale& out) {
  if (s == "per_head") {
    out = AttentionScale::per_head;
  } else if (s == "literal") {
    out = AttentionScale::literal;
  } else {
    throw BadValue{"expected per_head or literal"};
  }
}

void parse_value(const std::string& s, std::vector<std::int64_t>& out) {
  std::vector<std::int64_t> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::int64_t x = 0;
    parse_int(trim(part), x);
    v.push_back(x);
  }
  if (v.empty()) throw BadValue{"expected a comma-separated list of integers"};
  out = std::move(v);
}

std::string format_value(std::int64_t v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(int v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(DecoderMode v) { return decoder_mode_name(v); }
std::string format_value(AttentionScale v) { return v == AttentionScale::literal ? "literal" : "per_head"; }
std::string format_value(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Binding {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
Binding bind(std::string key, Access access) {
  return {std::move(key), [access](RunConfig& c, const std::string& s) { parse_value(s, access(c)); },
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); }};
}

#define CS_KEY(name, member) bind(name, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      CS_KEY("model.image_size", model.encoder.image_size),
      CS_KEY("model.in_channels", model.encoder.in_channels),
      CS_KEY("model.encoder_channels", model.encoder.channels),
      CS_KEY("model.kernel", model.encoder.kernel),
      CS_KEY("model.stride", model.encoder.stride),
      CS_KEY("model.frozen_encoder", model.encoder.frozen),
      CS_KEY("model.num_capsules", model.num_capsules),
      CS_KEY("model.num_heads", model.num_heads),
      CS_KEY("model.capsule_dim", model.capsule_dim),
      CS_KEY("model.hidden_dim", model.hidden_dim),
      CS_KEY("model.seq_len", model.seq_len),
      CS_KEY("model.decoder_mode", model.decoder_mode),
      CS_KEY("model.use_capsules", model.use_capsules),
      CS_KEY("model.use_attention", model.use_attention),
      CS_KEY("model.decoder_split", model.decoder_split),
      CS_KEY("model.dropout", model.dropout),
      CS_KEY("model.attention_scale", model.attention_scale),
      CS_KEY("train.lr", train.lr),
      CS_KEY("train.lr_min", train.lr_min),
      CS_KEY("train.weight_decay", train.weight_decay),
      CS_KEY("train.decoupled_weight_decay", train.decoupled_weight_decay),
      CS_KEY("train.beta1", train.beta1),
      CS_KEY("train.beta2", train.beta2),
      CS_KEY("train.eps", train.eps),
      CS_KEY("train.epochs", train.epochs),
      CS_KEY("train.batch_size", train.batch_size),
      CS_KEY("train.val_batch_size", train.val_batch_size),
      CS_KEY("train.max_steps", train.max_steps),
      CS_KEY("train.eval_every", train.eval_every),
      CS_KEY("train.seed", train.seed),
      CS_KEY("data.source", data.source),
      CS_KEY("data.path", data.path),
      CS_KEY("data.count", data.synthetic.count),
      CS_KEY("data.seq_len", data.synthetic.seq_len),
      CS_KEY("data.head_amp", data.synthetic.head_amp),
      CS_KEY("data.head_freq", data.synthetic.head_freq),
      CS_KEY("data.saccade_prob", data.synthetic.saccade_prob),
      CS_KEY("data.saccade_amp", data.synthetic.saccade_amp),
      CS_KEY("data.noise", data.synthetic.noise),
      CS_KEY("data.ambiguity", data.synthetic.ambiguity),
      CS_KEY("data.seed", data.synthetic.seed),
      CS_KEY("data.train_fraction", data.train_fraction),
      CS_KEY("data.split_seed", data.split_seed),
      CS_KEY("out.dir", out_dir),
  };
  return table;
}

#undef CS_KEY

const Binding* find_binding(const std::string& key) {
  for (const auto& b : bindings())
    if (b.key == key) return &b;
  return nullptr;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

std::uint64_t RunConfig::init_seed() const { return RandomSource::mix(train.seed, "init"); }

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.source != "synthetic" && data.source != "directory")
    throw ConfigError("data.source: expected synthetic or directory, got '" + data.source + "'");
  if (data.source == "directory" && data.path.empty())
    throw ConfigError("missing required key data.path (data.source = directory)");
  if (data.source == "synthetic") {
    synthetic_spec(*this).validate();
    if (data.synthetic.seq_len < model.seq_len)
      throw ConfigError("data.seq_len " + std::to_string(data.synthetic.seq_len) + " is shorter than model.seq_len " +
                        std::to_string(model.seq_len));
  }
  if (!(data.train_fraction > 0 && data.train_fraction < 1))
    throw ConfigError("data.train_fraction must lie in (0, 1)");
  if (out_dir.empty()) throw ConfigError("missing required key out.dir");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& b : bindings()) keys.push_back(b.key);
  return keys;
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& b : bindings()) {
    const auto d = edit_distance(key, b.key);
    if (d < best_d) {
      best_d = d;
      best = b.key;
    }
  }
  return best;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value, const std::string& where) {
  const auto* b = find_binding(key);
  if (b == nullptr)
    throw ConfigError(where + ": unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  try {
    b->set(cfg, value);
  } catch (const BadValue& e) {
    throw ConfigError(where + ": cannot parse '" + value + "' for " + key + ": " + e.why);
  }
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  const auto* b = find_binding(key);
  if (b == nullptr) throw ConfigError("unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  return b->get(cfg);
}

RunConfig parse_config_text(const std::string& text, const std::string& origin, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + " line " + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
  return base;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void apply_flag(RunConfig& cfg, const std::string& flag) {
  std::string body = flag;
  if (body.rfind("--", 0) == 0) body.erase(0, 2);
  const auto eq = body.find('=');
  if (eq == std::string::npos) throw ConfigError("flag " + flag + ": expected --key=value");
  set_config_value(cfg, body.substr(0, eq), body.substr(eq + 1), "flag " + flag);
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& b : bindings()) {
    const auto sec = b.key.substr(0, b.key.find('.'));
    if (sec != section) {
      if (!section.empty()) out += "\n";
      section = sec;
    }
    out += b.key + " = " + b.get(cfg) + "\n";
  }
  return out;
}

bool same_config(const RunConfig& a, const RunConfig& b) {
  for (const auto& bd : bindings())
    if (bd.get(a) != bd.get(b)) return false;
  return true;
}

SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  auto s = cfg.data.synthetic;
  s.image_size = cfg.model.encoder.image_size;
  return s;
}

std::pair<std::vector<Sequence>, std::vector<Sequence>> load_run_data(const RunConfig& cfg) {
  std::vector<Sequence> all;
  if (cfg.data.source == "directory") {
    all = load_dataset(cfg.data.path);
    const auto& f = all.front().frames.front();
    if (f.height != cfg.model.encoder.image_size || f.width != cfg.model.encoder.image_size)
      throw DataError(DataError::Kind::invalid, cfg.data.path + ": frames are " + std::to_string(f.height) + "x" +
                                                    std::to_string(f.width) + ", model.image_size is " +
                                                    std::to_string(cfg.model.encoder.image_size));
    if (static_cast<std::int64_t>(all.front().frames.size()) < cfg.model.seq_len)
      throw DataError(DataError::Kind::count_mismatch, cfg.data.path + ": sequences hold " +
                                                           std::to_string(all.front().frames.size()) +
                                                           " frames, model.seq_len is " +
                                                           std::to_string(cfg.model.seq_len));
  } else {
    all = generate(synthetic_spec(cfg));
  }
  return split(all, cfg.data.train_fraction, cfg.data.split_seed);
}

}  // namespace capstare
