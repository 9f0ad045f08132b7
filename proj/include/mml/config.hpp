// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

// Run configuration: a flat, sectioned key-value text format.
//
//   # comment            ; comment
//   seed = 7             keys before any [section] header belong to the root
//   [train]
//   scheme = III
//   hidden = 32,32       lists are comma separated; an empty value is an empty list
//
// Section and key names are fixed; unknown ones are rejected with the line
// number. Command-line overrides use the same names: --train.beta=0.1, --seed=3.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mml/datagen.hpp"
#include "mml/evalkit.hpp"
#include "mml/trainer.hpp"

namespace mml {

struct EvalOptions {
  std::size_t folds = 10;
  std::size_t num_pos = 1000;
  std::size_t num_neg = 1000;
  std::size_t num_probe_ids = 10;
  std::size_t num_distractors = 100;
  std::vector<double> far_levels;
  std::size_t hist_bins = 10;
  std::optional<double> hist_lo;
  std::optional<double> hist_hi;
  Metric metric = Metric::euclidean;
  std::vector<std::string> protocols;
};

struct SweepOptions {
  SweepParameter parameter = SweepParameter::margin;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
};

namespace detail {

struct KeySpec {
  const char* key;
  const char* default_value;
};

// Declaration order is the canonical echo order.
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"seed", "0"},
      {"data.num_classes", "20"},
      {"data.input_dim", "16"},
      {"data.class_centre_scale", "4"},
      {"data.noise_sigma", "1"},
      {"data.tail_exponent", "1.5"},
      {"data.min_per_class", "20"},
      {"data.total_samples", "2000"},
      {"data.heldout_fraction", "0.3"},
      {"model.hidden", "32"},
      {"model.embedding_dim", "8"},
      {"model.activation", "tanh"},
      {"train.scheme", "III"},
      {"train.alpha", "0.01"},
      {"train.beta", "0.01"},
      {"train.gamma", "0.5"},
      {"train.margin", "0"},
      {"train.coupling", "coupled"},
      {"train.pair_scope", "batch_classes"},
      {"train.batch_size", "64"},
      {"train.iterations", "2000"},
      {"train.base_lr", "0.05"},
      {"train.lr_decay_every", "1000"},
      {"train.lr_decay_factor", "0.1"},
      {"train.weight_decay", "0"},
      {"train.warm_start", ""},
      {"train.centre_init", "zeros"},
      {"train.centre_init_sigma", "1"},
      {"train.trace_interval", "1"},
      {"eval.folds", "10"},
      {"eval.num_pos", "1000"},
      {"eval.num_neg", "1000"},
      {"eval.num_probe_ids", "10"},
      {"eval.num_distractors", "100"},
      {"eval.far_levels", "0.001,0.01,0.1"},
      {"eval.hist_bins", "10"},
      {"eval.hist_lo", ""},
      {"eval.hist_hi", ""},
      {"eval.metric", "euclidean"},
      {"eval.protocols", "verification,roc,cmc,histogram"},
      {"sweep.parameter", "M"},
      {"sweep.values", ""},
      {"sweep.seeds", ""},
      {"gradcheck.samples", "200"},
      {"gradcheck.epsilon", "1e-5"},
      {"gradcheck.tolerance", "1e-4"},
      {"gradcheck.warmup_steps", "5"},
      {"gradcheck.corrupt", "false"},
  };
  return schema;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : detail::config_schema()) values_[k.key] = k.default_value;
  }

  static bool known(const std::string& key) { return index_of(key) >= 0; }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  void load_text(const std::string& text, const std::string& name = "<config>") {
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      auto where = [&] { return name + ":" + std::to_string(lineno) + ": "; };
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError(where() + "unterminated section header");
        section = detail::trim(t.substr(1, t.size() - 2));
        static const std::vector<std::string> sections{"data", "model", "train", "eval", "sweep", "gradcheck"};
        if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
          throw ConfigError(where() + "unknown section [" + section + "]");
        }
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
      const std::string key = detail::trim(t.substr(0, eq));
      const std::string full = section.empty() ? key : section + "." + key;
      if (!known(full)) throw ConfigError(where() + "unknown key '" + full + "'");
      values_[full] = detail::trim(t.substr(eq + 1));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    load_text(ss.str(), path);
  }

  // Accepts "--section.key=value" or "section.key=value".
  void apply_override(const std::string& arg) {
    std::string a = arg;
    if (a.rfind("--", 0) == 0) a = a.substr(2);
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + arg + "' must have the form --section.key=value");
    set(a.substr(0, eq), a.substr(eq + 1));
  }

  // Canonical text in schema order; parses back to the same configuration.
  std::string to_text() const {
    std::string out, section;
    for (const auto& k : detail::config_schema()) {
      const std::string key = k.key;
      const auto dot = key.find('.');
      const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
      if (sec != section) {
        out += "\n[" + sec + "]\n";
        section = sec;
      }
      out += (dot == std::string::npos ? key : key.substr(dot + 1)) + " = " + values_.at(key) + "\n";
    }
    return out;
  }

  nlohmann::json echo() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  // --- typed accessors ---

  std::uint64_t seed() const { return get_u64("seed"); }

  SyntheticSpec data() const {
    SyntheticSpec s;
    s.num_classes = get_size("data.num_classes");
    s.input_dim = get_size("data.input_dim");
    s.class_centre_scale = get_double("data.class_centre_scale");
    s.noise_sigma = get_double("data.noise_sigma");
    s.tail_exponent = get_double("data.tail_exponent");
    s.min_per_class = get_size("data.min_per_class");
    s.total_samples = get_size("data.total_samples");
    s.heldout_fraction = get_double("data.heldout_fraction");
    s.seed = seed();
    return s;
  }

  TrainConfig train() const {
    TrainConfig c;
    c.scheme = parse_scheme(get("train.scheme"));
    c.alpha = get_double("train.alpha");
    c.beta = get_double("train.beta");
    c.gamma = get_double("train.gamma");
    c.mml.margin = get_double("train.margin");
    const auto& coupling = get("train.coupling");
    if (coupling == "coupled") {
      c.mml.coupling = Coupling::coupled;
    } else if (coupling == "detached") {
      c.mml.coupling = Coupling::detached;
    } else {
      throw ConfigError("train.coupling must be coupled or detached");
    }
    const auto& scope = get("train.pair_scope");
    if (scope == "batch_classes") {
      c.mml.pair_scope = PairScope::batch_classes;
    } else if (scope == "all_classes") {
      c.mml.pair_scope = PairScope::all_classes;
    } else {
      throw ConfigError("train.pair_scope must be batch_classes or all_classes");
    }
    c.batch_size = get_size("train.batch_size");
    c.iterations = get_size("train.iterations");
    c.base_lr = get_double("train.base_lr");
    c.lr_decay_every = get_size("train.lr_decay_every");
    c.lr_decay_factor = get_double("train.lr_decay_factor");
    c.weight_decay = get_double("train.weight_decay");
    c.seed = seed();
    c.warm_start = get("train.warm_start");
    c.hidden.clear();
    for (const auto& h : detail::split_list(get("model.hidden"))) c.hidden.push_back(to_size("model.hidden", h));
    c.embedding_dim = get_size("model.embedding_dim");
    c.activation = parse_activation(get("model.activation"));
    const auto& init = get("train.centre_init");
    if (init == "zeros") {
      c.centre_init = CentreInit::zeros;
    } else if (init == "gaussian") {
      c.centre_init = CentreInit::seeded_gaussian;
    } else {
      throw ConfigError("train.centre_init must be zeros or gaussian");
    }
    c.centre_init_sigma = get_double("train.centre_init_sigma");
    c.trace_interval = get_size("train.trace_interval");
    validate(c);
    return c;
  }

  EvalOptions eval() const {
    EvalOptions e;
    e.folds = get_size("eval.folds");
    e.num_pos = get_size("eval.num_pos");
    e.num_neg = get_size("eval.num_neg");
    e.num_probe_ids = get_size("eval.num_probe_ids");
    e.num_distractors = get_size("eval.num_distractors");
    for (const auto& v : detail::split_list(get("eval.far_levels"))) e.far_levels.push_back(to_double("eval.far_levels", v));
    e.hist_bins = get_size("eval.hist_bins");
    if (!get("eval.hist_lo").empty()) e.hist_lo = get_double("eval.hist_lo");
    if (!get("eval.hist_hi").empty()) e.hist_hi = get_double("eval.hist_hi");
    e.metric = parse_metric(get("eval.metric"));
    e.protocols = detail::split_list(get("eval.protocols"));
    for (const auto& p : e.protocols) {
      if (p != "verification" && p != "roc" && p != "cmc" && p != "histogram") {
        throw ConfigError("eval.protocols: unknown protocol '" + p + "'");
      }
    }
    return e;
  }

  SweepOptions sweep() const {
    SweepOptions s;
    s.parameter = parse_sweep_parameter(get("sweep.parameter"));
    for (const auto& v : detail::split_list(get("sweep.values"))) s.values.push_back(to_double("sweep.values", v));
    for (const auto& v : detail::split_list(get("sweep.seeds"))) s.seeds.push_back(to_u64("sweep.seeds", v));
    return s;
  }

  GradcheckOptions gradcheck() const {
    GradcheckOptions g;
    g.samples = get_size("gradcheck.samples");
    g.epsilon = get_double("gradcheck.epsilon");
    g.tolerance = get_double("gradcheck.tolerance");
    g.warmup_steps = get_size("gradcheck.warmup_steps");
    const auto& corrupt = get("gradcheck.corrupt");
    if (corrupt != "true" && corrupt != "false") throw ConfigError("gradcheck.corrupt must be true or false");
    g.corrupt_factor = corrupt == "true" ? 1.01 : 1.0;
    return g;
  }

 private:
  static int index_of(const std::string& key) {
    const auto& s = detail::config_schema();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (key == s[i].key) return static_cast<int>(i);
    return -1;
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      return parse_double(v);
    } catch (const NumericError&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }
  static std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
  }
  static std::size_t to_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(to_u64(key, v));
  }

  double get_double(const std::string& key) const { return to_double(key, get(key)); }
  std::uint64_t get_u64(const std::string& key) const { return to_u64(key, get(key)); }
  std::size_t get_size(const std::string& key) const { return to_size(key, get(key)); }

  std::map<std::string, std::string> values_;
};

}  // namespace mml
