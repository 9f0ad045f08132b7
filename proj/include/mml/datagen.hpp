// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mml/numeric.hpp"

namespace mml {

// Malformed, infeasible or inconsistent data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, heldout };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "heldout"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "heldout") return Split::heldout;
  throw DataError("unknown split '" + s + "'");
}

struct SyntheticSpec {
  std::size_t num_classes = 20;
  std::size_t input_dim = 16;
  double class_centre_scale = 4.0;
  double noise_sigma = 1.0;
  double tail_exponent = 1.5;  // n_k proportional to (k+1)^-s above the floor
  std::size_t min_per_class = 20;
  std::size_t total_samples = 2000;
  double heldout_fraction = 0.3;
  std::uint64_t seed = 0;
};

struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return labels.size(); }

  std::size_t num_classes() const {
    int mx = -1;
    for (int y : labels) mx = std::max(mx, y);
    return static_cast<std::size_t>(mx + 1);
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out(num_classes(), 0);
    for (int y : labels) ++out[static_cast<std::size_t>(y)];
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Rows of `m` selected by `idx`.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

inline void validate(const SyntheticSpec& s) {
  if (s.num_classes < 2) throw DataError("num_classes must be >= 2");
  if (s.input_dim < 1) throw DataError("input_dim must be >= 1");
  if (s.min_per_class < 2) throw DataError("min_per_class must be >= 2");
  if (!(s.tail_exponent >= 0.0)) throw DataError("tail_exponent must be >= 0");
  if (!(s.noise_sigma >= 0.0)) throw DataError("noise_sigma must be >= 0");
  if (!(s.heldout_fraction >= 0.0 && s.heldout_fraction < 1.0)) {
    throw DataError("heldout_fraction must lie in [0, 1)");
  }
  if (s.num_classes * s.min_per_class > s.total_samples) {
    throw DataError("infeasible spec: " + std::to_string(s.num_classes) + " classes x " +
                    std::to_string(s.min_per_class) + " floor exceeds total_samples " +
                    std::to_string(s.total_samples));
  }
}

// Floor per class plus the remainder split by (k+1)^-s; leftover units from
// truncation go to the lowest class indices so counts stay non-increasing.
inline std::vector<std::size_t> longtail_counts(const SyntheticSpec& s) {
  validate(s);
  const std::size_t k = s.num_classes;
  std::vector<double> w(k);
  double wsum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    w[j] = std::pow(static_cast<double>(j + 1), -s.tail_exponent);
    wsum += w[j];
  }
  const std::size_t rest = s.total_samples - k * s.min_per_class;
  std::vector<std::size_t> counts(k);
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const auto share = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * w[j] / wsum));
    counts[j] = s.min_per_class + share;
    assigned += share;
  }
  for (std::size_t j = 0; assigned < rest; j = (j + 1) % k, ++assigned) ++counts[j];
  return counts;
}

inline Dataset gen_longtail(const SyntheticSpec& spec) {
  const auto counts = longtail_counts(spec);
  Rng rng = Rng(spec.seed).split(Stream::data);
  const std::size_t dim = spec.input_dim;

  Matrix means(spec.num_classes, dim);
  for (std::size_t j = 0; j < spec.num_classes; ++j) {
    double n2 = 0.0;
    do {
      for (double& v : means.row(j)) v = rng.normal();
      n2 = sq_norm(means.row(j));
    } while (n2 == 0.0);
    const double scale = spec.class_centre_scale / std::sqrt(n2);
    for (double& v : means.row(j)) v *= scale;
  }

  Dataset ds;
  ds.inputs = Matrix(spec.total_samples, dim);
  ds.labels.reserve(spec.total_samples);
  ds.splits.reserve(spec.total_samples);
  std::size_t r = 0;
  for (std::size_t j = 0; j < spec.num_classes; ++j) {
    const auto held = static_cast<std::size_t>(
        std::llround(spec.heldout_fraction * static_cast<double>(counts[j])));
    for (std::size_t t = 0; t < counts[j]; ++t, ++r) {
      for (std::size_t c = 0; c < dim; ++c) ds.inputs(r, c) = means(j, c) + spec.noise_sigma * rng.normal();
      ds.labels.push_back(static_cast<int>(j));
      ds.splits.push_back(t + held >= counts[j] ? Split::heldout : Split::train);
    }
  }
  return ds;
}

struct Pair {
  std::size_t a;
  std::size_t b;
  bool same;

  friend bool operator==(const Pair&, const Pair&) = default;
};

using PairList = std::vector<Pair>;

// num_pos same-class and num_neg cross-class unordered pairs from one split,
// drawn without replacement. Positives come first, then negatives.
inline PairList make_pairs(const Dataset& ds, Split split, std::size_t num_pos, std::size_t num_neg,
                           std::uint64_t seed) {
  const auto idx = ds.indices(split);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : idx) by_class[ds.labels[i]].push_back(i);

  std::uint64_t pos_avail = 0;
  for (const auto& [cls, v] : by_class) pos_avail += v.size() * (v.size() - 1) / 2;
  const std::uint64_t all_pairs = idx.size() * (idx.size() - (idx.empty() ? 0 : 1)) / 2;
  const std::uint64_t neg_avail = all_pairs - pos_avail;
  if (num_pos > pos_avail || num_neg > neg_avail) {
    throw DataError("make_pairs: requested " + std::to_string(num_pos) + " positive / " +
                    std::to_string(num_neg) + " negative pairs but split '" + to_string(split) +
                    "' offers " + std::to_string(pos_avail) + " / " + std::to_string(neg_avail));
  }

  Rng rng = Rng(seed).split(Stream::eval);
  PairList out;
  out.reserve(num_pos + num_neg);

  auto key = [](std::size_t a, std::size_t b) { return std::make_pair(std::min(a, b), std::max(a, b)); };

  // Dense requests enumerate and shuffle; sparse requests reject duplicates.
  auto draw = [&](bool same, std::size_t want, std::uint64_t avail) {
    if (want == 0) return;
    if (want * 2 > avail) {
      std::vector<std::pair<std::size_t, std::size_t>> all;
      for (std::size_t u = 0; u < idx.size(); ++u)
        for (std::size_t v = u + 1; v < idx.size(); ++v)
          if ((ds.labels[idx[u]] == ds.labels[idx[v]]) == same) all.emplace_back(idx[u], idx[v]);
      rng.shuffle(all);
      for (std::size_t t = 0; t < want; ++t) out.push_back({all[t].first, all[t].second, same});
      return;
    }
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::vector<const std::vector<std::size_t>*> classes;
    std::vector<std::uint64_t> cum;
    std::uint64_t acc = 0;
    for (const auto& [cls, v] : by_class) {
      classes.push_back(&v);
      acc += v.size() * (v.size() - 1) / 2;
      cum.push_back(acc);
    }
    while (seen.size() < want) {
      std::size_t a, b;
      if (same) {
        // class chosen proportionally to its pair count
        const auto r = static_cast<std::uint64_t>(rng.below(static_cast<std::size_t>(acc)));
        const auto c = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), r) - cum.begin());
        const auto& v = *classes[c];
        const std::size_t u = rng.below(v.size());
        std::size_t w = rng.below(v.size() - 1);
        if (w >= u) ++w;
        a = v[u];
        b = v[w];
      } else {
        a = idx[rng.below(idx.size())];
        b = idx[rng.below(idx.size())];
        if (ds.labels[a] == ds.labels[b]) continue;
      }
      if (seen.insert(key(a, b)).second) out.push_back({key(a, b).first, key(a, b).second, same});
    }
  };
  draw(true, num_pos, pos_avail);
  draw(false, num_neg, neg_avail);
  return out;
}

struct IdentProtocol {
  std::vector<std::size_t> probes;
  std::vector<std::size_t> gallery;  // gallery[i] is the mate of probes[i]
  std::vector<std::size_t> distractors;

  friend bool operator==(const IdentProtocol&, const IdentProtocol&) = default;
};

// Probe and gallery come from distinct heldout samples of each selected
// identity; distractors are any samples of the remaining identities.
inline IdentProtocol make_ident_protocol(const Dataset& ds, std::size_t num_probe_ids,
                                         std::size_t num_distractors, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> heldout;
  for (std::size_t i : ds.indices(Split::heldout)) heldout[ds.labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [cls, v] : heldout)
    if (v.size() >= 2) eligible.push_back(cls);
  if (eligible.size() < num_probe_ids) {
    throw DataError("make_ident_protocol: " + std::to_string(num_probe_ids) +
                    " probe identities requested but only " + std::to_string(eligible.size()) +
                    " have >= 2 heldout samples");
  }

  Rng rng = Rng(seed).split(Stream::eval).split(0x1D);
  rng.shuffle(eligible);
  eligible.resize(num_probe_ids);
  std::sort(eligible.begin(), eligible.end());

  IdentProtocol p;
  std::set<int> probe_ids(eligible.begin(), eligible.end());
  for (int cls : eligible) {
    auto v = heldout.at(cls);
    rng.shuffle(v);
    p.probes.push_back(v[0]);
    p.gallery.push_back(v[1]);
  }

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!probe_ids.count(ds.labels[i])) pool.push_back(i);
  if (pool.size() < num_distractors) {
    throw DataError("make_ident_protocol: " + std::to_string(num_distractors) +
                    " distractors requested but only " + std::to_string(pool.size()) +
                    " samples lie outside the probe identities");
  }
  rng.shuffle(pool);
  pool.resize(num_distractors);
  std::sort(pool.begin(), pool.end());
  p.distractors = std::move(pool);
  return p;
}

// --- file formats -----------------------------------------------------------

inline std::string dataset_record(const Dataset& ds, std::size_t i) {
  std::string line = "{\"label\":" + std::to_string(ds.labels[i]) + ",\"x\":[";
  const auto row = ds.inputs.row(i);
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (c) line += ',';
    line += format_double(row[c]);
  }
  line += "],\"split\":\"" + to_string(ds.splits[i]) + "\"}";
  return line;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write dataset file '" + path + "'");
  for (std::size_t i = 0; i < ds.size(); ++i) os << dataset_record(ds, i) << '\n';
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline Dataset parse_dataset(std::istream& is, const std::string& name) {
  std::vector<double> values;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::size_t dim = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw DataError(name + ": record " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("label") || !rec.contains("x") || !rec.contains("split")) {
      fail("expected object with label, x, split");
    }
    if (rec.size() != 3) fail("unexpected keys");
    if (!rec["label"].is_number_integer() || rec["label"].get<long long>() < 0) fail("label must be a non-negative integer");
    if (!rec["x"].is_array() || rec["x"].empty()) fail("x must be a non-empty array");
    if (!rec["split"].is_string()) fail("split must be a string");
    const auto& x = rec["x"];
    if (labels.empty()) dim = x.size();
    if (x.size() != dim) fail("x has " + std::to_string(x.size()) + " values, expected " + std::to_string(dim));
    for (const auto& v : x) {
      if (!v.is_number()) fail("x contains a non-number");
      values.push_back(v.get<double>());
    }
    labels.push_back(rec["label"].get<int>());
    try {
      splits.push_back(parse_split(rec["split"].get<std::string>()));
    } catch (const DataError& e) {
      fail(e.what());
    }
  }
  if (labels.empty()) throw DataError(name + ": dataset is empty");

  Dataset ds{Matrix(labels.size(), dim, std::move(values)), std::move(labels), std::move(splits)};
  const auto counts = ds.class_counts();
  for (std::size_t j = 0; j < counts.size(); ++j)
    if (counts[j] == 0) throw DataError(name + ": labels not dense, class " + std::to_string(j) + " has no samples");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read dataset file '" + path + "'");
  return parse_dataset(is, path);
}

inline nlohmann::json to_json(const PairList& pairs) {
  nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array(), s = nlohmann::json::array();
  for (const auto& p : pairs) {
    a.push_back(p.a);
    b.push_back(p.b);
    s.push_back(p.same);
  }
  return {{"index_a", a}, {"index_b", b}, {"same", s}};
}

inline PairList pairs_from_json(const nlohmann::json& j, const Dataset& ds) {
  const auto& a = j.at("index_a");
  const auto& b = j.at("index_b");
  const auto& s = j.at("same");
  if (a.size() != b.size() || a.size() != s.size()) throw DataError("pair list: array lengths differ");
  PairList out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Pair p{a[i].get<std::size_t>(), b[i].get<std::size_t>(), s[i].get<bool>()};
    if (p.a >= ds.size() || p.b >= ds.size()) throw DataError("pair list: index out of range at " + std::to_string(i));
    if ((ds.labels[p.a] == ds.labels[p.b]) != p.same) {
      throw DataError("pair list: flag disagrees with labels at " + std::to_string(i));
    }
    out.push_back(p);
  }
  return out;
}

inline nlohmann::json to_json(const IdentProtocol& p) {
  return {{"probe", p.probes}, {"gallery", p.gallery}, {"distractors", p.distractors}};
}

inline IdentProtocol protocol_from_json(const nlohmann::json& j) {
  return {j.at("probe").get<std::vector<std::size_t>>(), j.at("gallery").get<std::vector<std::size_t>>(),
          j.at("distractors").get<std::vector<std::size_t>>()};
}

}  // namespace mml
