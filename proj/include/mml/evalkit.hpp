// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mml/centre_bank.hpp"
#include "mml/datagen.hpp"
#include "mml/numeric.hpp"
#include "mml/trainer.hpp"

namespace mml {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Metric { euclidean, cosine };

inline std::string to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

inline Metric parse_metric(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw ConfigError("unknown metric '" + s + "'");
}

// Squared Euclidean distance, or 1 - cosine similarity. Lower means more similar.
inline double pair_distance(std::span<const double> a, std::span<const double> b,
                            Metric m = Metric::euclidean) {
  if (m == Metric::euclidean) return sq_dist(a, b);
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
  const double na = std::sqrt(sq_norm(a)), nb = std::sqrt(sq_norm(b));
  if (na == 0.0 || nb == 0.0) throw EvalError("cosine distance of a zero vector");
  return 1.0 - dot / (na * nb);
}

inline std::vector<double> pair_distances(const Matrix& a, const Matrix& b, Metric m = Metric::euclidean) {
  if (!a.same_shape(b)) throw EvalError("pair_distances: " + a.shape_string() + " vs " + b.shape_string());
  std::vector<double> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = pair_distance(a.row(i), b.row(i), m);
  return out;
}

// ---------------------------------------------------------------------------
// Verification

struct VerificationResult {
  double accuracy = 0.0;
  // Mean of the per-fold thresholds; NaN when some fold rejected every pair.
  double threshold = 0.0;
  std::vector<double> fold_accuracy;
  std::vector<double> fold_threshold;
};

namespace detail {

// Threshold among {-inf} U training distances maximising accuracy of the rule
// "same iff d <= t"; the smallest wins ties. Decisions depend only on the
// ordering of distances.
inline double best_threshold(const std::vector<double>& d, const std::vector<bool>& same) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  std::size_t neg_total = 0;
  for (bool s : same) neg_total += s ? 0 : 1;
  // t = -inf accepts nothing.
  long best_correct = static_cast<long>(neg_total);
  double best_t = -std::numeric_limits<double>::infinity();
  long correct = best_correct;
  for (std::size_t r = 0; r < order.size();) {
    const double t = d[order[r]];
    while (r < order.size() && d[order[r]] == t) {
      correct += same[order[r]] ? 1 : -1;
      ++r;
    }
    if (correct > best_correct) {
      best_correct = correct;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace detail

inline VerificationResult verification_accuracy_from_distances(const std::vector<double>& dist,
                                                              const std::vector<bool>& same,
                                                              std::size_t folds) {
  const std::size_t n = dist.size();
  if (same.size() != n) throw EvalError("verification: distance and flag counts differ");
  if (folds < 2) throw EvalError("verification: folds must be >= 2");
  if (folds > n) {
    throw EvalError("verification: " + std::to_string(folds) + " folds for " + std::to_string(n) + " pairs");
  }
  VerificationResult res;
  double acc_sum = 0.0, thr_sum = 0.0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
    std::vector<double> td;
    std::vector<bool> ts;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= lo && i < hi) continue;
      td.push_back(dist[i]);
      ts.push_back(same[i]);
    }
    const double t = detail::best_threshold(td, ts);
    std::size_t correct = 0;
    for (std::size_t i = lo; i < hi; ++i) correct += ((dist[i] <= t) == same[i]) ? 1 : 0;
    const double acc = static_cast<double>(correct) / static_cast<double>(hi - lo);
    res.fold_accuracy.push_back(acc);
    res.fold_threshold.push_back(t);
    acc_sum += acc;
    thr_sum += t;
  }
  res.accuracy = acc_sum / static_cast<double>(folds);
  res.threshold = std::isfinite(thr_sum) ? thr_sum / static_cast<double>(folds)
                                         : std::numeric_limits<double>::quiet_NaN();
  return res;
}

inline VerificationResult verification_accuracy(const Matrix& features_a, const Matrix& features_b,
                                                const std::vector<bool>& same, std::size_t folds,
                                                Metric metric = Metric::euclidean) {
  return verification_accuracy_from_distances(pair_distances(features_a, features_b, metric), same, folds);
}

// Verification over a pair list whose indices address rows of `embeddings`.
inline VerificationResult verify_pairs(const Matrix& embeddings, const PairList& pairs, std::size_t folds,
                                       Metric metric = Metric::euclidean) {
  std::vector<double> d;
  std::vector<bool> same;
  for (const auto& p : pairs) {
    if (p.a >= embeddings.rows() || p.b >= embeddings.rows()) {
      throw EvalError("verify_pairs: no embedding for index " + std::to_string(std::max(p.a, p.b)));
    }
    d.push_back(pair_distance(embeddings.row(p.a), embeddings.row(p.b), metric));
    same.push_back(p.same);
  }
  return verification_accuracy_from_distances(d, same, folds);
}

// ---------------------------------------------------------------------------
// ROC over distance scores; a pair is accepted when its distance <= threshold.

struct RocPoint {
  double threshold;  // -inf for the accept-nothing point
  double far;
  double tar;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

inline RocCurve roc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw EvalError("roc: need non-empty positive and negative score sets");
  std::vector<double> p = pos, q = neg;
  std::sort(p.begin(), p.end());
  std::sort(q.begin(), q.end());
  std::vector<double> thresholds;
  std::merge(p.begin(), p.end(), q.begin(), q.end(), std::back_inserter(thresholds));
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  RocCurve c;
  c.num_pos = p.size();
  c.num_neg = q.size();
  c.points.push_back({-std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t ip = 0, iq = 0;
  for (double t : thresholds) {
    while (ip < p.size() && p[ip] <= t) ++ip;
    while (iq < q.size() && q[iq] <= t) ++iq;
    c.points.push_back({t, static_cast<double>(iq) / static_cast<double>(q.size()),
                        static_cast<double>(ip) / static_cast<double>(p.size())});
  }
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    const auto& a = c.points[i - 1];
    const auto& b = c.points[i];
    c.auc += (b.far - a.far) * (a.tar + b.tar) * 0.5;
  }
  return c;
}

struct VrAtFar {
  double tar = 0.0;
  bool achievable = true;  // false when far_level < 1 / num_neg
};

// TAR at the largest curve FAR not exceeding far_level (step rule).
inline VrAtFar vr_at_far(const RocCurve& curve, double far_level) {
  if (!(far_level > 0.0 && far_level <= 1.0)) throw EvalError("vr_at_far: far_level must lie in (0, 1]");
  if (curve.num_neg > 0 && far_level * static_cast<double>(curve.num_neg) < 1.0) return {0.0, false};
  double best = 0.0;
  for (const auto& pt : curve.points)
    if (pt.far <= far_level) best = std::max(best, pt.tar);
  return {best, true};
}

// ---------------------------------------------------------------------------
// Identification

struct CmcCurve {
  std::vector<double> rank_rates;  // index r-1 holds the rate at rank r
  std::vector<std::size_t> ranks;  // 1-based rank of each probe's mate
};

// Candidates are the gallery followed by the distractors; equal distances are
// ranked by candidate position.
inline CmcCurve cmc(const IdentProtocol& proto, const Matrix& embeddings, Metric metric = Metric::euclidean) {
  if (proto.probes.size() != proto.gallery.size()) throw EvalError("cmc: probe/gallery count mismatch");
  if (proto.probes.empty()) throw EvalError("cmc: no probes");
  auto check = [&](std::size_t idx) {
    if (idx >= embeddings.rows()) throw EvalError("cmc: missing embedding for index " + std::to_string(idx));
  };
  std::vector<std::size_t> cand = proto.gallery;
  cand.insert(cand.end(), proto.distractors.begin(), proto.distractors.end());
  for (auto i : cand) check(i);
  for (auto i : proto.probes) check(i);

  CmcCurve c;
  c.rank_rates.assign(cand.size(), 0.0);
  for (std::size_t p = 0; p < proto.probes.size(); ++p) {
    const auto probe = embeddings.row(proto.probes[p]);
    const double mate = pair_distance(probe, embeddings.row(cand[p]), metric);
    std::size_t rank = 1;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      if (j == p) continue;
      const double dj = pair_distance(probe, embeddings.row(cand[j]), metric);
      if (dj < mate || (dj == mate && j < p)) ++rank;
    }
    c.ranks.push_back(rank);
  }
  for (std::size_t r = 0; r < cand.size(); ++r) {
    std::size_t hits = 0;
    for (auto k : c.ranks) hits += k <= r + 1 ? 1 : 0;
    c.rank_rates[r] = static_cast<double>(hits) / static_cast<double>(c.ranks.size());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Nearest-centre histograms

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<std::size_t> counts;

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

// Fixed-width bins over [lo, hi]; values below lo land in the first bin,
// values at or above hi in the last.
inline Histogram make_histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw EvalError("histogram: bins must be >= 1");
  if (!(hi > lo)) throw EvalError("histogram: empty range");
  Histogram h;
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + width * static_cast<double>(b));
  h.edges.back() = hi;
  h.counts.assign(bins, 0);
  for (double v : values) {
    std::size_t b = 0;
    if (v >= hi) {
      b = bins - 1;
    } else if (v > lo) {
      b = std::min(bins - 1, static_cast<std::size_t>((v - lo) / width));
    }
    ++h.counts[b];
  }
  return h;
}

// Per-class feature means over the classes present, in ascending label order.
inline Matrix class_means(const Matrix& features, std::span<const int> labels, std::vector<int>* classes = nullptr) {
  if (labels.size() != features.rows()) throw EvalError("class_means: label count mismatch");
  std::map<int, std::size_t> count;
  for (int y : labels) ++count[y];
  std::map<int, std::size_t> row;
  std::size_t r = 0;
  for (const auto& [cls, n] : count) row[cls] = r++;
  Matrix means(count.size(), features.cols());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < features.cols(); ++c) means(row[labels[i]], c) += features(i, c);
  r = 0;
  for (const auto& [cls, n] : count) {
    for (double& v : means.row(r)) v /= static_cast<double>(n);
    if (classes) classes->push_back(cls);
    ++r;
  }
  return means;
}

inline Histogram nearest_centre_histogram(const Matrix& features, std::span<const int> labels, std::size_t bins,
                                          double lo, double hi) {
  const Matrix means = class_means(features, labels);
  if (means.rows() < 2) throw EvalError("nearest_centre_histogram: need >= 2 classes");
  return make_histogram(nearest_centre_distances(means), bins, lo, hi);
}

inline std::vector<long> compare_histograms(const Histogram& base, const Histogram& next) {
  if (base.edges != next.edges) throw EvalError("compare_histograms: bin edges differ");
  std::vector<long> out(base.counts.size());
  for (std::size_t b = 0; b < out.size(); ++b)
    out[b] = static_cast<long>(next.counts[b]) - static_cast<long>(base.counts[b]);
  return out;
}

// ---------------------------------------------------------------------------
// CSV and JSON surfaces

inline std::string roc_csv(const RocCurve& c) {
  std::string s = "far,tar\n";
  for (const auto& p : c.points) s += format_double(p.far) + ',' + format_double(p.tar) + '\n';
  return s;
}

inline std::string cmc_csv(const CmcCurve& c) {
  std::string s = "rank,rate\n";
  for (std::size_t r = 0; r < c.rank_rates.size(); ++r)
    s += std::to_string(r + 1) + ',' + format_double(c.rank_rates[r]) + '\n';
  return s;
}

// `delta` may be empty, in which case the column is written as 0.
inline std::string histogram_csv(const Histogram& h, const std::vector<long>& delta = {}) {
  std::string s = "bin_lo,bin_hi,count,delta\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    s += format_double(h.edges[b]) + ',' + format_double(h.edges[b + 1]) + ',' + std::to_string(h.counts[b]) +
         ',' + std::to_string(delta.empty() ? 0L : delta[b]) + '\n';
  }
  return s;
}

inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

struct EvalReport {
  std::optional<VerificationResult> verification;
  std::optional<RocCurve> roc;
  std::map<double, VrAtFar> vr_at_far;
  std::optional<CmcCurve> cmc;
  std::optional<Histogram> histogram;
  nlohmann::json config = nlohmann::json::object();
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["config"] = r.config;
  if (r.verification) {
    j["verification_accuracy"] = r.verification->accuracy;
    j["verification_threshold"] = json_number(r.verification->threshold);
    j["fold_accuracy"] = r.verification->fold_accuracy;
  }
  if (r.roc) {
    nlohmann::json far = nlohmann::json::array(), tar = nlohmann::json::array();
    for (const auto& p : r.roc->points) {
      far.push_back(p.far);
      tar.push_back(p.tar);
    }
    j["roc"] = {{"far", far}, {"tar", tar}, {"auc", r.roc->auc},
                {"num_pos", r.roc->num_pos}, {"num_neg", r.roc->num_neg}};
  }
  if (!r.vr_at_far.empty()) {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& [level, res] : r.vr_at_far)
      v.push_back({{"far", level}, {"tar", res.tar}, {"achievable", res.achievable}});
    j["vr_at_far"] = v;
  }
  if (r.cmc) j["cmc"] = {{"rank_rates", r.cmc->rank_rates}, {"ranks", r.cmc->ranks}};
  if (r.histogram) j["histogram"] = {{"bin_edges", r.histogram->edges}, {"counts", r.histogram->counts}};
  return j;
}

// ---------------------------------------------------------------------------
// Parameter sweeps

enum class SweepParameter { margin, beta };

inline std::string to_string(SweepParameter p) { return p == SweepParameter::margin ? "M" : "beta"; }

inline SweepParameter parse_sweep_parameter(const std::string& s) {
  if (s == "M" || s == "margin") return SweepParameter::margin;
  if (s == "beta") return SweepParameter::beta;
  throw ConfigError("unknown sweep parameter '" + s + "' (expected M or beta)");
}

struct SweepCell {
  double value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  double accuracy = 0.0;
  double threshold = 0.0;
  std::string error;
  std::optional<Checkpoint> checkpoint;
};

struct SweepTable {
  SweepParameter parameter = SweepParameter::margin;
  std::vector<SweepCell> cells;  // value-major, then seed
  std::vector<double> values;
  std::vector<double> seed_mean;  // per value over successful cells; NaN if none

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const SweepCell& c) { return !c.ok; }));
  }
};

inline TrainConfig with_parameter(TrainConfig cfg, SweepParameter p, double v, std::uint64_t seed) {
  if (p == SweepParameter::margin) {
    cfg.mml.margin = v;
  } else {
    cfg.beta = v;
  }
  cfg.seed = seed;
  return cfg;
}

inline Matrix embed_all(const EmbedderParams& em, const Dataset& ds) { return forward_embed(em, ds.inputs); }

// One train + heldout-verification cell.
inline SweepCell run_sweep_cell(const TrainConfig& cfg, const Dataset& ds, const Checkpoint* warm,
                                const PairList& pairs, std::size_t folds, Metric metric, double value,
                                bool keep_checkpoint = false) {
  SweepCell cell;
  cell.value = value;
  cell.seed = cfg.seed;
  try {
    auto res = train(cfg, ds, warm);
    const auto v = verify_pairs(embed_all(res.checkpoint.state.embedder, ds), pairs, folds, metric);
    cell.ok = true;
    cell.accuracy = v.accuracy;
    cell.threshold = v.threshold;
    if (keep_checkpoint) cell.checkpoint = std::move(res.checkpoint);
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  return cell;
}

inline SweepTable sweep(const TrainConfig& base, SweepParameter param, const std::vector<double>& values,
                        const std::vector<std::uint64_t>& seeds, const Dataset& ds, const Checkpoint* warm,
                        const PairList& pairs, std::size_t folds, Metric metric = Metric::euclidean,
                        bool keep_checkpoints = false) {
  if (values.empty()) throw ConfigError("sweep: no values");
  if (seeds.empty()) throw ConfigError("sweep: no seeds");
  SweepTable t;
  t.parameter = param;
  t.values = values;
  for (double v : values) {
    double sum = 0.0;
    std::size_t ok = 0;
    for (auto s : seeds) {
      t.cells.push_back(run_sweep_cell(with_parameter(base, param, v, s), ds, warm, pairs, folds, metric, v,
                                       keep_checkpoints));
      if (t.cells.back().ok) {
        sum += t.cells.back().accuracy;
        ++ok;
      }
    }
    t.seed_mean.push_back(ok ? sum / static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN());
  }
  return t;
}

inline std::string sweep_csv(const SweepTable& t) {
  std::string s = "parameter,value,seed,status,accuracy,threshold,seed_mean\n";
  const std::size_t per_value = t.cells.size() / t.values.size();
  for (std::size_t i = 0; i < t.cells.size(); ++i) {
    const auto& c = t.cells[i];
    const std::size_t vi = i / per_value;
    s += to_string(t.parameter) + ',' + format_double(c.value) + ',' + std::to_string(c.seed) + ',' +
         (c.ok ? "ok" : "failed") + ',' + (c.ok ? format_double(c.accuracy) : "") + ',' +
         (c.ok && std::isfinite(c.threshold) ? format_double(c.threshold) : "") + ',' +
         (std::isfinite(t.seed_mean[vi]) ? format_double(t.seed_mean[vi]) : "") + '\n';
  }
  return s;
}

}  // namespace mml
