// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mml/numeric.hpp"

namespace mml {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Final fully connected layer: logits_j = W_j . f + b_j, W stored d x K.
struct ClassifierHead {
  Matrix weights;
  std::vector<double> biases;

  std::size_t dim() const { return weights.rows(); }
  std::size_t num_classes() const { return weights.cols(); }

  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;
};

struct LossBundle {
  double value = 0.0;
  Matrix grad_features;
  std::optional<Matrix> grad_weights;
  std::optional<std::vector<double>> grad_biases;
  std::optional<Matrix> grad_centres;

  // mml: number of hinge terms that contributed.
  std::size_t active_terms = 0;
  // range_loss: classes excluded from the intra term for having < 2 samples.
  std::vector<int> skipped_classes;

  // total_loss: unweighted constituent values (0 for skipped terms).
  struct Parts {
    double softmax = 0.0;
    double centre = 0.0;
    double mml = 0.0;
  } parts;
};

enum class Coupling { detached, coupled };
enum class PairScope { batch_classes, all_classes };

// margin is in squared embedding distance units.
struct MmlConfig {
  double margin = 0.0;
  Coupling coupling = Coupling::coupled;
  PairScope pair_scope = PairScope::batch_classes;
};

inline std::string to_string(Coupling c) { return c == Coupling::coupled ? "coupled" : "detached"; }
inline std::string to_string(PairScope s) {
  return s == PairScope::all_classes ? "all_classes" : "batch_classes";
}

namespace detail {

inline void check_labels(const Matrix& features, std::span<const int> labels,
                         std::size_t num_classes, const char* who) {
  if (labels.size() != features.rows()) {
    throw LossError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(features.rows()) + " features");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw LossError(std::string(who) + ": label " + std::to_string(labels[i]) + " at row " +
                      std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

// Sorted distinct labels.
inline std::vector<int> present_classes(std::span<const int> labels) {
  std::vector<int> out(labels.begin(), labels.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

inline LossBundle softmax_ce(const Matrix& features, std::span<const int> labels,
                             const ClassifierHead& head) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  const std::size_t k = head.num_classes();
  if (n == 0) throw LossError("softmax_ce: empty batch");
  if (head.dim() != d || head.biases.size() != k) {
    throw LossError("softmax_ce: head " + head.weights.shape_string() + " incompatible with " +
                    features.shape_string() + " features");
  }
  if (k < 2) throw LossError("softmax_ce: need at least 2 classes");
  detail::check_labels(features, labels, k, "softmax_ce");

  const double inv_n = 1.0 / static_cast<double>(n);
  LossBundle out;
  out.grad_features = Matrix(n, d);
  Matrix gw(d, k);
  std::vector<double> gb(k, 0.0);
  std::vector<double> logits(k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = features.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      double z = head.biases[j];
      for (std::size_t c = 0; c < d; ++c) z += head.weights(c, j) * f[c];
      logits[j] = z;
    }
    const auto p = stable_softmax(logits);
    const auto y = static_cast<std::size_t>(labels[i]);
    // log p_y via log-sum-exp to stay finite when p_y underflows
    double mx = logits[0];
    for (double z : logits) mx = std::max(mx, z);
    double s = 0.0;
    for (double z : logits) s += std::exp(z - mx);
    total += (mx + std::log(s)) - logits[y];

    auto gf = out.grad_features.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      const double r = (p[j] - (j == y ? 1.0 : 0.0)) * inv_n;
      for (std::size_t c = 0; c < d; ++c) {
        gf[c] += r * head.weights(c, j);
        gw(c, j) += r * f[c];
      }
      gb[j] += r;
    }
  }
  out.value = total * inv_n;
  out.grad_weights = std::move(gw);
  out.grad_biases = std::move(gb);
  return out;
}

// Half the summed squared distance to the class centre; no batch normalisation.
inline LossBundle centre_loss(const Matrix& features, std::span<const int> labels,
                              const Matrix& centres) {
  if (centres.cols() != features.cols()) {
    throw LossError("centre_loss: centres " + centres.shape_string() + " vs features " +
                    features.shape_string());
  }
  if (!centres.all_finite()) throw LossError("centre_loss: non-finite centres");
  detail::check_labels(features, labels, centres.rows(), "centre_loss");

  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  LossBundle out;
  out.grad_features = Matrix(n, d);
  Matrix gc(centres.rows(), d);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = features(i, c) - centres(y, c);
      total += diff * diff;
      out.grad_features(i, c) = diff;
      gc(y, c) -= diff;
    }
  }
  out.value = 0.5 * total;
  out.grad_centres = std::move(gc);
  return out;
}

// Minimum margin loss: sum over unordered in-scope centre pairs of
// max(M - ||c_a - c_b||^2, 0). In coupled mode each sample of class a receives
// grad_centres[a] / n_a, the Jacobian of a batch-mean centre estimate.
inline LossBundle mml(const Matrix& features, std::span<const int> labels, const Matrix& centres,
                      const MmlConfig& cfg) {
  if (cfg.margin < 0.0 || std::isnan(cfg.margin)) {
    throw LossError("mml: margin must be >= 0");
  }
  if (centres.cols() != features.cols()) {
    throw LossError("mml: centres " + centres.shape_string() + " vs features " +
                    features.shape_string());
  }
  detail::check_labels(features, labels, centres.rows(), "mml");

  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  LossBundle out;
  out.grad_features = Matrix(n, d);
  Matrix gc(centres.rows(), d);

  std::vector<int> scope;
  if (cfg.pair_scope == PairScope::batch_classes) {
    scope = detail::present_classes(labels);
  } else {
    scope.resize(centres.rows());
    for (std::size_t j = 0; j < scope.size(); ++j) scope[j] = static_cast<int>(j);
  }

  double total = 0.0;
  for (std::size_t ia = 0; ia < scope.size(); ++ia) {
    const auto a = static_cast<std::size_t>(scope[ia]);
    for (std::size_t ib = ia + 1; ib < scope.size(); ++ib) {
      const auto b = static_cast<std::size_t>(scope[ib]);
      const double dist = sq_dist(centres.row(a), centres.row(b));
      const double h = cfg.margin - dist;
      if (!(h > 0.0)) continue;
      total += h;
      ++out.active_terms;
      for (std::size_t c = 0; c < d; ++c) {
        const double g = -2.0 * (centres(a, c) - centres(b, c));
        gc(a, c) += g;
        gc(b, c) -= g;
      }
    }
  }
  out.value = total;

  if (cfg.coupling == Coupling::coupled && out.active_terms > 0) {
    std::vector<std::size_t> counts(centres.rows(), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      const double inv = 1.0 / static_cast<double>(counts[y]);
      for (std::size_t c = 0; c < d; ++c) out.grad_features(i, c) = inv * gc(y, c);
    }
  }
  out.grad_centres = std::move(gc);
  return out;
}

// Pairwise hinge over L2-normalised features; y_ij = +1 same class, -1 otherwise.
inline LossBundle marginal_loss(const Matrix& features, std::span<const int> labels, double theta,
                                double xi) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (n < 2) throw LossError("marginal_loss: need at least 2 samples");
  if (labels.size() != n) throw LossError("marginal_loss: label count mismatch");

  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = std::sqrt(sq_norm(features.row(i)));
    if (norms[i] == 0.0) throw LossError("marginal_loss: zero-norm feature at row " + std::to_string(i));
  }
  const Matrix unit = l2_normalize_rows(features);

  const double scale = 1.0 / static_cast<double>(n * n - n);
  Matrix g_unit(n, d);
  double total = 0.0;
  // Ordered pairs (i,j) and (j,i) contribute identical terms; evaluate once and double.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double y = labels[i] == labels[j] ? 1.0 : -1.0;
      const double dist = sq_dist(unit.row(i), unit.row(j));
      const double h = xi - y * (theta - dist);
      if (!(h > 0.0)) continue;
      total += 2.0 * h;
      // d h / d dist = y; d dist / d u_i = 2 (u_i - u_j)
      const double coef = 2.0 * scale * y * 2.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = unit(i, c) - unit(j, c);
        g_unit(i, c) += coef * diff;
        g_unit(j, c) -= coef * diff;
      }
    }
  }

  LossBundle out;
  out.value = total * scale;
  out.grad_features = Matrix(n, d);
  // d u / d f = (I - u u^T) / ||f||
  for (std::size_t i = 0; i < n; ++i) {
    double proj = 0.0;
    for (std::size_t c = 0; c < d; ++c) proj += g_unit(i, c) * unit(i, c);
    for (std::size_t c = 0; c < d; ++c) {
      out.grad_features(i, c) = (g_unit(i, c) - proj * unit(i, c)) / norms[i];
    }
  }
  return out;
}

struct RangeLossParams {
  double margin = 0.0;
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t top_n = 2;
};

// Range loss: harmonic mean of the top_n largest within-class pair distances
// per class, plus a hinge on the nearest pair of batch-mean class centres.
inline LossBundle range_loss(const Matrix& features, std::span<const int> labels,
                             const RangeLossParams& p) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (labels.size() != n) throw LossError("range_loss: label count mismatch");
  if (p.top_n == 0) throw LossError("range_loss: top_n must be >= 1");

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[labels[i]].push_back(i);

  LossBundle out;
  out.grad_features = Matrix(n, d);
  double intra_total = 0.0;

  struct Pair {
    double dist;
    std::size_t a, b;
  };
  for (const auto& [cls, idx] : members) {
    if (idx.size() < 2) {
      out.skipped_classes.push_back(cls);
      continue;
    }
    std::vector<Pair> pairs;
    for (std::size_t u = 0; u < idx.size(); ++u)
      for (std::size_t v = u + 1; v < idx.size(); ++v)
        pairs.push_back({sq_dist(features.row(idx[u]), features.row(idx[v])), idx[u], idx[v]});
    // Largest first; stable sort keeps enumeration order on ties.
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const Pair& x, const Pair& y) { return x.dist > y.dist; });
    const std::size_t take = std::min(p.top_n, pairs.size());
    bool degenerate = false;
    double inv_sum = 0.0;
    for (std::size_t t = 0; t < take; ++t) {
      if (pairs[t].dist == 0.0) degenerate = true;
      inv_sum += 1.0 / pairs[t].dist;
    }
    // A zero distance among the selected pairs drives the harmonic mean to 0.
    if (degenerate) continue;
    const double m = static_cast<double>(take);
    intra_total += m / inv_sum;
    for (std::size_t t = 0; t < take; ++t) {
      const double dd = pairs[t].dist;
      const double coef = p.alpha * m / (inv_sum * inv_sum) / (dd * dd);
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = features(pairs[t].a, c) - features(pairs[t].b, c);
        out.grad_features(pairs[t].a, c) += coef * 2.0 * diff;
        out.grad_features(pairs[t].b, c) -= coef * 2.0 * diff;
      }
    }
  }

  double inter = 0.0;
  if (members.size() >= 2) {
    std::vector<int> classes;
    Matrix means(members.size(), d);
    std::size_t r = 0;
    for (const auto& [cls, idx] : members) {
      classes.push_back(cls);
      for (std::size_t i : idx)
        for (std::size_t c = 0; c < d; ++c) means(r, c) += features(i, c);
      for (std::size_t c = 0; c < d; ++c) means(r, c) /= static_cast<double>(idx.size());
      ++r;
    }
    double best = std::numeric_limits<double>::infinity();
    std::size_t qa = 0, qb = 1;
    for (std::size_t a = 0; a < classes.size(); ++a) {
      for (std::size_t b = a + 1; b < classes.size(); ++b) {
        const double dist = sq_dist(means.row(a), means.row(b));
        if (dist < best) {
          best = dist;
          qa = a;
          qb = b;
        }
      }
    }
    const double h = p.margin - best;
    if (h > 0.0) {
      inter = h;
      const auto& ia = members.at(classes[qa]);
      const auto& ib = members.at(classes[qb]);
      for (std::size_t c = 0; c < d; ++c) {
        const double g = -p.beta * 2.0 * (means(qa, c) - means(qb, c));
        for (std::size_t i : ia) out.grad_features(i, c) += g / static_cast<double>(ia.size());
        for (std::size_t i : ib) out.grad_features(i, c) -= g / static_cast<double>(ib.size());
      }
    }
  }
  out.value = p.alpha * intra_total + p.beta * inter;
  return out;
}

// L = L_S + alpha L_C + beta L_M. Weight and bias gradients come from L_S alone;
// zero-weighted or inactive terms are skipped so reductions are bit-exact.
inline LossBundle total_loss(const Matrix& features, std::span<const int> labels,
                             const ClassifierHead& head, const Matrix& centres, double alpha,
                             double beta, const MmlConfig& cfg) {
  LossBundle out = softmax_ce(features, labels, head);
  out.parts.softmax = out.value;
  const std::size_t d = features.cols();
  if (alpha != 0.0) {
    const LossBundle c = centre_loss(features, labels, centres);
    out.parts.centre = c.value;
    out.value += alpha * c.value;
    for (std::size_t i = 0; i < features.rows(); ++i)
      for (std::size_t k = 0; k < d; ++k) out.grad_features(i, k) += alpha * c.grad_features(i, k);
  }
  if (beta != 0.0) {
    const LossBundle m = mml(features, labels, centres, cfg);
    out.active_terms = m.active_terms;
    if (m.active_terms > 0) {
      out.parts.mml = m.value;
      out.value += beta * m.value;
      if (cfg.coupling == Coupling::coupled) {
        for (std::size_t i = 0; i < features.rows(); ++i)
          for (std::size_t k = 0; k < d; ++k)
            out.grad_features(i, k) += beta * m.grad_features(i, k);
      }
    }
  }
  if (!std::isfinite(out.value)) throw LossError("total_loss: non-finite value");
  return out;
}

}  // namespace mml
