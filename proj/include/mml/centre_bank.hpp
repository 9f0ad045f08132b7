// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <tuple>
#include <vector>

#include "mml/numeric.hpp"

namespace mml {

class CentreBankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class centres maintained by the batch update rule
//   c_j <- c_j - gamma * delta_j,
//   delta_j = sum_{i: y_i = j} (c_j - f_i) / (1 + n_j).
struct CentreBank {
  Matrix centres;
  double gamma = 0.5;
  std::uint64_t update_count = 0;

  std::size_t num_classes() const { return centres.rows(); }
  std::size_t dim() const { return centres.cols(); }

  friend bool operator==(const CentreBank&, const CentreBank&) = default;
};

enum class CentreInit { zeros, seeded_gaussian };

struct CentreInitSpec {
  CentreInit mode = CentreInit::zeros;
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

inline void validate_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw CentreBankError("centre learning rate gamma must lie in (0, 1], got " +
                          format_double(gamma));
  }
}

inline CentreBank init_centres(std::size_t num_classes, std::size_t dim, const CentreInitSpec& spec,
                               double gamma = 0.5) {
  if (num_classes < 2) throw CentreBankError("init_centres: need K >= 2");
  if (dim < 1) throw CentreBankError("init_centres: need d >= 1");
  validate_gamma(gamma);
  CentreBank bank{Matrix(num_classes, dim), gamma, 0};
  if (spec.mode == CentreInit::seeded_gaussian) {
    Rng rng(spec.seed);
    for (double& v : bank.centres.data()) v = spec.sigma * rng.normal();
  }
  return bank;
}

inline Matrix centre_delta(const CentreBank& bank, const Matrix& features,
                           std::span<const int> labels) {
  if (features.cols() != bank.dim()) {
    throw CentreBankError("centre_delta: features " + features.shape_string() +
                          " vs centres " + bank.centres.shape_string());
  }
  if (labels.size() != features.rows()) throw CentreBankError("centre_delta: label count mismatch");
  const std::size_t k = bank.num_classes();
  const std::size_t d = bank.dim();
  Matrix sums(k, d);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw CentreBankError("centre_delta: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " out of range");
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    ++counts[y];
    for (std::size_t c = 0; c < d; ++c) sums(y, c) += bank.centres(y, c) - features(i, c);
  }
  for (std::size_t j = 0; j < k; ++j) {
    const double denom = 1.0 + static_cast<double>(counts[j]);
    for (std::size_t c = 0; c < d; ++c) sums(j, c) /= denom;
  }
  return sums;
}

inline CentreBank apply_update(CentreBank bank, const Matrix& delta) {
  if (!delta.same_shape(bank.centres)) {
    throw CentreBankError("apply_update: delta " + delta.shape_string() + " vs centres " +
                          bank.centres.shape_string());
  }
  auto& c = bank.centres.data();
  const auto& dl = delta.data();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= bank.gamma * dl[i];
  ++bank.update_count;
  return bank;
}

// out[j] = min_{k != j} ||c_j - c_k||^2, first index on ties.
inline std::vector<double> nearest_centre_distances(const Matrix& centres) {
  const std::size_t k = centres.rows();
  if (k < 2) throw CentreBankError("nearest_centre_distances: need K >= 2");
  std::vector<double> out(k, std::numeric_limits<double>::infinity());
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      out[a] = std::min(out[a], sq_dist(centres.row(a), centres.row(b)));
    }
  }
  return out;
}

inline std::vector<double> nearest_centre_distances(const CentreBank& bank) {
  return nearest_centre_distances(bank.centres);
}

struct CentrePair {
  std::size_t a;
  std::size_t b;
  double sq_dist;

  friend bool operator==(const CentrePair&, const CentrePair&) = default;
};

// Unordered pairs with squared distance strictly below the margin,
// ascending by distance then (a, b).
inline std::vector<CentrePair> violating_pairs(const Matrix& centres, double margin) {
  if (margin < 0.0) throw CentreBankError("violating_pairs: margin must be >= 0");
  std::vector<CentrePair> out;
  for (std::size_t a = 0; a < centres.rows(); ++a) {
    for (std::size_t b = a + 1; b < centres.rows(); ++b) {
      const double dd = sq_dist(centres.row(a), centres.row(b));
      if (dd < margin) out.push_back({a, b, dd});
    }
  }
  std::sort(out.begin(), out.end(), [](const CentrePair& x, const CentrePair& y) {
    return std::tie(x.sq_dist, x.a, x.b) < std::tie(y.sq_dist, y.a, y.b);
  });
  return out;
}

inline std::vector<CentrePair> violating_pairs(const CentreBank& bank, double margin) {
  return violating_pairs(bank.centres, margin);
}

// All K(K-1)/2 unordered inter-centre squared distances, row-major pair order.
inline std::vector<double> inter_centre_sq_dists(const Matrix& centres) {
  std::vector<double> out;
  for (std::size_t a = 0; a < centres.rows(); ++a)
    for (std::size_t b = a + 1; b < centres.rows(); ++b)
      out.push_back(sq_dist(centres.row(a), centres.row(b)));
  return out;
}

}  // namespace mml
