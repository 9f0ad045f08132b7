// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#include <gtest/gtest.h>

#include <cmath>

#include "mml/evalkit.hpp"
#include "oracles.hpp"

using namespace mml;

namespace {

// Direct O(n^2) threshold search: candidates {-inf} U training distances,
// rule "same iff d <= t", smallest threshold among the best.
double brute_threshold(const std::vector<double>& d, const std::vector<bool>& s) {
  std::vector<double> cand{-INFINITY};
  cand.insert(cand.end(), d.begin(), d.end());
  std::sort(cand.begin(), cand.end());
  double best_t = -INFINITY;
  long best = -1;
  for (double t : cand) {
    long correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) correct += (d[i] <= t) == s[i];
    if (correct > best) {
      best = correct;
      best_t = t;
    }
  }
  return best_t;
}

double brute_kfold(const std::vector<double>& d, const std::vector<bool>& s, std::size_t folds) {
  const std::size_t n = d.size();
  double acc = 0.0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
    std::vector<double> td;
    std::vector<bool> ts;
    for (std::size_t i = 0; i < n; ++i)
      if (i < lo || i >= hi) {
        td.push_back(d[i]);
        ts.push_back(s[i]);
      }
    const double t = brute_threshold(td, ts);
    std::size_t ok = 0;
    for (std::size_t i = lo; i < hi; ++i) ok += (d[i] <= t) == s[i];
    acc += static_cast<double>(ok) / static_cast<double>(hi - lo);
  }
  return acc / static_cast<double>(folds);
}

// Probability a positive scores strictly lower than a negative, ties half.
double mann_whitney(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0.0;
  for (double p : pos)
    for (double q : neg) s += p < q ? 1.0 : (p == q ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

Dataset sweep_data() {
  SyntheticSpec sp;
  sp.num_classes = 5;
  sp.input_dim = 4;
  sp.total_samples = 150;
  sp.min_per_class = 15;
  sp.seed = 21;
  return gen_longtail(sp);
}

TrainConfig sweep_config() {
  TrainConfig c;
  c.scheme = Scheme::softmax_centre_mml;
  c.batch_size = 16;
  c.iterations = 60;
  c.hidden = {6};
  c.embedding_dim = 3;
  c.alpha = 0.01;
  c.beta = 0.05;
  c.mml.margin = 1.0;
  return c;
}

}  // namespace

// ---- verification

TEST(Verification, SeparableIsPerfect) {
  // every distance value occurs in two folds, so held-out values are never
  // strictly inside the training gap
  std::vector<double> d;
  std::vector<bool> s;
  for (int rep = 0; rep < 2; ++rep)
    for (int i = 0; i < 5; ++i) {
      d.push_back(0.1 * i);
      s.push_back(true);
      d.push_back(5.0 + i);
      s.push_back(false);
    }
  EXPECT_EQ(verification_accuracy_from_distances(d, s, 10).accuracy, 1.0);
  EXPECT_EQ(verification_accuracy_from_distances(d, s, 2).accuracy, 1.0);
}

// An order-only rule cannot place a held-out distance that falls strictly
// between the largest training positive and the smallest training negative.
TEST(Verification, HeldOutGapPointsFollowTheLowerEdge) {
  const std::vector<double> d{0.0, 1.0, 2.0, 10.0, 11.0, 12.0};
  const std::vector<bool> s{true, true, true, false, false, false};
  const auto r = verification_accuracy_from_distances(d, s, 6);
  // folds holding 2.0 (positive) miss; the one holding 10.0 (negative) is rejected correctly
  EXPECT_EQ(r.fold_accuracy, (std::vector<double>{1, 1, 0, 1, 1, 1}));
}

TEST(Verification, LeaveOneOutHandOracle) {
  const std::vector<double> d{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const std::vector<bool> s{true, true, true, false, true, false, false, false, false, false};
  const auto r = verification_accuracy_from_distances(d, s, 10);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.7);
  EXPECT_DOUBLE_EQ(r.threshold, 3.1);
  EXPECT_EQ(r.fold_threshold, (std::vector<double>{3, 3, 2, 5, 3, 3, 3, 3, 3, 3}));
}

TEST(Verification, MatchesBruteForceSearch) {
  Rng rng(61);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 10 + rng.below(40);
    std::vector<double> d(n);
    std::vector<bool> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform() < 0.5;
      d[i] = static_cast<double>(rng.below(12)) + (s[i] ? 0.0 : 3.0);
    }
    const std::size_t folds = 2 + rng.below(9);
    EXPECT_DOUBLE_EQ(verification_accuracy_from_distances(d, s, folds).accuracy, brute_kfold(d, s, folds));
  }
}

TEST(Verification, RandomFlagsOnIdenticalFeaturesGivePrior) {
  Rng rng(62);
  const std::size_t n = 2000;
  Matrix a(n, 3, 1.0), b(n, 3, 1.0);
  std::vector<bool> s(n);
  std::size_t neg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = rng.uniform() < 0.3;
    neg += !s[i];
  }
  const double prior = static_cast<double>(neg) / static_cast<double>(n);
  EXPECT_NEAR(verification_accuracy(a, b, s, 10).accuracy, prior, 0.03);
}

TEST(Verification, InvariantUnderMonotoneTransforms) {
  Rng rng(63);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 10 + rng.below(30);
    std::vector<double> d(n), e(n), g(n);
    std::vector<bool> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform() < 0.5;
      d[i] = static_cast<double>(rng.below(50));
      e[i] = std::exp(d[i] / 10.0);
      g[i] = 5.0 * d[i] + 2.0;
    }
    const std::size_t folds = 2 + rng.below(std::min<std::size_t>(n - 1, 9));
    const double base = verification_accuracy_from_distances(d, s, folds).accuracy;
    EXPECT_EQ(verification_accuracy_from_distances(e, s, folds).accuracy, base);
    EXPECT_EQ(verification_accuracy_from_distances(g, s, folds).accuracy, base);
  }
}

TEST(Verification, RejectsDegenerateFolds) {
  const std::vector<double> d{1, 2, 3};
  const std::vector<bool> s{true, false, true};
  EXPECT_THROW(verification_accuracy_from_distances(d, s, 1), EvalError);
  EXPECT_THROW(verification_accuracy_from_distances(d, s, 4), EvalError);
  EXPECT_THROW(verification_accuracy_from_distances(d, {true}, 2), EvalError);
}

// ---- ROC and VR@FAR

TEST(Roc, DisjointSupportsArePerfect) {
  const auto c = roc({0.1, 0.2, 0.3}, {1.0, 2.0});
  EXPECT_EQ(c.auc, 1.0);
}

TEST(Roc, HandSweep) {
  const auto c = roc({1, 3, 5}, {2, 4, 6});
  const std::vector<std::pair<double, double>> expect{
      {0, 0}, {0, 1.0 / 3}, {1.0 / 3, 1.0 / 3}, {1.0 / 3, 2.0 / 3}, {2.0 / 3, 2.0 / 3}, {2.0 / 3, 1}, {1, 1}};
  ASSERT_EQ(c.points.size(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_DOUBLE_EQ(c.points[i].far, expect[i].first) << i;
    EXPECT_DOUBLE_EQ(c.points[i].tar, expect[i].second) << i;
  }
  EXPECT_DOUBLE_EQ(c.auc, 2.0 / 3.0);
  EXPECT_EQ(roc_csv(c).substr(0, 8), "far,tar\n");
}

TEST(Roc, IdenticalDistributionsNearHalf) {
  Rng rng(64);
  std::vector<double> p(10000), q(10000);
  for (auto& v : p) v = rng.normal();
  for (auto& v : q) v = rng.normal();
  EXPECT_NEAR(roc(p, q).auc, 0.5, 0.05);
}

TEST(Roc, PropertiesOnRandomInstances) {
  Rng rng(65);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> p(1 + rng.below(30)), q(1 + rng.below(30));
    for (auto& v : p) v = static_cast<double>(rng.below(20));
    for (auto& v : q) v = static_cast<double>(rng.below(20)) + 2.0;
    const auto c = roc(p, q);
    for (std::size_t i = 1; i < c.points.size(); ++i) {
      EXPECT_GE(c.points[i].far, c.points[i - 1].far);
      EXPECT_GE(c.points[i].tar, c.points[i - 1].tar);
    }
    EXPECT_EQ(c.points.back().far, 1.0);
    EXPECT_EQ(c.points.back().tar, 1.0);
    EXPECT_GE(c.auc, 0.0);
    EXPECT_LE(c.auc, 1.0);
    EXPECT_NEAR(c.auc, mann_whitney(p, q), 1e-12);
  }
}

TEST(Roc, RejectsEmpty) {
  EXPECT_THROW(roc({}, {1.0}), EvalError);
  EXPECT_THROW(roc({1.0}, {}), EvalError);
}

TEST(VrAtFar, StepRule) {
  RocCurve c;
  c.num_pos = 10;
  c.num_neg = 10;
  const double far[] = {0, 0.1, 0.3, 0.6, 1}, tar[] = {0, 0.5, 0.7, 0.9, 1};
  for (int i = 0; i < 5; ++i) c.points.push_back({static_cast<double>(i), far[i], tar[i]});
  EXPECT_EQ(vr_at_far(c, 1.0).tar, 1.0);
  EXPECT_EQ(vr_at_far(c, 0.4).tar, 0.7);
  EXPECT_EQ(vr_at_far(c, 0.1).tar, 0.5);
  const auto low = vr_at_far(c, 0.05);
  EXPECT_FALSE(low.achievable);
  EXPECT_EQ(low.tar, 0.0);
  EXPECT_THROW(vr_at_far(c, 0.0), EvalError);
  EXPECT_THROW(vr_at_far(c, 1.5), EvalError);
}

TEST(VrAtFar, PerfectCurve) {
  const auto c = roc({0.1, 0.2}, {1, 2, 3, 4});
  for (double level : {0.25, 0.5, 1.0}) EXPECT_EQ(vr_at_far(c, level).tar, 1.0);
}

// ---- CMC

TEST(Cmc, TrivialCases) {
  const Matrix e{{0, 0}, {0, 0}, {10, 10}, {20, 20}};
  const auto c = cmc({{0}, {1}, {2, 3}}, e);
  EXPECT_EQ(c.ranks, (std::vector<std::size_t>{1}));
  EXPECT_EQ(c.rank_rates, (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(cmc({{0}, {2}, {}}, e).rank_rates, (std::vector<double>{1.0}));
  EXPECT_THROW(cmc({{0}, {7}, {}}, e), EvalError);
  try {
    cmc({{0}, {1}, {9}}, e);
  } catch (const EvalError& err) {
    EXPECT_NE(std::string(err.what()).find("9"), std::string::npos);
  }
}

TEST(Cmc, MatchesBruteForceRanking) {
  Rng rng(66);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t probes = 1 + rng.below(25), dis = rng.below(101);
    const std::size_t n = 2 * probes + dis;
    Matrix e(n, 2);
    // small integer grid so ties occur
    for (double& v : e.data()) v = static_cast<double>(rng.below(4));
    IdentProtocol p;
    for (std::size_t i = 0; i < probes; ++i) {
      p.probes.push_back(i);
      p.gallery.push_back(probes + i);
    }
    for (std::size_t i = 0; i < dis; ++i) p.distractors.push_back(2 * probes + i);
    const auto c = cmc(p, e);
    EXPECT_EQ(c.ranks, oracle::cmc_ranks_by_sort(e, p.probes, p.gallery, p.distractors));
    for (std::size_t r = 1; r < c.rank_rates.size(); ++r) EXPECT_GE(c.rank_rates[r], c.rank_rates[r - 1]);
    EXPECT_EQ(c.rank_rates.back(), 1.0);
    EXPECT_EQ(c.rank_rates.size(), probes + dis);
  }
}

// ---- histograms

TEST(Histogram, BinningAndOverflow) {
  const auto h = make_histogram({-1.0, 0.0, 0.5, 1.0, 3.99, 4.0, 100.0}, 4, 0.0, 4.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{3, 1, 0, 3}));
  EXPECT_EQ(h.edges, (std::vector<double>{0, 1, 2, 3, 4}));
  EXPECT_THROW(make_histogram({}, 0, 0, 1), EvalError);
  EXPECT_THROW(make_histogram({}, 2, 1, 1), EvalError);
}

TEST(NearestCentreHistogram, TwoClassesShareABin) {
  const Matrix f{{0, 0}, {0, 2}, {3, 1}, {3, 1}};
  const std::vector<int> y{0, 0, 1, 1};
  // means (0,1) and (3,1): squared distance 9
  const auto h = nearest_centre_histogram(f, y, 5, 0.0, 10.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{0, 0, 0, 0, 2}));
}

TEST(NearestCentreHistogram, CoincidentClassesFillFirstBin) {
  const Matrix f(6, 3, 1.5);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  EXPECT_EQ(nearest_centre_histogram(f, y, 4, 0.0, 1.0).counts, (std::vector<std::size_t>{3, 0, 0, 0}));
  const std::vector<int> one{0, 0, 0, 0, 0, 0};
  EXPECT_THROW(nearest_centre_histogram(f, one, 4, 0.0, 1.0), EvalError);
}

TEST(NearestCentreHistogram, MatchesBruteForce) {
  Rng rng(67);
  const Matrix f = oracle::random_matrix(rng, 200, 3);
  const auto y = oracle::random_labels(rng, 200, 20);
  Matrix means(20, 3);
  std::vector<double> n(20, 0.0);
  for (std::size_t i = 0; i < 200; ++i) {
    n[y[i]] += 1.0;
    for (std::size_t k = 0; k < 3; ++k) means(y[i], k) += f(i, k);
  }
  std::vector<std::size_t> counts(8, 0);
  for (std::size_t j = 0; j < 20; ++j)
    for (std::size_t k = 0; k < 3; ++k) means(j, k) /= n[j];
  for (std::size_t j = 0; j < 20; ++j) {
    double best = INFINITY;
    for (std::size_t q = 0; q < 20; ++q)
      if (q != j) best = std::min(best, oracle::sqd(means, j, means, q));
    std::size_t b = 0;
    while (b + 1 < 8 && best >= 0.05 * static_cast<double>(b + 1)) ++b;
    ++counts[b];
  }
  const auto h = nearest_centre_histogram(f, y, 8, 0.0, 0.4);
  EXPECT_EQ(h.counts, counts);
  EXPECT_EQ(h.total(), 20u);
}

TEST(CompareHistograms, Deltas) {
  Histogram a{{0, 1, 2, 3, 4}, {3, 1, 0, 2}}, b{{0, 1, 2, 3, 4}, {1, 2, 2, 1}};
  EXPECT_EQ(compare_histograms(a, a), (std::vector<long>{0, 0, 0, 0}));
  const auto d = compare_histograms(a, b);
  EXPECT_EQ(d, (std::vector<long>{-2, 1, 2, -1}));
  EXPECT_EQ(std::accumulate(d.begin(), d.end(), 0L), 0L);
  Histogram c{{0, 1, 2, 3, 5}, {0, 0, 0, 6}};
  EXPECT_THROW(compare_histograms(a, c), EvalError);
  EXPECT_EQ(histogram_csv(b, d).substr(0, 26), "bin_lo,bin_hi,count,delta\n");
}

// ---- sweep

TEST(Sweep, SingleCellEqualsDirectTrainAndEval) {
  const Dataset ds = sweep_data();
  const auto pairs = make_pairs(ds, Split::heldout, 30, 30, 1);
  const TrainConfig base = sweep_config();
  const auto t = sweep(base, SweepParameter::margin, {2.5}, {4}, ds, nullptr, pairs, 5);
  ASSERT_EQ(t.cells.size(), 1u);
  TrainConfig direct = base;
  direct.mml.margin = 2.5;
  direct.seed = 4;
  const auto res = train(direct, ds, nullptr);
  const auto v = verify_pairs(forward_embed(res.checkpoint.state.embedder, ds.inputs), pairs, 5);
  EXPECT_TRUE(t.cells[0].ok);
  EXPECT_EQ(t.cells[0].accuracy, v.accuracy);
  EXPECT_EQ(t.seed_mean[0], v.accuracy);
}

TEST(Sweep, ZeroMarginMatchesZeroBeta) {
  const Dataset ds = sweep_data();
  const auto pairs = make_pairs(ds, Split::heldout, 30, 30, 1);
  TrainConfig base = sweep_config();
  base.mml.margin = 0.0;
  const auto m0 = sweep(base, SweepParameter::margin, {0.0}, {1, 2}, ds, nullptr, pairs, 5, Metric::euclidean, true);
  base.mml.margin = 3.0;
  const auto b0 = sweep(base, SweepParameter::beta, {0.0}, {1, 2}, ds, nullptr, pairs, 5, Metric::euclidean, true);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(m0.cells[i].accuracy, b0.cells[i].accuracy);
    EXPECT_EQ(m0.cells[i].checkpoint->state, b0.cells[i].checkpoint->state);
  }
}

TEST(Sweep, CellsReproducibleInIsolation) {
  const Dataset ds = sweep_data();
  const auto pairs = make_pairs(ds, Split::heldout, 30, 30, 1);
  const TrainConfig base = sweep_config();
  const std::vector<double> values{0.0, 1.0, 4.0};
  const auto t = sweep(base, SweepParameter::margin, values, {7, 8}, ds, nullptr, pairs, 5);
  ASSERT_EQ(t.cells.size(), 6u);
  for (const auto& c : t.cells) {
    const auto again = sweep(base, SweepParameter::margin, {c.value}, {c.seed}, ds, nullptr, pairs, 5);
    EXPECT_EQ(again.cells[0].accuracy, c.accuracy);
  }
  for (std::size_t v = 0; v < 3; ++v)
    EXPECT_DOUBLE_EQ(t.seed_mean[v], 0.5 * (t.cells[2 * v].accuracy + t.cells[2 * v + 1].accuracy));
  const std::string csv = sweep_csv(t);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "parameter,value,seed,status,accuracy,threshold,seed_mean");
}

TEST(Sweep, FailedCellsAreRecordedAndSweepContinues) {
  const Dataset ds = sweep_data();
  const auto pairs = make_pairs(ds, Split::heldout, 30, 30, 1);
  TrainConfig base = sweep_config();
  base.base_lr = 1e8;
  base.iterations = 100;
  const auto t = sweep(base, SweepParameter::beta, {0.1, 0.2}, {1}, ds, nullptr, pairs, 5);
  EXPECT_EQ(t.cells.size(), 2u);
  EXPECT_EQ(t.failures(), 2u);
  EXPECT_FALSE(t.cells[0].error.empty());
  EXPECT_TRUE(std::isnan(t.seed_mean[0]));
  EXPECT_THROW(sweep(base, SweepParameter::beta, {}, {1}, ds, nullptr, pairs, 5), ConfigError);
}

TEST(EvalReportJson, ContainsSections) {
  EvalReport r;
  r.verification = verification_accuracy_from_distances({1, 2, 3, 4}, {true, true, false, false}, 2);
  r.roc = roc({1, 2}, {3, 4});
  r.vr_at_far[0.5] = vr_at_far(*r.roc, 0.5);
  const auto j = to_json(r);
  EXPECT_TRUE(j.contains("verification_accuracy"));
  EXPECT_EQ(j["roc"]["auc"].get<double>(), 1.0);
  EXPECT_EQ(j["vr_at_far"][0]["tar"].get<double>(), 1.0);
  EXPECT_FALSE(j.contains("cmc"));
}
