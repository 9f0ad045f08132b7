// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#include <gtest/gtest.h>

#include <cmath>

#include "mml/losses.hpp"
#include "oracles.hpp"

using namespace mml;

namespace {

ClassifierHead random_head(Rng& rng, std::size_t d, std::size_t k) {
  ClassifierHead h{oracle::random_matrix(rng, d, k), std::vector<double>(k)};
  for (auto& b : h.biases) b = rng.normal();
  return h;
}

// Centres shifted by the change in batch class means; the surrogate the
// coupled feature gradient differentiates through.
Matrix surrogate_centres(const Matrix& c0, const Matrix& f0, const Matrix& f, const std::vector<int>& y) {
  Matrix c = c0;
  std::vector<double> n(c0.rows(), 0.0);
  for (int v : y) n[v] += 1.0;
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t k = 0; k < f.cols(); ++k) c(y[i], k) += (f(i, k) - f0(i, k)) / n[y[i]];
  return c;
}

}  // namespace

// ---- softmax_ce

TEST(SoftmaxCe, UniformLogitsGiveLnK) {
  const ClassifierHead h{Matrix(3, 2), {0.0, 0.0}};
  const std::vector<int> y{0, 1, 1};
  Rng rng(1);
  EXPECT_NEAR(softmax_ce(oracle::random_matrix(rng, 3, 3), y, h).value, std::log(2.0), 1e-15);
}

TEST(SoftmaxCe, SaturatedCorrectClassGoesToZero) {
  const ClassifierHead h{Matrix{{1000.0, -1000.0}}, {0.0, 0.0}};
  const std::vector<int> y{0};
  const auto out = softmax_ce(Matrix{{1.0}}, y, h);
  EXPECT_EQ(out.value, 0.0);
  const ClassifierHead wrong{Matrix{{-1000.0, 1000.0}}, {0.0, 0.0}};
  const auto bad = softmax_ce(Matrix{{1.0}}, y, wrong);
  EXPECT_NEAR(bad.value, 2000.0, 1e-9);  // finite, via log-sum-exp
}

TEST(SoftmaxCe, GradientsMatchFiniteDifferences) {
  Rng rng(101);
  const Matrix f = oracle::random_matrix(rng, 4, 3);
  const ClassifierHead h = random_head(rng, 3, 3);
  const std::vector<int> y{0, 2, 1, 2};
  const auto out = softmax_ce(f, y, h);

  const Matrix gf = oracle::fd_gradient(f, [&](const Matrix& x) { return softmax_ce(x, y, h).value; });
  EXPECT_LT(oracle::max_rel_err(out.grad_features, gf), 1e-5);

  const Matrix gw = oracle::fd_gradient(h.weights, [&](const Matrix& w) {
    return softmax_ce(f, y, ClassifierHead{w, h.biases}).value;
  });
  EXPECT_LT(oracle::max_rel_err(*out.grad_weights, gw), 1e-5);

  Matrix b(1, 3, h.biases);
  const Matrix gb = oracle::fd_gradient(b, [&](const Matrix& bb) {
    return softmax_ce(f, y, ClassifierHead{h.weights, bb.data()}).value;
  });
  EXPECT_LT(oracle::max_rel_err(Matrix(1, 3, *out.grad_biases), gb), 1e-5);
}

TEST(SoftmaxCe, RejectsBadLabels) {
  const ClassifierHead h{Matrix(2, 2), {0.0, 0.0}};
  const std::vector<int> y{0, 2};
  EXPECT_THROW(softmax_ce(Matrix(2, 2), y, h), LossError);
  const std::vector<int> neg{-1, 0};
  EXPECT_THROW(softmax_ce(Matrix(2, 2), neg, h), LossError);
  const std::vector<int> short_y{0};
  EXPECT_THROW(softmax_ce(Matrix(2, 2), short_y, h), LossError);
}

// ---- centre_loss

TEST(CentreLoss, IdentityCase) {
  const Matrix c{{1, 2}, {3, 4}};
  const std::vector<int> y{1, 0, 1};
  const Matrix f{{3, 4}, {1, 2}, {3, 4}};
  const auto out = centre_loss(f, y, c);
  EXPECT_EQ(out.value, 0.0);
  EXPECT_EQ(out.grad_features, Matrix(3, 2));
  EXPECT_EQ(*out.grad_centres, Matrix(2, 2));
}

TEST(CentreLoss, SingleSample) {
  const std::vector<int> y{0};
  const auto out = centre_loss(Matrix{{1, 0}}, y, Matrix{{0, 0}});
  EXPECT_EQ(out.value, 0.5);
  EXPECT_EQ(out.grad_features, (Matrix{{1, 0}}));
  EXPECT_EQ(*out.grad_centres, (Matrix{{-1, 0}}));
}

TEST(CentreLoss, GradientsMatchFiniteDifferences) {
  Rng rng(202);
  const Matrix f = oracle::random_matrix(rng, 5, 4);
  const Matrix c = oracle::random_matrix(rng, 3, 4);
  const std::vector<int> y{0, 1, 2, 1, 0};
  const auto out = centre_loss(f, y, c);
  const Matrix gf = oracle::fd_gradient(f, [&](const Matrix& x) { return centre_loss(x, y, c).value; });
  EXPECT_LT(oracle::max_rel_err(out.grad_features, gf), 1e-6);
  const Matrix gc = oracle::fd_gradient(c, [&](const Matrix& x) { return centre_loss(f, y, x).value; });
  EXPECT_LT(oracle::max_rel_err(*out.grad_centres, gc), 1e-6);
}

TEST(CentreLoss, RejectsBadInput) {
  const std::vector<int> y{3};
  EXPECT_THROW(centre_loss(Matrix(1, 2), y, Matrix(2, 2)), LossError);
  Matrix c(2, 2);
  c(0, 0) = std::nan("");
  const std::vector<int> ok{0};
  EXPECT_THROW(centre_loss(Matrix(1, 2), ok, c), LossError);
}

// ---- mml

TEST(Mml, BoundaryIsInactive) {
  const Matrix c{{0, 0}, {3, 4}};
  const std::vector<int> y{0, 1};
  const auto out = mml::mml(Matrix(2, 2), y, c, {25.0, Coupling::coupled, PairScope::batch_classes});
  EXPECT_EQ(out.value, 0.0);
  EXPECT_EQ(out.active_terms, 0u);
  EXPECT_EQ(*out.grad_centres, Matrix(2, 2));
}

TEST(Mml, DirectHingeArithmetic) {
  const Matrix c{{0, 0}, {6, 8}};
  const std::vector<int> y{0, 1};
  const auto out = mml::mml(Matrix(2, 2), y, c, {280.0, Coupling::detached, PairScope::batch_classes});
  EXPECT_EQ(out.value, 180.0);
  EXPECT_EQ(out.grad_features, Matrix(2, 2));
}

TEST(Mml, FewerThanTwoClassesIsZero) {
  const Matrix c{{0, 0}, {1, 0}};
  const std::vector<int> y{1, 1, 1};
  const auto out = mml::mml(Matrix(3, 2), y, c, {100.0, Coupling::coupled, PairScope::batch_classes});
  EXPECT_EQ(out.value, 0.0);
  EXPECT_EQ(out.grad_features, Matrix(3, 2));
  EXPECT_EQ(*out.grad_centres, Matrix(2, 2));
}

TEST(Mml, AllClassesScopeIgnoresBatchComposition) {
  const Matrix c{{0, 0}, {1, 0}, {0, 2}};
  const std::vector<int> y{1, 1};
  const auto out = mml::mml(Matrix(2, 2), y, c, {3.0, Coupling::detached, PairScope::all_classes});
  // pairs: (0,1) d=1, (0,2) d=4, (1,2) d=5 -> only (0,1) active
  EXPECT_EQ(out.value, 2.0);
  EXPECT_EQ(out.active_terms, 1u);
}

TEST(Mml, RejectsNegativeMargin) {
  const std::vector<int> y{0};
  EXPECT_THROW(mml::mml(Matrix(1, 2), y, Matrix(2, 2), {-1.0}), LossError);
}

TEST(Mml, MatchesBruteForceWithTwoViolations) {
  Rng rng(303);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix c = oracle::random_matrix(rng, 4, 3, 3.0);
    std::vector<double> d;
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) d.push_back(oracle::sqd(c, a, c, b));
    std::sort(d.begin(), d.end());
    const double margin = 0.5 * (d[1] + d[2]);  // exactly two violating pairs
    const std::vector<int> y{0, 1, 2, 3, 2, 0};
    const Matrix f = oracle::random_matrix(rng, 6, 3);
    const auto out = mml::mml(f, y, c, {margin, Coupling::coupled, PairScope::batch_classes});
    const auto ref = oracle::mml_brute(c, {0, 1, 2, 3}, margin);
    EXPECT_EQ(out.active_terms, 2u);
    EXPECT_NEAR(out.value, ref.value, 1e-12 * std::max(1.0, ref.value));
    EXPECT_LT(oracle::max_rel_err(*out.grad_centres, ref.grad_centres), 1e-12);

    const Matrix gf = oracle::fd_gradient(f, [&](const Matrix& x) {
      const Matrix cs = surrogate_centres(c, f, x, y);
      return oracle::mml_brute(cs, {0, 1, 2, 3}, margin).value;
    });
    EXPECT_LT(oracle::max_rel_err(out.grad_features, gf), 1e-5);

    const auto det = mml::mml(f, y, c, {margin, Coupling::detached, PairScope::batch_classes});
    EXPECT_EQ(det.grad_features, Matrix(6, 3));
    EXPECT_EQ(*det.grad_centres, *out.grad_centres);
  }
}

TEST(Mml, PropertiesOnRandomCentres) {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(5);
    const Matrix c = oracle::random_matrix(rng, k, 2, 2.0);
    std::vector<int> y(k);
    for (std::size_t j = 0; j < k; ++j) y[j] = static_cast<int>(j);
    const double margin = 10.0 * rng.uniform();
    const MmlConfig cfg{margin, Coupling::detached, PairScope::batch_classes};
    const auto base = mml::mml(Matrix(k, 2), y, c, cfg);
    EXPECT_GE(base.value, 0.0);

    bool all_far = true;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b) all_far = all_far && oracle::sqd(c, a, c, b) >= margin;
    EXPECT_EQ(base.value == 0.0, all_far);

    // scaling out never increases the loss
    Matrix scaled = c;
    const double s = 1.0 + 2.0 * rng.uniform();
    for (double& v : scaled.data()) v *= s;
    EXPECT_LE(mml::mml(Matrix(k, 2), y, scaled, cfg).value, base.value + 1e-12);

  }
}

// Moving a centre toward its partner can also move it away from a third centre,
// so monotonicity is a statement about an isolated violating pair.
TEST(Mml, PullingAViolatingPairCloserNeverDecreases) {
  Rng rng(405);
  const std::vector<int> y{0, 1};
  for (int trial = 0; trial < 500; ++trial) {
    const Matrix c = oracle::random_matrix(rng, 2, 3, 2.0);
    const double margin = oracle::sqd(c, 0, c, 1) * (1.0 + rng.uniform());
    const MmlConfig cfg{margin, Coupling::detached, PairScope::batch_classes};
    const double base = mml::mml(Matrix(2, 3), y, c, cfg).value;
    Matrix closer = c;
    const double t = rng.uniform();
    for (std::size_t q = 0; q < 3; ++q) closer(0, q) += t * (c(1, q) - c(0, q));
    EXPECT_GE(mml::mml(Matrix(2, 3), y, closer, cfg).value, base);
  }
}

// ---- marginal_loss

TEST(MarginalLoss, HandValues) {
  const std::vector<int> same{0, 0};
  EXPECT_EQ(marginal_loss(Matrix{{1, 0}, {1, 0}}, same, 0.5, 0.1).value, 0.0);
  const std::vector<int> diff{0, 1};
  EXPECT_EQ(marginal_loss(Matrix{{1, 0}, {-1, 0}}, diff, 0.5, 0.1).value, 0.0);
  // orthogonal different-class pair: (0.1 + 0.5 - 2)+ = 0; same-class: (0.1 - 0.5 + 2) = 1.6
  EXPECT_NEAR(marginal_loss(Matrix{{1, 0}, {0, 2}}, same, 0.5, 0.1).value, 1.6, 1e-15);
}

TEST(MarginalLoss, RejectsZeroNormAndSmallBatch) {
  const std::vector<int> y{0, 1};
  EXPECT_THROW(marginal_loss(Matrix{{1, 0}, {0, 0}}, y, 0.5, 0.1), LossError);
  const std::vector<int> one{0};
  EXPECT_THROW(marginal_loss(Matrix{{1, 0}}, one, 0.5, 0.1), LossError);
}

TEST(MarginalLoss, GradientMatchesFiniteDifferencesAwayFromKinks) {
  Rng rng(505);
  const std::vector<int> y{0, 0, 1, 1, 2, 0};
  int checked = 0;
  for (int trial = 0; trial < 50 && checked < 10; ++trial) {
    const Matrix f = oracle::random_matrix(rng, 6, 4);
    const double theta = 1.0, xi = 0.3;
    // skip points with any hinge within 1e-3 of its kink
    const Matrix u = l2_normalize_rows(f);
    bool near_kink = false;
    for (int i = 0; i < 6; ++i)
      for (int j = i + 1; j < 6; ++j) {
        const double s = y[i] == y[j] ? 1.0 : -1.0;
        near_kink = near_kink || std::abs(xi - s * (theta - oracle::sqd(u, i, u, j))) < 1e-3;
      }
    if (near_kink) continue;
    ++checked;
    const auto out = marginal_loss(f, y, theta, xi);
    const Matrix g = oracle::fd_gradient(f, [&](const Matrix& x) { return marginal_loss(x, y, theta, xi).value; });
    EXPECT_LT(oracle::max_rel_err(out.grad_features, g), 1e-5);
  }
  EXPECT_EQ(checked, 10);
}

TEST(MarginalLoss, InvariantToPositiveRowScaling) {
  Rng rng(506);
  const std::vector<int> y{0, 1, 0, 1, 2};
  for (int t = 0; t < 50; ++t) {
    const Matrix f = oracle::random_matrix(rng, 5, 3);
    Matrix g = f;
    for (std::size_t i = 0; i < 5; ++i) {
      const double s = 0.1 + 10.0 * rng.uniform();
      for (std::size_t k = 0; k < 3; ++k) g(i, k) *= s;
    }
    EXPECT_NEAR(marginal_loss(f, y, 1.0, 0.2).value, marginal_loss(g, y, 1.0, 0.2).value, 1e-12);
  }
}

// ---- range_loss

TEST(RangeLoss, SinglePairCollapsesTopN) {
  const std::vector<int> y{0, 0};
  const auto out = range_loss(Matrix{{0, 0}, {1, 1}}, y, {0.0, 1.0, 1.0, 2});
  EXPECT_EQ(out.value, 2.0);
}

TEST(RangeLoss, InterInactiveWhenCentresFar) {
  const std::vector<int> y{0, 0, 1, 1};
  const Matrix f{{0, 0}, {0, 1}, {10, 0}, {10, 1}};
  const auto out = range_loss(f, y, {50.0, 0.0, 1.0, 2});
  EXPECT_EQ(out.value, 0.0);
  EXPECT_EQ(out.grad_features, Matrix(4, 2));
  const auto active = range_loss(f, y, {150.0, 0.0, 1.0, 2});
  EXPECT_EQ(active.value, 50.0);
}

TEST(RangeLoss, SingletonClassesAreSkipped) {
  const std::vector<int> y{0, 0, 1, 2};
  const auto out = range_loss(Matrix{{0, 0}, {1, 1}, {5, 5}, {9, 9}}, y, {0.0, 1.0, 1.0, 2});
  EXPECT_EQ(out.skipped_classes, (std::vector<int>{1, 2}));
  EXPECT_EQ(out.value, 2.0);
}

TEST(RangeLoss, HarmonicMeanOfTopTwo) {
  // three collinear points at 0, 1, 3: pair distances 1, 9, 4 -> top two 9, 4
  const std::vector<int> y{0, 0, 0};
  const auto out = range_loss(Matrix{{0}, {1}, {3}}, y, {0.0, 1.0, 1.0, 2});
  EXPECT_NEAR(out.value, 2.0 / (1.0 / 9.0 + 1.0 / 4.0), 1e-14);
}

TEST(RangeLoss, GradientMatchesFiniteDifferencesAwayFromTies) {
  Rng rng(606);
  const std::vector<int> y{0, 0, 0, 1, 1, 1, 2, 2};
  for (int t = 0; t < 10; ++t) {
    const Matrix f = oracle::random_matrix(rng, 8, 3, 2.0);
    const RangeLossParams p{40.0, 0.7, 1.3, 2};
    const auto out = range_loss(f, y, p);
    const Matrix g = oracle::fd_gradient(f, [&](const Matrix& x) { return range_loss(x, y, p).value; });
    EXPECT_LT(oracle::max_rel_err(out.grad_features, g), 1e-4);
  }
}

// ---- total_loss

TEST(TotalLoss, ReducesToSoftmaxBitExactly) {
  Rng rng(707);
  const Matrix f = oracle::random_matrix(rng, 6, 3);
  const ClassifierHead h = random_head(rng, 3, 4);
  const Matrix c = oracle::random_matrix(rng, 4, 3);
  const std::vector<int> y{0, 1, 2, 3, 0, 1};
  const auto s = softmax_ce(f, y, h);
  const auto t = total_loss(f, y, h, c, 0.0, 0.0, {100.0});
  EXPECT_EQ(t.value, s.value);
  EXPECT_EQ(t.grad_features, s.grad_features);
  EXPECT_EQ(*t.grad_weights, *s.grad_weights);
  EXPECT_EQ(*t.grad_biases, *s.grad_biases);
}

TEST(TotalLoss, BetaZeroIsSoftmaxPlusCentre) {
  Rng rng(708);
  const Matrix f = oracle::random_matrix(rng, 6, 3);
  const ClassifierHead h = random_head(rng, 3, 4);
  const Matrix c = oracle::random_matrix(rng, 4, 3);
  const std::vector<int> y{0, 1, 2, 3, 0, 1};
  const double alpha = 0.37;
  const auto t = total_loss(f, y, h, c, alpha, 0.0, {100.0});
  EXPECT_EQ(t.value, softmax_ce(f, y, h).value + alpha * centre_loss(f, y, c).value);
  EXPECT_EQ(t.parts.mml, 0.0);
}

TEST(TotalLoss, GradientMatchesFiniteDifferencesAtSmallWeights) {
  Rng rng(709);
  const Matrix f = oracle::random_matrix(rng, 8, 3);
  const ClassifierHead h = random_head(rng, 3, 4);
  const Matrix c = oracle::random_matrix(rng, 4, 3, 0.5);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 2};
  const MmlConfig cfg{5.0, Coupling::coupled, PairScope::batch_classes};
  const double alpha = 5e-5, beta = 5e-8;
  const auto t = total_loss(f, y, h, c, alpha, beta, cfg);
  ASSERT_GT(t.active_terms, 0u);
  const Matrix g = oracle::fd_gradient(f, [&](const Matrix& x) {
    return softmax_ce(x, y, h).value + alpha * centre_loss(x, y, c).value +
           beta * oracle::mml_brute(surrogate_centres(c, f, x, y), {0, 1, 2, 3}, cfg.margin).value;
  });
  EXPECT_LT(oracle::max_rel_err(t.grad_features, g), 1e-4);
}

TEST(TotalLoss, LargeWeightsStillMatchComposition) {
  Rng rng(710);
  const Matrix f = oracle::random_matrix(rng, 8, 3);
  const ClassifierHead h = random_head(rng, 3, 4);
  const Matrix c = oracle::random_matrix(rng, 4, 3, 0.5);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 2};
  const MmlConfig cfg{5.0, Coupling::coupled, PairScope::batch_classes};
  const auto t = total_loss(f, y, h, c, 0.5, 0.2, cfg);
  const Matrix g = oracle::fd_gradient(f, [&](const Matrix& x) {
    return softmax_ce(x, y, h).value + 0.5 * centre_loss(x, y, c).value +
           0.2 * oracle::mml_brute(surrogate_centres(c, f, x, y), {0, 1, 2, 3}, cfg.margin).value;
  });
  EXPECT_LT(oracle::max_rel_err(t.grad_features, g), 1e-5);
  EXPECT_GE(t.value, 0.0);
}
