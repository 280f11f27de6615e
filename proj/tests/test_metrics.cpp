#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"

using namespace tcv2;

namespace {

struct Case {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Random binary case with both classes present and deliberately coarse
// scores so ties are common.
Case random_case(Rng& rng) {
  Case c;
  const std::size_t n = 2 + rng.below(199);
  const std::uint64_t levels = 1 + rng.below(20);
  for (std::size_t i = 0; i < n; ++i) {
    c.scores.push_back(static_cast<double>(rng.below(levels)) / 7.0);
    c.labels.push_back(static_cast<int>(rng.below(2)));
  }
  c.labels[0] = 0;
  c.labels[1] = 1;
  return c;
}

std::vector<int> random_classes(Rng& rng, std::size_t n, int c) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
  return v;
}

}  // namespace

TEST(Auc, Examples) {
  EXPECT_EQ(metric_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(metric_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}), 0.5);
  EXPECT_EQ(metric_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_THROW(metric_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricUndefinedError);
  EXPECT_THROW(metric_auc(std::vector<double>{0.1}, std::vector<int>{2}), LabelError);
  EXPECT_THROW(metric_auc(std::vector<double>{0.1}, std::vector<int>{0, 1}), DimensionError);
}

TEST(Auc, EqualsPairwiseStatisticExactly) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    auto c = random_case(rng);
    ASSERT_EQ(metric_auc(c.scores, c.labels), oracle::pairwise_auc(c.scores, c.labels)) << "case " << i;
  }
}

TEST(Auc, InvariantUnderStrictlyIncreasingMaps) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    auto c = random_case(rng);
    const double base = metric_auc(c.scores, c.labels);
    std::vector<double> e, a;
    for (double s : c.scores) {
      e.push_back(std::exp(s));
      a.push_back(3.0 * s - 11.0);
    }
    EXPECT_EQ(metric_auc(e, c.labels), base);
    EXPECT_EQ(metric_auc(a, c.labels), base);
  }
}

TEST(Auc, FlippingScoresComplements) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    auto c = random_case(rng);
    std::vector<double> neg;
    for (double s : c.scores) neg.push_back(-s);
    EXPECT_NEAR(metric_auc(neg, c.labels), 1.0 - metric_auc(c.scores, c.labels), 1e-15);
  }
}

TEST(AucOvr, BinaryUsesPositiveColumnAndMulticlassAveragesPresentClasses) {
  std::vector<double> p2{0.9, 0.1, 0.4, 0.6, 0.2, 0.8};
  std::vector<int> y2{0, 1, 1};
  EXPECT_EQ(metric_auc_ovr(p2, y2, 2), 1.0);
  // Class 2 never occurs; only classes 0 and 1 are averaged.
  std::vector<double> p3{0.7, 0.2, 0.1, 0.2, 0.7, 0.1, 0.5, 0.4, 0.1, 0.3, 0.6, 0.1};
  std::vector<int> y3{0, 1, 0, 1};
  std::vector<double> s0{0.7, 0.2, 0.5, 0.3}, s1{0.2, 0.7, 0.4, 0.6};
  const double expected = (oracle::pairwise_auc(s0, {1, 0, 1, 0}) + oracle::pairwise_auc(s1, {0, 1, 0, 1})) / 2;
  EXPECT_EQ(metric_auc_ovr(p3, y3, 3), expected);
  EXPECT_THROW(metric_auc_ovr(std::vector<double>(6, 0.3), std::vector<int>{1, 1}, 3), MetricUndefinedError);
}

TEST(BalancedAccuracy, Examples) {
  std::vector<int> t{0, 1, 1, 2, 0};
  EXPECT_EQ(metric_balanced_accuracy(t, t, 3), 1.0);
  EXPECT_EQ(metric_balanced_accuracy(std::vector<int>{0, 0, 0, 0}, std::vector<int>{0, 0, 1, 1}, 2), 0.5);
  // recalls 1.0, 0.5, 0.0
  std::vector<int> truth{0, 0, 1, 1, 2, 2};
  std::vector<int> pred{0, 0, 1, 0, 1, 0};
  EXPECT_EQ(metric_balanced_accuracy(pred, truth, 3), 0.5);
  EXPECT_THROW(metric_balanced_accuracy(std::vector<int>{}, std::vector<int>{}, 2), MetricUndefinedError);
}

TEST(BalancedAccuracy, MatchesPerClassCountsAndIgnoresAbsentClasses) {
  Rng rng(4);
  for (int i = 0; i < 300; ++i) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 1 + rng.below(60);
    auto truth = random_classes(rng, n, c);
    auto pred = random_classes(rng, n, c);
    double sum = 0;
    int present = 0;
    for (int k = 0; k < c; ++k) {
      int hit = 0, tot = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (truth[j] == k) {
          ++tot;
          hit += pred[j] == k;
        }
      if (tot == 0) continue;
      sum += static_cast<double>(hit) / tot;
      ++present;
    }
    EXPECT_NEAR(metric_balanced_accuracy(pred, truth, c), sum / present, 1e-15);
  }
}

TEST(BalancedAccuracy, InvariantUnderRelabeling) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 1 + rng.below(80);
    auto truth = random_classes(rng, n, c);
    auto pred = random_classes(rng, n, c);
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t k = perm.size(); k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
    std::vector<int> pt, pp;
    for (std::size_t j = 0; j < n; ++j) {
      pt.push_back(perm[static_cast<std::size_t>(truth[j])]);
      pp.push_back(perm[static_cast<std::size_t>(pred[j])]);
    }
    EXPECT_NEAR(metric_balanced_accuracy(pp, pt, c), metric_balanced_accuracy(pred, truth, c), 1e-15);
  }
}

TEST(Kappa, Examples) {
  std::vector<int> t{0, 1, 2, 2, 1};
  EXPECT_EQ(metric_quadratic_kappa(t, t, 3), 1.0);
  std::vector<int> truth{0, 0, 1, 2}, pred{0, 1, 1, 2};
  EXPECT_NEAR(metric_quadratic_kappa(pred, truth, 3), oracle::confusion_kappa(pred, truth, 3), 1e-12);
  // By hand: sum wO = 1/4, sum wE = 5/4.
  EXPECT_NEAR(metric_quadratic_kappa(pred, truth, 3), 0.8, 1e-12);
  EXPECT_THROW(metric_quadratic_kappa(std::vector<int>{1, 1}, std::vector<int>{1, 1}, 3), MetricUndefinedError);
  EXPECT_THROW(metric_quadratic_kappa(std::vector<int>{3}, std::vector<int>{1}, 3), LabelError);
}

TEST(Kappa, ChanceStructuredMatrixIsZero) {
  // Every (truth, pred) pair exactly once: O equals the outer product of its
  // marginals divided by n.
  for (int c = 2; c <= 6; ++c) {
    std::vector<int> truth, pred;
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) {
        truth.push_back(i);
        pred.push_back(j);
      }
    EXPECT_NEAR(metric_quadratic_kappa(pred, truth, c), 0.0, 1e-12);
  }
  // O = [[1, 3], [2, 6]] is its own marginal outer product over n = 12.
  std::vector<int> truth{0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1}, pred{0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1};
  EXPECT_NEAR(metric_quadratic_kappa(pred, truth, 2), 0.0, 1e-12);
}

TEST(Kappa, MatchesConfusionMatrixOracle) {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 2 + rng.below(199);
    auto truth = random_classes(rng, n, c);
    auto pred = random_classes(rng, n, c);
    truth[0] = 0;
    truth[1] = c - 1;
    ASSERT_NEAR(metric_quadratic_kappa(pred, truth, c), oracle::confusion_kappa(pred, truth, c), 1e-12) << "case " << i;
  }
}

TEST(Kappa, SymmetricAndOneOnlyForExactAgreement) {
  Rng rng(7);
  for (int i = 0; i < 300; ++i) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 2 + rng.below(50);
    auto truth = random_classes(rng, n, c);
    auto pred = truth;
    truth[0] = 0;
    truth[1] = c - 1;
    pred[0] = 0;
    pred[1] = c - 1;
    EXPECT_EQ(metric_quadratic_kappa(pred, truth, c), 1.0);
    const std::size_t k = rng.below(n);
    pred[k] = (pred[k] + 1) % c;
    EXPECT_LT(metric_quadratic_kappa(pred, truth, c), 1.0);
    EXPECT_NEAR(metric_quadratic_kappa(pred, truth, c), metric_quadratic_kappa(truth, pred, c), 1e-14);
  }
}

TEST(MetricSummary, StdZeroForOneRepeatAndMeanWithinRange) {
  MetricReport rep;
  rep.add("auc", 0.8);
  EXPECT_EQ(rep.at("auc").std(), 0.0);
  EXPECT_EQ(rep.at("auc").n_repeats(), 1u);
  EXPECT_THROW(rep.at("kappa"), MetricUndefinedError);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    MetricSummary s;
    const std::size_t n = 1 + rng.below(10);
    for (std::size_t k = 0; k < n; ++k) s.raw.push_back(rng.uniform());
    const auto [lo, hi] = std::minmax_element(s.raw.begin(), s.raw.end());
    EXPECT_GE(s.mean(), *lo - 1e-15);
    EXPECT_LE(s.mean(), *hi + 1e-15);
    double m = 0, v = 0;
    for (double x : s.raw) m += x;
    m /= static_cast<double>(n);
    for (double x : s.raw) v += (x - m) * (x - m);
    EXPECT_NEAR(s.mean(), m, 1e-15);
    EXPECT_NEAR(s.std(), std::sqrt(v / static_cast<double>(n)), 1e-15);
  }
}
