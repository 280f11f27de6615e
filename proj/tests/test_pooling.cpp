#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"

using namespace tcv2;

namespace {

AttentionPoolParams random_pool(std::size_t heads, std::size_t d, std::size_t da, Rng& rng, double scale = 1.0) {
  AttentionPoolParams p = AttentionPoolParams::zeros({heads, d, da});
  for (Parameter* q : p.parameters()) oracle::fill_uniform(*q, rng, -scale, scale);
  return p;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(PoolAttention, SingleInstanceGivesUnitWeights) {
  Rng rng(1);
  auto p = random_pool(3, 4, 2, rng);
  Tensor bag = oracle::random_bag(1, 4, rng);
  Tape t(false);
  auto r = pool_attention(bag, p, t);
  EXPECT_EQ(r.map.heads, 3u);
  for (double w : r.map.weights) EXPECT_EQ(w, 1.0);
  auto o = oracle::pool_attention(oracle::to_matrix(bag.storage(), 1, 4), p);
  EXPECT_LT(max_abs_diff(r.slide_vector.values(), o.slide), 1e-12);
}

TEST(PoolAttention, IdenticalInstancesGiveUniformWeights) {
  Rng rng(2);
  auto p = random_pool(2, 3, 4, rng);
  std::vector<double> one = {0.3, -1.2, 0.7};
  std::vector<double> rep;
  for (int i = 0; i < 5; ++i) rep.insert(rep.end(), one.begin(), one.end());
  Tape t(false);
  auto many = pool_attention(Tensor(Shape{5, 3}, rep), p, t);
  auto single = pool_attention(Tensor(Shape{1, 3}, one), p, t);
  for (double w : many.map.weights) EXPECT_NEAR(w, 0.2, 1e-15);
  EXPECT_LT(max_abs_diff(many.slide_vector.values(), single.slide_vector.values()), 1e-14);
}

TEST(PoolAttention, MatchesScalarOracle) {
  Rng rng(3);
  auto p = random_pool(2, 4, 3, rng);
  Tensor bag = oracle::random_bag(5, 4, rng);
  Tape t(false);
  auto r = pool_attention(bag, p, t);
  auto o = oracle::pool_attention(oracle::to_matrix(bag.storage(), 5, 4), p);
  EXPECT_LT(max_abs_diff(r.slide_vector.values(), o.slide), 1e-12);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r.map.at(h, k), o.alpha[h][k], 1e-12);
}

TEST(PoolAttention, RowsAreProbabilityVectors) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto p = random_pool(1 + rng.below(8), 6, 3, rng, 3.0);
    Tensor bag = oracle::random_bag(1 + rng.below(40), 6, rng, 3.0);
    Tape t(false);
    auto r = pool_attention(bag, p, t);
    for (std::size_t h = 0; h < r.map.heads; ++h) {
      double s = 0;
      for (std::size_t k = 0; k < r.map.instances; ++k) {
        EXPECT_GE(r.map.at(h, k), 0.0);
        s += r.map.at(h, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(PoolAttention, PermutationInvariance) {
  Rng rng(5);
  auto p = random_pool(4, 5, 3, rng);
  const std::size_t n = 9;
  Tensor bag = oracle::random_bag(n, 5, rng);
  Tape t(false);
  auto base = pool_attention(bag, p, t);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<double> v;
    for (std::size_t k : perm)
      for (std::size_t j = 0; j < 5; ++j) v.push_back(bag.at(k, j));
    auto r = pool_attention(Tensor(Shape{n, 5}, v), p, t);
    EXPECT_LT(max_abs_diff(r.slide_vector.values(), base.slide_vector.values()), 1e-9);
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(r.map.at(h, k), base.map.at(h, perm[k]), 1e-12);
  }
}

TEST(PoolAttention, ConcentratedMassSelectsInstance) {
  // One instance along the direction the score vector rewards, the rest
  // against it: every head puts nearly all weight on that instance.
  const std::size_t d = 3, heads = 2;
  AttentionPoolParams p = AttentionPoolParams::zeros({heads, d, 1});
  Rng rng(6);
  oracle::fill_uniform(p.output_projection, rng, -1, 1);
  for (std::size_t h = 0; h < heads; ++h) {
    p.score_matrices[h].value = {1.0, 0.0, 0.0};
    p.score_vectors[h].value = {60.0};
  }
  Tensor bag = Tensor::matrix({{-2, 1, 1}, {3, 0.5, -0.5}, {-3, 2, 0}});
  Tape t(false);
  auto r = pool_attention(bag, p, t);
  std::vector<double> expect(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < d; ++j) expect[i] += p.output_projection.value[i * heads * d + h * d + j] * bag.at(1, j);
  EXPECT_LT(max_abs_diff(r.slide_vector.values(), expect), 1e-6);
}

TEST(PoolAttention, ZeroScoresGiveMeanPerHead) {
  Rng rng(7);
  AttentionPoolParams p = AttentionPoolParams::zeros({3, 4, 2});
  oracle::fill_uniform(p.output_projection, rng, -1, 1);
  Tensor bag = oracle::random_bag(6, 4, rng);
  Tape t(false);
  auto r = pool_attention(bag, p, t);
  auto mean = pool_mean(bag);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.head_vectors[h * 4 + j], mean[j], 1e-12);
}

TEST(PoolAttention, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  auto p = random_pool(3, 4, 3, rng);
  Parameter x("x", Shape{5, 4});
  oracle::fill_uniform(x, rng, -1, 1);
  Parameter w("w", Shape{1, 4});
  oracle::fill_uniform(w, rng, -1, 1);
  auto f = [&](Tape& t) { return sum(mul(pool_attention(t.watch(x), p, t).slide_vector, t.watch(w))); };
  std::vector<Parameter*> params = p.parameters();
  params.push_back(&x);
  for (Parameter* q : params) {
    for (Parameter* z : params) z->zero_grad();
    Tape t;
    t.backward(f(t));
    auto g = q->grad;
    auto n = finite_diff_grad([&] {
      Tape t2(false);
      return f(t2).item();
    }, *q, 1e-5);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(oracle::rel_error(g[i], n[i]), 1e-5) << q->stable_id;
  }
}

TEST(PoolAttention, Errors) {
  Rng rng(9);
  auto p = random_pool(2, 4, 2, rng);
  Tape t(false);
  EXPECT_THROW(pool_attention(oracle::random_bag(3, 5, rng), p, t), DimensionError);
  Bag empty;
  empty.slide_id = "s0";
  empty.width = 4;
  EXPECT_THROW(empty.tensor(), ContractError);
  EXPECT_THROW(AttentionPoolParams::zeros({0, 4, 2}), ConfigError);
}

TEST(PoolAttention, DefaultAttentionWidth) {
  EXPECT_EQ((AttentionPoolConfig{8, 64, 0}.resolved_attention_width()), 32u);
  EXPECT_EQ((AttentionPoolConfig{8, 20, 0}.resolved_attention_width()), 16u);
  auto p = AttentionPoolParams::zeros({8, 64, 0});
  EXPECT_EQ(p.heads(), 8u);
  EXPECT_EQ(p.output_projection.shape, Shape({64, 512}));
}

TEST(PoolMean, Values) {
  EXPECT_EQ(pool_mean(Tensor::matrix({{1, 1}, {3, 3}})).storage(), (std::vector<double>{2, 2}));
  EXPECT_EQ(pool_mean(Tensor::matrix({{1, 7}})).storage(), (std::vector<double>{1, 7}));
  Rng rng(10);
  Tensor bag = oracle::random_bag(13, 6, rng);
  auto m = pool_mean(bag);
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0;
    for (std::size_t k = 0; k < 13; ++k) s += bag.at(k, j);
    EXPECT_NEAR(m[j], s / 13.0, 1e-14);
  }
}

TEST(PoolMax, ValuesAndTieRouting) {
  EXPECT_EQ(pool_max(Tensor::matrix({{1, 5}, {3, 2}})).storage(), (std::vector<double>{3, 5}));
  EXPECT_EQ(pool_max(Tensor::matrix({{4, -1}})).storage(), (std::vector<double>{4, -1}));
  Parameter x("x", Shape{2, 1}, {2.0, 2.0});
  Tape t;
  t.backward(sum(pool_max(t.watch(x))));
  EXPECT_EQ(x.grad, (std::vector<double>{1.0, 0.0}));
}
