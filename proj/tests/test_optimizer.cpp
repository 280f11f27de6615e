#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace tcv2;

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
  Parameter p("p", Shape{3}, {1.0, -2.0, 3.0});
  OptimizerState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_step({&p}, st, cfg);
  EXPECT_EQ(p.value, (std::vector<double>{1.0, -2.0, 3.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, FirstStepClosedForm) {
  Rng rng(1);
  Parameter p("p", Shape{50});
  oracle::fill_uniform(p, rng, -1, 1);
  for (auto& g : p.grad) g = rng.uniform(-3, 3);
  const auto theta = p.value;
  const auto grad = p.grad;
  OptimizerState st;
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  adamw_step({&p}, st, cfg);
  for (std::size_t i = 0; i < 50; ++i)
    EXPECT_NEAR(p.value[i], theta[i] - cfg.lr * grad[i] / (std::abs(grad[i]) + cfg.eps), 1e-15);
}

TEST(AdamW, WeightDecayIsDecoupled) {
  Parameter p("p", Shape{1}, {2.0});
  OptimizerState st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  adamw_step({&p}, st, cfg);
  // Zero gradient: only the decay term acts, independent of the moments.
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(AdamW, FrozenParametersSkippedAndStepCountedOnce) {
  Parameter a("a", Shape{2}, {1, 1}), b("b", Shape{2}, {1, 1});
  a.grad = {1, 1};
  b.grad = {1, 1};
  b.frozen = true;
  OptimizerState st;
  adamw_step({&a, &b}, st, AdamWConfig{});
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(b.value, (std::vector<double>{1, 1}));
  EXPECT_NE(a.value, (std::vector<double>{1, 1}));
  EXPECT_EQ(st.moments.count("b"), 0u);
}

TEST(AdamW, QuadraticBowlConverges) {
  Rng rng(2);
  Parameter p("p", Shape{10});
  for (auto& v : p.value) v = rng.normal();
  double norm = 0;
  for (double v : p.value) norm += v * v;
  for (auto& v : p.value) v /= std::sqrt(norm);
  OptimizerState st;
  AdamWConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    Tape t;
    Tensor x = t.watch(p);
    t.backward(sum(mul(x, x)));
    adamw_step({&p}, st, cfg);
  }
  norm = 0;
  for (double v : p.value) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-3);
}

TEST(AdamW, ConfigValidation) {
  AdamWConfig cfg;
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = AdamWConfig{};
  cfg.beta2 = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(AdamWConfig{}.validate());
}
