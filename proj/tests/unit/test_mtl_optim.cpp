#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "common/oracles.hpp"
#include "mtmed3d/mtl_optim.hpp"

using namespace mtmed3d::mtl;

TEST(GradNorms, ConstantLossHasZeroNorm) {
  auto W = torch::randn({3, 3}, torch::kDouble).requires_grad_(true);
  auto c = torch::tensor(2.0, torch::kDouble);
  auto L = (W * W).sum();
  Triple g{};
  auto G = grad_norms({c, L, c}, {1, 1, 1}, {W}, &g);
  EXPECT_EQ(G[0], 0.0);
  EXPECT_EQ(G[2], 0.0);
  EXPECT_GT(G[1], 0.0);
}

TEST(GradNorms, QuadraticToyMatchesAnalytic) {
  torch::manual_seed(1);
  auto W = torch::randn({4, 5}, torch::kDouble).requires_grad_(true);
  auto x = torch::randn({5}, torch::kDouble), y = torch::randn({4}, torch::kDouble);
  auto L = (W.matmul(x) - y).square().sum();
  // d/dW ||Wx - y||^2 = 2 (Wx - y) x^T, norm = 2 ||Wx - y|| ||x||
  const double want = 2.0 * (W.matmul(x) - y).norm().item<double>() * x.norm().item<double>();
  Triple g{};
  auto G = grad_norms({L, L, L}, {1.0, 2.0, 0.5}, {W}, &g);
  EXPECT_NEAR(g[0], want, 1e-10);
  EXPECT_NEAR(G[1], 2.0 * want, 1e-10);
  EXPECT_NEAR(G[2], 0.5 * want, 1e-10);
}

TEST(TrainingRates, Examples) {
  auto [rt, r] = training_rates({0.5, 1.0, 2.0}, {1.0, 2.0, 4.0});
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(rt[i], 0.5, 1e-15);
    EXPECT_NEAR(r[i], 1.0, 1e-15);
  }
  auto [rt2, r2] = training_rates({1.0, 0.5, 0.5}, {1.0, 1.0, 1.0});
  EXPECT_NEAR(r2[0], 1.5, 1e-12);
  EXPECT_NEAR(r2[1], 0.75, 1e-12);
  EXPECT_NEAR(r2[2], 0.75, 1e-12);
  EXPECT_THROW(training_rates({1, 1, 1}, {1, 0, 1}), std::invalid_argument);
}

TEST(TrainingRates, MeanIsOne) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(0.01, 5);
  for (int t = 0; t < 100; ++t) {
    auto [rt, r] = training_rates({u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)});
    EXPECT_NEAR((r[0] + r[1] + r[2]) / 3.0, 1.0, 1e-6);
  }
}

TEST(GradNormLoss, ZeroAtTarget) {
  const Triple r{1.2, 0.9, 0.9};
  const double Gbar = 2.0, alpha = 1.5;
  Triple G{};
  for (int i = 0; i < 3; ++i) G[i] = Gbar * std::pow(r[i], alpha);
  EXPECT_NEAR(gradnorm_loss(G, Gbar, r, alpha), 0.0, 1e-12);
}

TEST(GradNormLoss, AlphaZeroEqualizesNorms) {
  const Triple G{1.0, 2.0, 6.0}, r{1.5, 0.5, 1.0};
  EXPECT_NEAR(gradnorm_loss(G, 3.0, r, 0.0), 2.0 + 1.0 + 3.0, 1e-12);
}

TEST(GradNormLoss, RandomHandComputation) {
  const Triple G{0.7, 1.9, 0.4}, r{1.1, 0.8, 1.1};
  const double Gbar = (0.7 + 1.9 + 0.4) / 3.0, alpha = 1.5;
  const double want = std::abs(0.7 - Gbar * std::pow(1.1, 1.5)) + std::abs(1.9 - Gbar * std::pow(0.8, 1.5)) +
                      std::abs(0.4 - Gbar * std::pow(1.1, 1.5));
  EXPECT_NEAR(gradnorm_loss(G, Gbar, r, alpha), want, 1e-12);
}

TEST(GradNormStep, WaitsForInitialLoss) {
  TaskWeights w;
  w.l0_steps = 3;
  for (int i = 0; i < 3; ++i) {
    auto s = gradnorm_step(w, Triple{1.0 + i, 2.0, 3.0}, Triple{1, 1, 1}, 0.1);
    EXPECT_FALSE(s.updated);
  }
  EXPECT_TRUE(w.has_L0());
  EXPECT_NEAR(w.L0[0], 2.0, 1e-15);
  EXPECT_EQ(w.w, (Triple{1, 1, 1}));
}

TEST(GradNormStep, EqualProgressKeepsWeights) {
  TaskWeights w;
  w.l0_steps = 1;
  gradnorm_step(w, Triple{1, 1, 1}, Triple{2, 2, 2}, 0.1);
  auto s = gradnorm_step(w, Triple{0.5, 0.5, 0.5}, Triple{2, 2, 2}, 0.1);
  EXPECT_TRUE(s.updated);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(w.w[i], 1.0, 1e-12);
  EXPECT_NEAR(s.L_grad, 0.0, 1e-12);
}

TEST(GradNormStep, LaggingTaskGainsWeight) {
  TaskWeights w;
  w.l0_steps = 1;
  gradnorm_step(w, Triple{1, 1, 1}, Triple{1, 1, 1}, 0.05);
  const Triple before = w.w;
  auto s = gradnorm_step(w, Triple{1.0, 0.5, 0.5}, Triple{1, 1, 1}, 0.05);
  ASSERT_TRUE(s.updated);
  EXPECT_GT(s.snapshot.r[0], 1.0);
  EXPECT_LT(s.snapshot.G[0], s.snapshot.Gbar * std::pow(s.snapshot.r[0], w.alpha));
  EXPECT_GT(w.w[0], before[0]);
  EXPECT_LT(w.w[1], before[1]);
  EXPECT_NEAR(w.sum(), 3.0, 1e-6);
}

TEST(GradNormStep, SumStaysThreeAndPositive) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.05, 3);
  TaskWeights w;
  w.l0_steps = 2;
  for (int t = 0; t < 200; ++t) {
    gradnorm_step(w, Triple{u(rng), u(rng), u(rng)}, Triple{u(rng), u(rng), u(rng)}, 0.5);
    EXPECT_NEAR(w.sum(), 3.0, 1e-6);
    for (double x : w.w) EXPECT_GT(x, 0.0);
  }
}

TEST(GradNormStep, ClampsNonPositive) {
  Triple w{-0.5, 1.0, 2.0};
  renormalize(w);
  EXPECT_GT(w[0], 0.0);
  EXPECT_NEAR(w[0] + w[1] + w[2], 3.0, 1e-12);
  EXPECT_NEAR(w[1] / w[0], 1e4, 1e-6);
}

TEST(GradNormStep, TensorOverloadMatchesNorms) {
  auto W = torch::randn({6}, torch::kDouble).requires_grad_(true);
  std::array<torch::Tensor, 3> L{W.square().sum(), (2 * W).sum(), W.sum().square()};
  TaskWeights w;
  auto s = gradnorm_step(w, L, {W}, 0.01);
  EXPECT_NEAR(s.snapshot.G[0], (2 * W).norm().item<double>(), 1e-12);
  EXPECT_NEAR(s.snapshot.G[1], 2 * std::sqrt(6.0), 1e-12);
}

TEST(Mgda, AntipodalPair) {
  auto g = torch::randn({10}, torch::kDouble);
  auto r = mgda_minnorm({g, -g});
  EXPECT_NEAR(r.coeffs[0], 0.5, 1e-12);
  EXPECT_NEAR(r.coeffs[1], 0.5, 1e-12);
  EXPECT_NEAR(r.objective, 0.0, 1e-12);
}

TEST(Mgda, IdenticalGradients) {
  auto g = torch::randn({10}, torch::kDouble);
  auto r = mgda_minnorm({g, g, g});
  EXPECT_NEAR(std::sqrt(r.objective), g.norm().item<double>(), 1e-9);
  EXPECT_NEAR(r.coeffs[0] + r.coeffs[1] + r.coeffs[2], 1.0, 1e-12);
}

TEST(Mgda, SimplexAndMonotoneTrace) {
  std::mt19937 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 30; ++t) {
    std::vector<torch::Tensor> g;
    for (int i = 0; i < 3; ++i) {
      std::vector<double> v(10);
      for (auto& x : v) x = n(rng);
      g.push_back(torch::tensor(v, torch::kDouble));
    }
    auto r = mgda_minnorm(g);
    double s = 0;
    for (double c : r.coeffs) {
      EXPECT_GE(c, 0.0);
      s += c;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (size_t i = 1; i < r.trace.size(); ++i) EXPECT_LE(r.trace[i], r.trace[i - 1] + 1e-15);
    auto comb = r.coeffs[0] * g[0] + r.coeffs[1] * g[1] + r.coeffs[2] * g[2];
    EXPECT_NEAR(comb.square().sum().item<double>(), r.objective, 1e-10);
  }
}

TEST(Mgda, MatchesGridOnRandomInstances) {
  std::mt19937 rng(5);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 10; ++t) {
    std::vector<std::vector<double>> gv(3, std::vector<double>(10));
    std::vector<torch::Tensor> g;
    for (auto& v : gv) {
      for (auto& x : v) x = n(rng);
      g.push_back(torch::tensor(v, torch::kDouble));
    }
    EXPECT_NEAR(mgda_minnorm(g).objective, oracle::simplex_grid_min(gv, 200), 2e-2);
  }
}

TEST(Mgda, RejectsAllZero) {
  auto z = torch::zeros({4}, torch::kDouble);
  EXPECT_THROW(mgda_minnorm({z, z, z}), std::invalid_argument);
}
