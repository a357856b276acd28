#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "common/oracles.hpp"
#include "mtmed3d/losses.hpp"

using namespace mtmed3d;
using namespace mtmed3d::losses;

namespace {

// Direct per-channel formula with explicit loops.
double dice_oracle(const torch::Tensor& p, const torch::Tensor& g, double smooth) {
  const int64_t C = p.size(1);
  double total = 0;
  for (int64_t c = 0; c < C; ++c) {
    auto pc = p.select(1, c).flatten().contiguous();
    auto gc = g.select(1, c).flatten().to(torch::kDouble).contiguous();
    double inter = 0, sp = 0, sg = 0;
    for (int64_t i = 0; i < pc.numel(); ++i) {
      const double a = pc[i].item<double>(), b = gc[i].item<double>();
      inter += a * b;
      sp += a;
      sg += b;
    }
    total += 1.0 - (2 * inter + smooth) / (sp + sg + smooth);
  }
  return total / static_cast<double>(C);
}

torch::Tensor logits_for_pt(double pt, Grade target) {
  const double z = std::log(pt / (1 - pt));
  return target == Grade::HGG ? torch::tensor({0.0, z}, torch::kDouble).view({1, 2})
                              : torch::tensor({z, 0.0}, torch::kDouble).view({1, 2});
}

}  // namespace

TEST(DiceLoss, PerfectOverlapAndTotalMiss) {
  auto g = (torch::rand({1, 3, 8, 8, 8}) > 0.5).to(torch::kFloat);
  EXPECT_LT(dice_loss(g, g).item<double>(), 1e-6);
  EXPECT_NEAR(dice_loss(1 - g, g).item<double>(), 1.0, 1e-6);
}

TEST(DiceLoss, MatchesFormula) {
  torch::manual_seed(1);
  for (int t = 0; t < 5; ++t) {
    auto p = torch::rand({2, 3, 4, 5, 6}, torch::kDouble);
    auto g = (torch::rand({2, 3, 4, 5, 6}) > 0.6).to(torch::kDouble);
    const double v = dice_loss(p, g, 1e-5).item<double>();
    EXPECT_NEAR(v, dice_oracle(p, g, 1e-5), 1e-7);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-12);
  }
}

TEST(DiceLoss, ShapeMismatchThrows) {
  EXPECT_ANY_THROW(dice_loss(torch::rand({1, 3, 4, 4, 4}), torch::rand({1, 3, 4, 4, 5})));
}

TEST(FocalLoss, ReducesToCrossEntropy) {
  torch::manual_seed(2);
  auto logits = torch::randn({16, 2}, torch::kDouble);
  auto target = torch::randint(0, 2, {16}, torch::kLong);
  const double fl = 2.0 * focal_loss(logits, target, 0.0, 0.5).item<double>();
  const double ce = torch::nn::functional::cross_entropy(logits, target).item<double>();
  EXPECT_NEAR(fl, ce, 1e-12);
}

TEST(FocalLoss, ConfidentCorrectIsZero) {
  auto l = torch::tensor({-30.0, 30.0}, torch::kDouble).view({1, 2});
  EXPECT_LT(focal_loss(l, torch::tensor({1}, torch::kLong)).item<double>(), 1e-20);
}

TEST(FocalLoss, ClosedFormRatio) {
  const auto hgg = torch::tensor({1}, torch::kLong);
  const double a = focal_loss(logits_for_pt(0.9, Grade::HGG), hgg, 2.0, 0.25).item<double>();
  const double b = focal_loss(logits_for_pt(0.5, Grade::HGG), hgg, 2.0, 0.25).item<double>();
  EXPECT_NEAR(a / b, (0.01 * std::log(0.9)) / (0.25 * std::log(0.5)), 1e-9);
  EXPECT_NEAR(a, -0.25 * 0.01 * std::log(0.9), 1e-12);
  const auto lgg = torch::tensor({0}, torch::kLong);
  EXPECT_NEAR(focal_loss(logits_for_pt(0.9, Grade::LGG), lgg, 2.0, 0.25).item<double>(),
              -0.75 * 0.01 * std::log(0.9), 1e-12);
}

TEST(FocalLoss, NonNegative) {
  torch::manual_seed(3);
  auto l = torch::randn({64, 2}) * 5;
  EXPECT_GE(focal_loss(l, torch::randint(0, 2, {64}, torch::kLong)).item<double>(), 0.0);
}

TEST(SmoothL1, BranchesAndContinuity) {
  auto z = torch::zeros({3}, torch::kDouble);
  EXPECT_EQ(smooth_l1(z, z).item<double>(), 0.0);
  for (double beta : {0.5, 1.0, 2.0}) {
    auto x = torch::full({1}, beta, torch::kDouble);
    EXPECT_NEAR(smooth_l1(x, torch::zeros({1}, torch::kDouble), beta).item<double>(), 0.5 * beta, 1e-15);
    auto below = torch::full({1}, beta - 1e-9, torch::kDouble);
    EXPECT_NEAR(smooth_l1(below, torch::zeros({1}, torch::kDouble), beta).item<double>(), 0.5 * beta, 1e-8);
  }
}

TEST(SmoothL1, MatchesFormula) {
  std::mt19937 rng(4);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> a(50), b(50);
  for (int i = 0; i < 50; ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
  }
  double want = 0;
  for (int i = 0; i < 50; ++i) {
    const double x = std::abs(a[i] - b[i]);
    want += x < 1.0 ? 0.5 * x * x : x - 0.5;
  }
  want /= 50;
  EXPECT_NEAR(smooth_l1(torch::tensor(a, torch::kDouble), torch::tensor(b, torch::kDouble)).item<double>(), want, 1e-12);
}

TEST(SmoothL1, EmptyIsZero) {
  auto e = torch::zeros({0, 6});
  EXPECT_EQ(smooth_l1(e, e).item<double>(), 0.0);
}

TEST(TotalLoss, WeightedSum) {
  auto s = torch::tensor(0.2, torch::kDouble), c = torch::tensor(0.3, torch::kDouble), d = torch::tensor(0.5, torch::kDouble);
  EXPECT_NEAR(total_loss(s, c, d, {1.0, 1.0, 1.0}).L_total.item<double>(), 1.0, 1e-15);
  EXPECT_NEAR(total_loss(s, c, d, {0.0, 0.0, 2.0}).L_total.item<double>(), 1.0, 1e-15);
  EXPECT_NEAR(total_loss(s, {}, {}, {3.0, 1.0, 1.0}).L_total.item<double>(), 0.6, 1e-15);
}

TEST(TotalLoss, GradientWrtWeightsIsTaskLoss) {
  auto parts = torch::rand({3}, torch::kDouble);
  auto w = torch::rand({3}, torch::kDouble).requires_grad_(true);
  auto b = total_loss(parts[0], parts[1], parts[2], w);
  b.L_total.backward();
  EXPECT_TRUE(torch::allclose(w.grad(), parts, 0, 1e-15));
}

// Independent evaluation: explicit per-anchor loops over the IoU-based labels.
TEST(DetectionLoss, MatchesPerAnchorOracle) {
  torch::manual_seed(5);
  decoders::DetectionHeadConfig det;
  const Index3 ext{32, 32, 32};
  auto anchor_list = decoders::generate_anchors(decoders::neck_level_extents(ext), ext, det);
  auto anchors = decoders::anchors_tensor(anchor_list);
  const int64_t A = anchors.size(0);
  auto logits = torch::randn({1, A}, torch::kDouble);
  auto deltas = torch::randn({1, A, 6}, torch::kDouble) * 0.5;
  BoxF gt{{8.5, 9.0, 10.0}, {20.0, 18.0, 23.5}};
  LossConfig cfg;
  auto parts = detection_loss(logits, deltas, anchors, gt, det, cfg);

  std::vector<double> iou;
  for (const auto& l : anchor_list)
    for (const auto& a : l) iou.push_back(oracle::box_iou(a.box(), gt));
  const auto best = std::max_element(iou.begin(), iou.end()) - iou.begin();
  double box = 0, obj = 0;
  int64_t npos = 0;
  int64_t idx = 0;
  for (const auto& l : anchor_list)
    for (const auto& a : l) {
      const bool pos = iou[idx] >= det.iou_pos || idx == best;
      const bool neg = !pos && iou[idx] < det.iou_neg;
      const double z = logits[0][idx].item<double>();
      const double p = 1.0 / (1.0 + std::exp(-z));
      if (pos) {
        ++npos;
        const auto t = decoders::encode_box(gt, a);
        for (int k = 0; k < 6; ++k) {
          const double x = std::abs(deltas[0][idx][k].item<double>() - t[k]);
          box += x < 1.0 ? 0.5 * x * x : x - 0.5;
        }
        obj += -0.25 * std::pow(1 - p, 2) * std::log(p);
      } else if (neg) {
        obj += -0.75 * std::pow(p, 2) * std::log(1 - p);
      }
      ++idx;
    }
  EXPECT_EQ(parts.num_positive, npos);
  EXPECT_NEAR(parts.box.item<double>(), box / (6.0 * npos), 1e-9);
  EXPECT_NEAR(parts.objectness.item<double>(), obj / npos, 1e-9);
  EXPECT_NEAR(parts.total.item<double>(), box / (6.0 * npos) + obj / npos, 1e-9);
}
