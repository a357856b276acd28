// Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <thread>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "common/fixtures.hpp"
#include "common/oracles.hpp"
#include "json.hpp"
#include "mtmed3d/detection.hpp"
#include "mtmed3d/encoder.hpp"
#include "mtmed3d/losses.hpp"
#include "mtmed3d/metrics.hpp"
#include "mtmed3d/mtl_optim.hpp"
#include "mtmed3d/pipeline.hpp"

using namespace mtmed3d;
namespace fs = std::filesystem;

namespace tol {
// Every threshold used below, in one place.
constexpr double kEncoderParamsTarget = 8.063e6;
constexpr double kEncoderParamsBand = 0.15;
constexpr double kReductionLo = 0.40, kReductionHi = 0.55;
constexpr double kGradNormArith = 1e-6;
constexpr double kMgdaGap = 1e-3;
constexpr int kMgdaGrid = 1000;
constexpr double kHausdorff = 1e-9;
constexpr double kBoxRoundtrip = 1e-5;
constexpr double kGradRel = 1e-3;
constexpr double kGradAbsFloor = 1e-8;
constexpr double kFdStep = 1e-6;
constexpr double kOverfitDiceWT = 0.7;
constexpr double kOverfitIou = 0.5;
constexpr int kOverfitIouCases = 6;
constexpr double kOverfitAcc = 1.0;
constexpr int64_t kOverfitMaxSteps = 2000;
// runtime budgets in seconds
constexpr double kBudget1 = 60, kBudget2 = 120, kBudget3 = 60, kBudget4 = 120, kBudget5 = 180, kBudget6 = 180,
                 kBudget7 = 180, kBudget8 = 7200;
}  // namespace tol

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& line) { std::printf("    %s\n", line.c_str()); }

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// Prints one line per criterion when its test finishes.
class CriterionPrinter : public ::testing::EmptyTestEventListener {
 public:
  void OnTestEnd(const ::testing::TestInfo& info) override {
    const std::string name = info.name();
    if (name.rfind("Criterion", 0) != 0) return;
    const auto us = name.find('_');
    const std::string num = name.substr(9, us - 9);
    const std::string what = us == std::string::npos ? "" : name.substr(us + 1);
    const auto* r = info.result();
    std::printf("ACCEPTANCE criterion %s %s: %s (%.1f s)\n", num.c_str(), r->Passed() ? "PASS" : "FAIL", what.c_str(),
                static_cast<double>(r->elapsed_time()) / 1000.0);
    std::fflush(stdout);
  }
};

encoder::EncoderConfig default_encoder() { return pipeline::parse_config("{}").model.encoder; }

}  // namespace

TEST(Acceptance, Criterion1_EncoderParameterCount) {
  const auto t0 = std::chrono::steady_clock::now();
  encoder::SwinEncoder enc(default_encoder());
  const int64_t n = count_parameters(*enc);
  note("encoder parameters: " + std::to_string(n) + " (target 8.063e6 +/- 15%)");
  EXPECT_GE(n, tol::kEncoderParamsTarget * (1 - tol::kEncoderParamsBand));
  EXPECT_LE(n, tol::kEncoderParamsTarget * (1 + tol::kEncoderParamsBand));
  EXPECT_LT(seconds_since(t0), tol::kBudget1);
}

TEST(Acceptance, Criterion2_SharingReducesParameters) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = pipeline::parse_config("{}").model;
  int64_t multi = 0, singles = 0;
  {
    auto m = pipeline::build_model(cfg);
    multi = count_parameters(*m);
  }
  for (auto t : {pipeline::Task::Seg, pipeline::Task::Det, pipeline::Task::Cls}) {
    auto s = pipeline::build_single_task(cfg, t);
    const int64_t n = count_parameters(*s);
    note("single-task parameters: " + std::to_string(n));
    singles += n;
  }
  const double reduction = 1.0 - static_cast<double>(multi) / static_cast<double>(singles);
  note("multi-task " + std::to_string(multi) + " vs single-task sum " + std::to_string(singles) + ", reduction " +
       fmt(100 * reduction, 4) + "%");
  EXPECT_LT(multi, singles);
  EXPECT_GE(reduction, tol::kReductionLo);
  EXPECT_LE(reduction, tol::kReductionHi);
  EXPECT_LT(seconds_since(t0), tol::kBudget2);
}

TEST(Acceptance, Criterion3_GradNormSuite) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> u(0.05, 4.0);
  // mean(r) == 1
  for (int t = 0; t < 1000; ++t) {
    auto [rt, r] = mtl::training_rates({u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)});
    ASSERT_NEAR((r[0] + r[1] + r[2]) / 3.0, 1.0, tol::kGradNormArith);
  }
  // L_grad == 0 at target
  for (int t = 0; t < 1000; ++t) {
    const mtl::Triple r{u(rng), u(rng), u(rng)};
    const double Gbar = u(rng), alpha = u(rng);
    mtl::Triple G{};
    for (int i = 0; i < 3; ++i) G[i] = Gbar * std::pow(r[i], alpha);
    ASSERT_NEAR(mtl::gradnorm_loss(G, Gbar, r, alpha), 0.0, tol::kGradNormArith);
  }
  // sum(w) == 3 after every step, weights stay positive
  mtl::TaskWeights w;
  for (int t = 0; t < 1000; ++t) {
    mtl::gradnorm_step(w, mtl::Triple{u(rng), u(rng), u(rng)}, mtl::Triple{u(rng), u(rng), u(rng)}, 0.2);
    ASSERT_NEAR(w.sum(), 3.0, tol::kGradNormArith);
    for (double x : w.w) ASSERT_GT(x, 0.0);
  }
  // lagging task gains weight: two steps, task 1 stalls while tasks 2 and 3 halve
  mtl::TaskWeights toy;
  toy.l0_steps = 1;
  mtl::gradnorm_step(toy, mtl::Triple{1, 1, 1}, mtl::Triple{1, 1, 1}, 0.05);
  const auto before = toy.w;
  const auto step = mtl::gradnorm_step(toy, mtl::Triple{1.0, 0.5, 0.5}, mtl::Triple{1, 1, 1}, 0.05);
  EXPECT_TRUE(step.updated);
  EXPECT_GT(step.snapshot.r[0], 1.0);
  EXPECT_GT(toy.w[0], before[0]);
  EXPECT_LT(toy.w[1], before[1]);
  EXPECT_LT(toy.w[2], before[2]);
  note("lagging-task weight " + fmt(before[0]) + " -> " + fmt(toy.w[0]));
  EXPECT_LT(seconds_since(t0), tol::kBudget3);
}

TEST(Acceptance, Criterion4_MgdaMatchesSimplexGrid) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937 rng(41);
  std::normal_distribution<double> n(0, 1);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<std::vector<double>> g(3, std::vector<double>(10));
    std::vector<torch::Tensor> gt;
    for (auto& v : g) {
      for (auto& x : v) x = n(rng);
      gt.push_back(torch::tensor(v, torch::kDouble));
    }
    const double got = mtl::mgda_minnorm(gt).objective;
    const double grid = oracle::simplex_grid_min(g, tol::kMgdaGrid);
    worst = std::max(worst, std::abs(got - grid));
    EXPECT_NEAR(got, grid, tol::kMgdaGap) << "instance " << t;
  }
  note("max |objective - grid| over 50 instances: " + fmt(worst, 3));
  EXPECT_LT(seconds_since(t0), tol::kBudget4);
}

TEST(Acceptance, Criterion5_MetricOracles) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937 rng(51);
  std::uniform_real_distribution<double> u(0, 1), pos(0, 24), len(2, 12), jitter(-4, 4);
  auto rand_box = [&] {
    BoxF b;
    for (int k = 0; k < 3; ++k) {
      b.lo[k] = pos(rng);
      b.hi[k] = b.lo[k] + len(rng);
    }
    return b;
  };
  // AP / AR: exact agreement with the reference evaluator
  int ap_checks = 0;
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<Detection>> dets(8);
    std::vector<std::vector<BoxF>> gts(8);
    for (int c = 0; c < 8; ++c) {
      for (int g = 0, ng = static_cast<int>(u(rng) * 3); g < ng; ++g) {
        gts[c].push_back(rand_box());
        auto d = gts[c].back();
        for (int k = 0; k < 3; ++k) {
          const double s = jitter(rng) * 0.5;
          d.lo[k] += s;
          d.hi[k] += s;
        }
        if (u(rng) < 0.85) dets[c].push_back({d, u(rng)});
      }
      for (int f = 0, nf = static_cast<int>(u(rng) * 4); f < nf; ++f) dets[c].push_back({rand_box(), u(rng)});
    }
    for (double thr : metrics::sweep_thresholds()) {
      const auto got = metrics::average_precision(dets, gts, thr);
      const auto want = oracle::reference_ap(dets, gts, thr);
      EXPECT_EQ(got.ap, want.ap) << "set " << t << " thr " << thr;
      EXPECT_EQ(got.ar, want.ar) << "set " << t << " thr " << thr;
      ++ap_checks;
    }
  }
  // HD: all-pairs brute force
  std::uniform_real_distribution<double> dens(0.03, 0.5);
  std::uniform_int_distribution<int64_t> side(3, 9);
  int hd_cases = 0;
  double hd_worst = 0;
  while (hd_cases < 50) {
    const Index3 ext{side(rng), side(rng), side(rng)};
    auto a = (torch::rand({ext[0], ext[1], ext[2]}, torch::kDouble) < dens(rng)).to(torch::kUInt8);
    auto b = (torch::rand({ext[0], ext[1], ext[2]}, torch::kDouble) < dens(rng)).to(torch::kUInt8);
    if (!a.any().item<bool>() || !b.any().item<bool>()) continue;
    const double q = hd_cases % 2 ? 95.0 : 100.0;
    const double got = *metrics::hausdorff(a, b, q), want = oracle::brute_hausdorff(a, b, q);
    hd_worst = std::max(hd_worst, std::abs(got - want));
    EXPECT_NEAR(got, want, tol::kHausdorff);
    ++hd_cases;
  }
  // Dice and IoU: voxel counting
  for (int t = 0; t < 50; ++t) {
    auto a = (torch::rand({7, 6, 5}) < u(rng)).to(torch::kUInt8), b = (torch::rand({7, 6, 5}) < u(rng)).to(torch::kUInt8);
    const int64_t inter = (a & b).sum().item<int64_t>(), na = a.sum().item<int64_t>(), nb = b.sum().item<int64_t>();
    const double want = na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
    EXPECT_EQ(metrics::dice_metric(a, b), want);
    std::uniform_int_distribution<int64_t> lo(0, 6), ln(1, 5);
    BoundingBox3D x, y;
    for (int k = 0; k < 3; ++k) {
      x.lo[k] = lo(rng);
      x.hi[k] = x.lo[k] + ln(rng);
      y.lo[k] = lo(rng);
      y.hi[k] = y.lo[k] + ln(rng);
    }
    EXPECT_EQ(decoders::iou_3d(x, y), oracle::voxel_iou(x, y));
  }
  note("AP/AR comparisons: " + std::to_string(ap_checks) + ", HD cases: " + std::to_string(hd_cases) +
       " (max deviation " + fmt(hd_worst, 3) + ")");
  EXPECT_LT(seconds_since(t0), tol::kBudget5);
}

TEST(Acceptance, Criterion6_GeometryAndShapes) {
  const auto t0 = std::chrono::steady_clock::now();
  torch::NoGradGuard ng;
  // window partition / reverse, with and without padding
  for (Index3 ext : {Index3{14, 14, 14}, Index3{12, 12, 12}, Index3{9, 16, 5}, Index3{7, 7, 7}})
    for (int64_t w : {2, 4, 7}) {
      auto l = encoder::AttentionWindowLayout::make(ext, w, false);
      auto x = torch::randn({2, ext[0], ext[1], ext[2], 3});
      EXPECT_TRUE(torch::equal(encoder::window_reverse(encoder::window_partition(x, l), l, 2), x));
    }
  // pyramid schedule at the default widths
  const auto cfg = default_encoder();
  encoder::SwinEncoder enc(cfg);
  enc->eval();
  for (int64_t S : {64, 96}) {
    auto pyr = enc(torch::randn({1, 4, S, S, S}));
    std::string shapes;
    for (int i = 0; i < encoder::kNumStages; ++i) {
      EXPECT_EQ(pyr.stages[i].sizes(),
                torch::IntArrayRef({1, cfg.stage_channels(i), S >> i, S >> i, S >> i}));
      shapes += " " + std::to_string(pyr.stages[i].size(1)) + "@" + std::to_string(pyr.stages[i].size(2));
    }
    note("S=" + std::to_string(S) + ":" + shapes);
  }
  // box encode / decode
  std::mt19937 rng(61);
  std::uniform_real_distribution<double> c(0, 96), s(2, 48), lo(0, 80), ln(1, 40);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    decoders::Anchor a{{c(rng), c(rng), c(rng)}, {s(rng), s(rng), s(rng)}};
    BoxF gt;
    for (int k = 0; k < 3; ++k) {
      gt.lo[k] = lo(rng);
      gt.hi[k] = gt.lo[k] + ln(rng);
    }
    auto back = decoders::decode_box(decoders::encode_box(gt, a), a);
    for (int k = 0; k < 3; ++k) {
      worst = std::max({worst, std::abs(back.lo[k] - gt.lo[k]), std::abs(back.hi[k] - gt.hi[k])});
      EXPECT_NEAR(back.lo[k], gt.lo[k], tol::kBoxRoundtrip);
      EXPECT_NEAR(back.hi[k], gt.hi[k], tol::kBoxRoundtrip);
    }
  }
  note("box roundtrip max error over 1000 pairs: " + fmt(worst, 3));
  // NMS against brute force
  std::uniform_real_distribution<double> u(0, 1), p(0, 20), l(1, 8);
  for (int t = 0; t < 100; ++t) {
    std::vector<BoxF> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 40; ++i) {
      BoxF b;
      for (int k = 0; k < 3; ++k) {
        b.lo[k] = p(rng);
        b.hi[k] = b.lo[k] + l(rng);
      }
      boxes.push_back(b);
      scores.push_back(u(rng));
    }
    const double thr = 0.1 + 0.8 * u(rng);
    EXPECT_EQ(decoders::nms_3d(boxes, scores, thr), oracle::brute_nms(boxes, scores, thr));
  }
  EXPECT_LT(seconds_since(t0), tol::kBudget6);
}

namespace {

// |analytic - numeric| <= rel * |numeric| + floor, element-wise.
void expect_grad_close(const torch::Tensor& analytic, const torch::Tensor& numeric, const std::string& what) {
  auto bound = numeric.abs() * tol::kGradRel + tol::kGradAbsFloor;
  auto excess = ((analytic - numeric).abs() - bound).max().item<double>();
  const double rel = ((analytic - numeric).norm() / numeric.norm().clamp_min(1e-300)).item<double>();
  note(what + ": relative L2 error " + fmt(rel, 3));
  EXPECT_LE(excess, 0.0) << what;
}

template <typename F>
void check_gradient(F f, const torch::Tensor& x0, const std::string& what) {
  auto x = x0.clone().requires_grad_(true);
  auto y = f(x);
  auto analytic = torch::autograd::grad({y}, {x})[0];
  torch::NoGradGuard ng;
  auto numeric = oracle::numeric_grad([&](const torch::Tensor& v) { return f(v); }, x0, tol::kFdStep);
  expect_grad_close(analytic, numeric, what);
}

}  // namespace

TEST(Acceptance, Criterion7_GradientChecks) {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(71);
  const auto opts = torch::TensorOptions().dtype(torch::kDouble);

  auto target = (torch::rand({1, 3, 4, 4, 4}) > 0.5).to(torch::kDouble);
  check_gradient([&](const torch::Tensor& p) { return losses::dice_loss(p, target, 1e-5); },
                 torch::rand({1, 3, 4, 4, 4}, opts) * 0.9 + 0.05, "dice");

  auto grades = torch::tensor({0, 1, 1, 0, 1, 0}, torch::kLong);
  check_gradient([&](const torch::Tensor& z) { return losses::focal_loss(z, grades, 2.0, 0.25); },
                 torch::randn({6, 2}, opts) * 2, "focal");

  auto ref = torch::randn({5, 6}, opts);
  check_gradient([&](const torch::Tensor& d) { return losses::smooth_l1(d, ref, 1.0); },
                 ref + torch::randn({5, 6}, opts) * 1.5, "smooth-l1");

  // tiny encoder: patch embedding, one shifted window block, patch merging
  encoder::PatchEmbed embed(4, 4, 2);
  encoder::SwinBlock block(4, 1, 2, 2.0, true, 0.0);
  encoder::PatchMerging merge(4);
  for (auto* m : std::initializer_list<torch::nn::Module*>{embed.get(), block.get(), merge.get()})
    m->to(torch::kDouble);
  auto readout = torch::randn({1, 2, 2, 2, 8}, opts);
  auto encode = [&](const torch::Tensor& image) {
    auto h = to_channels_last(embed(image));
    h = block(h);
    return (merge(h) * readout).sum();
  };
  ASSERT_TRUE(block->shifted());
  check_gradient(encode, torch::randn({1, 4, 8, 8, 8}, opts), "tiny encoder");
  EXPECT_LT(seconds_since(t0), tol::kBudget7);
}

TEST(Acceptance, Criterion8_OverfitSmoke) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = fixtures::scratch_dir("overfit_data");
  const auto out = fixtures::scratch_dir("overfit_run");
  dataio::PhantomSpec spec;
  spec.extent = {32, 32, 32};
  spec.wt_radius_range = {3.0, 6.0};
  pipeline::synth_dataset(root, 8, spec, 0, true);

  auto cfg = pipeline::load_config(fs::path(MTMED3D_SOURCE_DIR) / "configs" / "smoke.yaml");
  cfg.data.root = root.string();
  cfg.output_dir = out.string();
  ASSERT_EQ(cfg.model.variant, pipeline::Variant::Multi);
  ASSERT_EQ(cfg.balance.method, pipeline::Balance::GradNorm);
  ASSERT_EQ(cfg.data.crop, (Index3{32, 32, 32}));
  ASSERT_LE(cfg.optim.max_steps, tol::kOverfitMaxSteps);
  ASSERT_GT(cfg.optim.max_steps, 0);

  const auto result = pipeline::train(cfg);
  note("steps " + std::to_string(result.steps) + ", best validation score " + fmt(result.best_score, 4));

  auto model = pipeline::load_checkpoint(result.best_checkpoint);
  std::vector<VolumeSample> cases;
  for (const auto& e : dataio::list_cases(root))
    cases.push_back(pipeline::prepare_sample(dataio::load_case(root, e.case_id), cfg.data));
  std::vector<pipeline::CaseOutput> outputs;
  const auto report = pipeline::evaluate_model(model, cfg, cases, &outputs);

  int good_boxes = 0;
  for (const auto& o : outputs) {
    const double iou = o.detections.empty() || !o.gt_box ? 0.0 : decoders::iou_3d(o.detections.front().box, *o.gt_box);
    note(o.case_id + " top-detection IoU " + fmt(iou, 3) + ", grade " + std::string(to_string(o.gt_grade)) +
         " predicted " + (o.grade ? std::string(to_string(o.grade->label())) : "-"));
    good_boxes += iou > tol::kOverfitIou;
  }
  const double dice_wt = report.dice[0].value_or(0.0);
  const double acc = report.acc.value_or(0.0);
  note("training-set Dice(WT) " + fmt(dice_wt, 4) + ", accuracy " + fmt(acc, 4) + ", boxes with IoU > 0.5: " +
       std::to_string(good_boxes) + "/8");
  EXPECT_LE(result.steps, tol::kOverfitMaxSteps);
  EXPECT_GT(dice_wt, tol::kOverfitDiceWT);
  EXPECT_GE(good_boxes, tol::kOverfitIouCases);
  EXPECT_EQ(acc, tol::kOverfitAcc);
  EXPECT_LT(seconds_since(t0), tol::kBudget8);
  fs::remove_all(root);
  fs::remove_all(out);
}

TEST(Acceptance, Criterion9_AblationGrid) {
  const auto root = fixtures::scratch_dir("ablation_data");
  const auto out = fixtures::scratch_dir("ablation_run");
  dataio::PhantomSpec spec;
  spec.extent = {32, 32, 32};
  spec.wt_radius_range = {3.0, 6.0};
  pipeline::synth_dataset(root, 8, spec, 0, true);
  auto cfg = fixtures::tiny_config(root, out);
  cfg.optim.max_steps = 2;

  const auto runs = pipeline::ablate(cfg);
  const std::set<std::string> expected{"fpn_gradnorm", "fpn_mgda", "panet_gradnorm", "panet_mgda"};
  std::set<std::string> names;
  for (const auto& r : runs) {
    names.insert(r.name);
    std::ifstream in(r.dir / "report.json");
    ASSERT_TRUE(in.good()) << r.name;
    const auto j = nlohmann::json::parse(in);
    const auto errs = metrics::validate_report(j);
    EXPECT_TRUE(errs.empty()) << r.name << ": " << (errs.empty() ? "" : errs.front());
    EXPECT_EQ(j.at("num_cases").get<int64_t>(), 8) << r.name;
    for (const char* k : {"acc", "sen", "spe"}) EXPECT_TRUE(j["classification"].contains(k));
    EXPECT_FALSE(j["detection"]["map_sweep"].is_null()) << r.name;
    EXPECT_FALSE(j["segmentation"]["dice"]["WT"].is_null()) << r.name;
    note(r.name + ": report valid, mAP@0.1:0.5 " + j["detection"]["map_sweep"].dump());
  }
  EXPECT_EQ(names, expected);
  std::ifstream summary(out / "ablation.json");
  ASSERT_TRUE(summary.good());
  EXPECT_EQ(nlohmann::json::parse(summary).size(), 4u);
  fs::remove_all(root);
  fs::remove_all(out);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new CriterionPrinter);
  torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
  return RUN_ALL_TESTS();
}
