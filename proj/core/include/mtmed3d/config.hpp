#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "mtmed3d/classification.hpp"
#include "mtmed3d/dataio.hpp"
#include "mtmed3d/detection.hpp"
#include "mtmed3d/encoder.hpp"
#include "mtmed3d/losses.hpp"
#include "mtmed3d/segmentation.hpp"

namespace mtmed3d::pipeline {

enum class Variant { Multi, SegOnly, DetOnly, ClsOnly };
std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

enum class Balance { GradNorm, Mgda, Fixed };
std::string_view to_string(Balance b);
Balance balance_from_string(std::string_view s);

struct ModelConfig {
  Variant variant = Variant::Multi;
  encoder::EncoderConfig encoder;
  decoders::SegHeadConfig segmentation;
  decoders::DetectionHeadConfig detection;
  decoders::ClsHeadConfig classification;
};

struct OptimConfig {
  double lr_encoder = 1e-4;
  double lr_seg = 1e-4;
  double lr_det = 1e-5;
  double lr_cls = 1e-5;
  double min_lr = 0.0;
  double weight_decay = 1e-5;
  int64_t epochs = 300;
  int64_t max_steps = 0;  // 0: epochs * steps_per_epoch
  int64_t batch_size = 1;
  double grad_clip = 0.0;  // 0: off
};

struct BalanceConfig {
  Balance method = Balance::GradNorm;
  double alpha = 1.5;
  double lr_w = 0.025;
  int64_t l0_steps = 10;
  std::string shared_params = "last";  // last | all
  std::array<double, 3> fixed_weights{1.0, 1.0, 1.0};
  int mgda_max_iter = 250;
  double mgda_tol = 1e-6;
};

struct DataConfig {
  std::string root = "data/phantoms";
  std::string split = "fold";  // fold | all
  Index3 crop{96, 96, 96};
  bool normalize = true;
  bool augment = true;
  dataio::AugmentConfig augment_cfg;
};

struct EvalConfig {
  double hd_percentile = 95.0;
  int64_t validate_every = 1;  // epochs
  bool profile = false;
};

struct RunConfig {
  ModelConfig model;
  losses::LossConfig loss;
  OptimConfig optim;
  BalanceConfig balance;
  DataConfig data;
  EvalConfig eval;
  uint64_t seed = 0;
  int fold = 0;
  std::string device = "cpu";
  std::string output_dir = "runs/default";
  int64_t log_every = 1;

  std::vector<std::string> validate() const;
};

/// Parses YAML text; `overrides` are `dotted.key=value` pairs (value in YAML syntax)
/// applied before decoding. Unknown keys are rejected.
RunConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});
std::string to_yaml(const RunConfig& cfg);
/// Stable 16-hex-digit hash of the canonical YAML form.
std::string config_hash(const RunConfig& cfg);

}  // namespace mtmed3d::pipeline
