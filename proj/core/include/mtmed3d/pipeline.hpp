#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mtmed3d/config.hpp"
#include "mtmed3d/metrics.hpp"
#include "mtmed3d/model.hpp"
#include "mtmed3d/mtl_optim.hpp"

namespace mtmed3d::pipeline {

namespace fs = std::filesystem;

struct Fold {
  std::vector<size_t> train, val;
};

/// Stratified by grade: each grade's indices are shuffled with `seed` and dealt
/// round-robin to the five validation folds. Needs >= 5 cases of every grade present.
std::vector<Fold> five_fold_split(const std::vector<Grade>& grades, uint64_t seed);

/// base at step 0, min_lr at step total, half-cosine in between.
double cosine_lr(double base, double min_lr, int64_t step, int64_t total);

/// Writes n phantoms plus the manifest under root; returns the manifest entries.
/// `balanced` alternates forced ET presence / absence across cases.
std::vector<dataio::ManifestEntry> synth_dataset(const fs::path& root, int64_t n, const dataio::PhantomSpec& spec,
                                                 uint64_t seed, bool balanced = false);

/// Center crop to cfg.crop, normalize after cropping, then augment when rng is given.
VolumeSample prepare_sample(const VolumeSample& raw, const DataConfig& cfg, dataio::Rng* augment_rng = nullptr);

/// Anchors [A, 6] (center, size) in double for an input extent.
torch::Tensor anchors_for(const Index3& extent, const decoders::DetectionHeadConfig& cfg);

struct StepRecord {
  int64_t step = 0;
  double L_seg = 0, L_cls = 0, L_det = 0;
  double L_total = 0;  // not part of the CSV log
  mtl::Triple w{1, 1, 1};
  double L_grad = 0;
  double lr = 0;
};
inline constexpr const char* kTrainLogHeader = "step,L_seg,L_cls,L_det,w1,w2,w3,L_grad,lr";

struct CheckpointInfo {
  RunConfig config;
  mtl::TaskWeights weights;
  int64_t epoch = 0;
  int64_t step = 0;
  std::string config_hash;
  std::string rng_state;
};

/// Single torch archive: "model" weights, optional "optimizer" state and "meta/*"
/// entries (config YAML, task weights, counters, rng). Writes `<path>.manifest.txt`.
void save_checkpoint(const fs::path& path, MultiTaskModel& model, const CheckpointInfo& info,
                     torch::optim::Optimizer* optimizer = nullptr);
/// Rebuilds the model from the stored config and loads its weights.
MultiTaskModel load_checkpoint(const fs::path& path, CheckpointInfo* info = nullptr,
                               torch::optim::Optimizer* optimizer = nullptr);

struct TrainResult {
  fs::path best_checkpoint;
  fs::path last_checkpoint;
  fs::path log_csv;
  std::vector<StepRecord> log;
  double best_score = -1;
  int64_t steps = 0;
  mtl::TaskWeights weights;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
};

/// Loads the dataset at cfg.data.root, picks the fold (or all cases) and trains.
TrainResult train(const RunConfig& cfg, const TrainHooks& hooks = {});
/// Same on an in-memory case list.
TrainResult train_on(const RunConfig& cfg, const std::vector<VolumeSample>& train_cases,
                     const std::vector<VolumeSample>& val_cases, const TrainHooks& hooks = {});

struct CaseOutput {
  std::string case_id;
  Grade gt_grade = Grade::LGG;
  std::optional<GradePrediction> grade;
  std::vector<Detection> detections;  // crop coordinates, descending score
  std::optional<BoxF> gt_box;         // crop coordinates
  torch::Tensor seg_mask;             // uint8 [3, S, S, S] on the crop
  Index3 crop_offset{};
};

/// Single-crop inference over prepared cases and the resulting report.
metrics::MetricsReport evaluate_model(MultiTaskModel& model, const RunConfig& cfg,
                                      const std::vector<VolumeSample>& cases,
                                      std::vector<CaseOutput>* outputs = nullptr);

/// "train", "val" or "all" cases of the checkpoint's fold; writes the report when
/// report_path is non-empty.
metrics::MetricsReport evaluate(const fs::path& checkpoint, const std::string& split, const fs::path& report_path = {},
                                const std::optional<std::string>& data_root = std::nullopt);

struct InferResult {
  std::string case_id;
  std::optional<GradePrediction> grade;
  std::vector<Detection> detections;  // input-volume coordinates
  fs::path seg_path, detections_path;
};

/// Writes `<id>_pred_seg.nii.gz` (BraTS labels at the input extent) and `<id>_detections.json`.
InferResult infer(const fs::path& checkpoint, const fs::path& data_root, const std::string& case_id,
                  const fs::path& out_dir);

nlohmann::json detections_json(const std::string& case_id, const std::optional<GradePrediction>& grade,
                               const std::vector<Detection>& dets);

struct ProfileResult {
  metrics::Efficiency efficiency;
  std::string mac_csv;
};
ProfileResult profile_model(const ModelConfig& cfg, const Index3& extent, int repeats = 50);

struct AblationRun {
  std::string name;
  decoders::Neck neck = decoders::Neck::PANet;
  Balance balance = Balance::GradNorm;
  fs::path dir;
  metrics::MetricsReport report;
};

/// Trains and evaluates {FPN, PANet} x {GradNorm, MGDA} from the base config, one
/// sub-directory each, plus `<output_dir>/ablation.json`.
std::vector<AblationRun> ablate(const RunConfig& base);

}  // namespace mtmed3d::pipeline
