#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "mtmed3d/datamodel.hpp"
#include "mtmed3d/layers.hpp"

namespace mtmed3d::metrics {

using MaybeReal = std::optional<double>;

/// 2|P n G| / (|P| + |G|); 1 when both are empty.
double dice_metric(const torch::Tensor& pred, const torch::Tensor& gt);

/// Foreground voxels with a background (or out-of-volume) 6-neighbour, as a bool tensor.
torch::Tensor boundary(const torch::Tensor& mask);

/// Exact squared Euclidean distance from every voxel to the nearest `true` voxel of a
/// 3D bool tensor (separable lower-envelope transform). Infinity when none exist.
torch::Tensor squared_distance_transform(const torch::Tensor& sites);

/// Linear-interpolation percentile (q in [0, 100]) of a non-empty sample.
double percentile(std::vector<double> v, double q);

/// Symmetric boundary Hausdorff distance at the given percentile, in voxels.
/// nullopt when either mask is empty.
MaybeReal hausdorff(const torch::Tensor& pred, const torch::Tensor& gt, double q = 95.0);

struct ApResult {
  double ap = 0.0;
  double ar = 0.0;
};

/// Detections pooled over cases and visited by descending score; each detection
/// matches the highest-IoU unmatched gt of its own case when IoU >= iou_thr.
/// AP is the all-point interpolated area under the PR curve, AR the final recall.
/// No gts and no detections gives (1, 1).
ApResult average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BoxF>>& gts,
                           double iou_thr);

/// IoU thresholds 0.10, 0.15, ..., 0.50.
std::vector<double> sweep_thresholds();

struct MapSweep {
  double map_sweep = 0, map_50 = 0, mar_sweep = 0, mar_50 = 0;
};
MapSweep map_sweep(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BoxF>>& gts);

struct ClassificationMetrics {
  MaybeReal acc, sen, spe;
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
};
/// HGG is the positive class; undefined ratios are nullopt.
ClassificationMetrics classification_metrics(const std::vector<Grade>& pred, const std::vector<Grade>& gt);

struct Efficiency {
  int64_t params = 0;
  int64_t macs = 0;
  int64_t flops = 0;
  double latency_s = 0.0;
  double size_mb = 0.0;  // MiB of the serialized weight archive
};

/// Exact parameter count, recorded MACs of one forward call, FLOPs = 2 MACs, median
/// latency over `repeats` calls after 5 warm-ups, serialized archive size.
Efficiency profile(torch::nn::Module& model, const std::function<void()>& forward_once, int repeats = 50,
                   std::vector<profiling::MacRecord>* records = nullptr);

/// Bytes of the module's weight archive.
int64_t serialized_size(torch::nn::Module& model);

/// CSV "module,kind,macs" with module paths relative to `root`.
std::string mac_table_csv(const torch::nn::Module& root, const std::vector<profiling::MacRecord>& records);

struct MetricsReport {
  std::array<MaybeReal, kNumRegions> dice{};
  std::array<MaybeReal, kNumRegions> hd{};
  double hd_percentile = 95.0;
  MaybeReal acc, sen, spe;
  MaybeReal map_sweep, map_50, mar_sweep, mar_50;
  std::optional<Efficiency> efficiency;
  int64_t num_cases = 0;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Every schema violation found in a report document; empty means valid.
std::vector<std::string> validate_report(const nlohmann::json& j);

}  // namespace mtmed3d::metrics
