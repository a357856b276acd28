#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "mtmed3d/datamodel.hpp"
#include "mtmed3d/encoder.hpp"
#include "mtmed3d/layers.hpp"

namespace mtmed3d::decoders {

enum class Neck { FPN, PANet };
std::string_view to_string(Neck n);
Neck neck_from_string(std::string_view s);

/// Pyramid stages feeding the neck (three encoder stages plus the bottleneck).
inline constexpr std::array<int, 4> kNeckStages = {2, 3, 4, 5};

struct DetectionHeadConfig {
  Neck neck = Neck::PANet;
  int64_t neck_channels = 128;
  // anchor edge length in units of the level stride; same count on every level
  std::vector<std::vector<double>> anchor_scales{{4.0}, {4.0}, {4.0}, {4.0}};
  int64_t subnet_depth = 4;
  int64_t group_norm_groups = 32;
  double iou_pos = 0.5;
  double iou_neg = 0.4;
  double nms_iou = 0.5;
  double score_threshold = 0.05;
  int64_t pre_nms_top_k = 1000;
  int64_t max_detections = 100;

  std::vector<std::string> validate() const;
  int64_t anchors_per_cell() const { return anchor_scales.empty() ? 0 : static_cast<int64_t>(anchor_scales[0].size()); }
};

struct Anchor {
  Real3 center{};
  Real3 size{};
  BoxF box() const;
};

/// Box parameterisation relative to an anchor: center offsets scaled by the anchor
/// size, then log size ratios.  [dc0, dc1, dc2, ds0, ds1, ds2].
using Deltas = std::array<double, 6>;

double iou_3d(const BoxF& a, const BoxF& b);
double iou_3d(const BoundingBox3D& a, const BoundingBox3D& b);

/// Pairwise IoU of [N, 6] (lo, hi) boxes against one box, as an [N] tensor.
torch::Tensor iou_3d(const torch::Tensor& boxes, const BoxF& b);

/// Anchors per level; level-major, then cell (axis 0, 1, 2), then scale.
std::vector<std::vector<Anchor>> generate_anchors(const std::vector<Index3>& level_extents, const Index3& volume_extent,
                                                  const DetectionHeadConfig& cfg);
/// Flattened [A, 6] tensor of (center, size), same order as generate_anchors.
torch::Tensor anchors_tensor(const std::vector<std::vector<Anchor>>& anchors);
/// [A, 6] (center, size) -> [A, 6] (lo, hi).
torch::Tensor anchor_boxes(const torch::Tensor& anchors);

Deltas encode_box(const BoxF& gt, const Anchor& a);
BoxF decode_box(const Deltas& d, const Anchor& a);
/// Tensor forms: gt box against [A, 6] anchors -> [A, 6] deltas; deltas -> [A, 6] (lo, hi) boxes.
torch::Tensor encode_boxes(const BoxF& gt, const torch::Tensor& anchors);
torch::Tensor decode_boxes(const torch::Tensor& deltas, const torch::Tensor& anchors);

enum class AnchorLabel : int8_t { Ignore = -1, Negative = 0, Positive = 1 };

/// Positive iff IoU >= iou_pos, negative iff IoU < iou_neg, otherwise ignored; the
/// single best-IoU anchor is always positive. Returns int8 [A] with AnchorLabel values.
torch::Tensor match_anchors(const torch::Tensor& anchors, const BoxF& gt, const DetectionHeadConfig& cfg);

/// Top-down FPN over stages 2..5, optionally followed by the PANet bottom-up path.
class DetectionNeckImpl : public torch::nn::Module {
 public:
  DetectionNeckImpl(const encoder::EncoderConfig& enc, const DetectionHeadConfig& cfg);
  /// Four levels of neck_channels at extents S/4 .. S/32.
  std::vector<torch::Tensor> forward(const encoder::FeaturePyramid& pyr);

  torch::nn::ModuleList lateral{nullptr}, fpn_out{nullptr};
  torch::nn::ModuleList pan_down{nullptr}, pan_fuse{nullptr};  // PANet only

 private:
  Neck neck_;
};
TORCH_MODULE(DetectionNeck);

struct DetectionOutputs {
  torch::Tensor logits;  // [B, A]
  torch::Tensor deltas;  // [B, A, 6]
};

/// Objectness and box-regression subnets (conv + GroupNorm + ReLU blocks, then a
/// final conv) shared across levels.
class DetectionSubnetsImpl : public torch::nn::Module {
 public:
  explicit DetectionSubnetsImpl(const DetectionHeadConfig& cfg);
  DetectionOutputs forward(const std::vector<torch::Tensor>& levels);
  /// Output of the first conv + GroupNorm of the objectness subnet, before ReLU.
  torch::Tensor first_block_normed(const torch::Tensor& level);

  torch::nn::ModuleList cls_convs{nullptr}, cls_norms{nullptr}, box_convs{nullptr}, box_norms{nullptr};
  torch::nn::Conv3d cls_out{nullptr}, box_out{nullptr};

 private:
  int64_t anchors_per_cell_;
};
TORCH_MODULE(DetectionSubnets);

class DetectionDecoderImpl : public torch::nn::Module {
 public:
  DetectionDecoderImpl(const encoder::EncoderConfig& enc, DetectionHeadConfig cfg);
  DetectionOutputs forward(const encoder::FeaturePyramid& pyr);
  const DetectionHeadConfig& config() const { return cfg_; }

  DetectionNeck neck{nullptr};
  DetectionSubnets subnets{nullptr};

 private:
  DetectionHeadConfig cfg_;
};
TORCH_MODULE(DetectionDecoder);

/// Level extents for an S^3 input: S/4, S/8, S/16, S/32.
std::vector<Index3> neck_level_extents(const Index3& input_extent);

/// Greedy NMS: visits boxes by descending score and drops any whose IoU with an
/// already kept box exceeds iou_thr. Returns kept indices in score order.
std::vector<int64_t> nms_3d(const std::vector<BoxF>& boxes, const std::vector<double>& scores, double iou_thr);

/// Sigmoid scores, threshold, decode, clip to the volume, NMS; descending score order.
std::vector<Detection> postprocess_detections(const torch::Tensor& logits, const torch::Tensor& deltas,
                                              const torch::Tensor& anchors, const Index3& volume_extent,
                                              const DetectionHeadConfig& cfg);

}  // namespace mtmed3d::decoders
