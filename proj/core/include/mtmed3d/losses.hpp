#pragma once

#include <array>

#include <torch/torch.h>

#include "mtmed3d/datamodel.hpp"
#include "mtmed3d/detection.hpp"

namespace mtmed3d::losses {

struct LossConfig {
  double dice_smooth = 1e-5;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;  // weight of the HGG (positive) class
  double smooth_l1_beta = 1.0;
  // objectness focal term inside the detection loss
  double det_focal_gamma = 2.0;
  double det_focal_alpha = 0.25;
  double det_objectness_weight = 1.0;
};

/// Mean over channels of 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth).
/// Sums run over every non-channel axis (batch included).
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth = 1e-5);

/// Softmax focal loss on [B, 2] logits with integer grades [B] (1 = HGG); mean over batch.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& target, double gamma = 2.0,
                         double alpha = 0.25);

/// Binary focal loss on logits against {0,1} targets, summed.
torch::Tensor sigmoid_focal_loss_sum(const torch::Tensor& logits, const torch::Tensor& target, double gamma,
                                     double alpha);

/// Element-wise 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta; mean. Empty input -> 0 with a warning.
torch::Tensor smooth_l1(const torch::Tensor& pred, const torch::Tensor& target, double beta = 1.0);

/// SmoothL1 on the encoded deltas of positive anchors (averaged over positives) plus
/// the objectness focal term normalised by the positive count. Single item.
struct DetectionLossParts {
  torch::Tensor box;
  torch::Tensor objectness;
  torch::Tensor total;
  int64_t num_positive = 0;
};
DetectionLossParts detection_loss(const torch::Tensor& logits, const torch::Tensor& deltas,
                                  const torch::Tensor& anchors, const BoxF& gt, const decoders::DetectionHeadConfig& det,
                                  const LossConfig& cfg);

enum Task : int { kSeg = 0, kCls = 1, kDet = 2 };
inline constexpr int kNumTasks = 3;

struct LossBundle {
  torch::Tensor L_seg, L_cls, L_det, L_total;

  std::array<torch::Tensor, kNumTasks> parts() const { return {L_seg, L_cls, L_det}; }
  std::array<double, kNumTasks> values() const;
};

/// L_total = w1 L_seg + w2 L_cls + w3 L_det. Undefined parts count as zero.
LossBundle total_loss(const torch::Tensor& L_seg, const torch::Tensor& L_cls, const torch::Tensor& L_det,
                      const torch::Tensor& weights);
LossBundle total_loss(const torch::Tensor& L_seg, const torch::Tensor& L_cls, const torch::Tensor& L_det,
                      const std::array<double, kNumTasks>& weights);

}  // namespace mtmed3d::losses
