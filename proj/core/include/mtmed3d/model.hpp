#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mtmed3d/config.hpp"

namespace mtmed3d::pipeline {

enum class Task { Seg, Det, Cls };

struct ModelOutputs {
  torch::Tensor seg_logits;  // [B, 3, S, S, S]
  decoders::DetectionOutputs det;
  torch::Tensor cls_logits;  // [B, 2]
};

/// Shared encoder plus the heads of one variant. The classifier always sits after
/// the segmentation decoder, so the cls_only variant carries a segmentation decoder too.
class MultiTaskModelImpl : public torch::nn::Module {
 public:
  explicit MultiTaskModelImpl(ModelConfig cfg);
  /// image [B, 4, S, S, S], S divisible by 32.
  ModelOutputs forward(const torch::Tensor& image);

  bool has_seg() const { return !seg_head.is_empty(); }
  bool has_det() const { return !det_head.is_empty(); }
  bool has_cls() const { return !cls_head.is_empty(); }
  /// Tasks whose loss the variant trains.
  std::vector<Task> trained_tasks() const;
  const ModelConfig& config() const { return cfg_; }

  /// Named parameter groups: encoder, seg_head, det_head, cls_head (present ones only).
  std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups() const;
  /// Shared parameters for per-task gradient norms: "last" stage group or "all".
  std::vector<torch::Tensor> shared_parameters(const std::string& which) const;

  encoder::SwinEncoder encoder{nullptr};
  decoders::SegmentationDecoder seg_head{nullptr};
  decoders::DetectionDecoder det_head{nullptr};
  decoders::DenseNet3D cls_head{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(MultiTaskModel);

MultiTaskModel build_model(const ModelConfig& cfg);
/// Independent single-task model with its own encoder.
MultiTaskModel build_single_task(const ModelConfig& cfg, Task task);

/// (name, shape) for every parameter and buffer, in registration order.
std::vector<std::pair<std::string, std::vector<int64_t>>> weight_manifest(const torch::nn::Module& m);
/// One `name dim0xdim1x...` line per entry.
std::string manifest_text(const std::vector<std::pair<std::string, std::vector<int64_t>>>& manifest);

}  // namespace mtmed3d::pipeline
