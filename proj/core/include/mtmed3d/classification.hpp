#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "mtmed3d/datamodel.hpp"
#include "mtmed3d/layers.hpp"

namespace mtmed3d::decoders {

enum class ClsInput { SegOnly, SegPlusImage };
std::string_view to_string(ClsInput m);
ClsInput cls_input_from_string(std::string_view s);

enum class NormKind { Batch, Group };
std::string_view to_string(NormKind n);
NormKind norm_kind_from_string(std::string_view s);

inline const std::vector<int64_t> kDenseNet121Blocks{6, 12, 24, 16};

struct ClsHeadConfig {
  int64_t growth_rate = 32;
  std::vector<int64_t> block_config = kDenseNet121Blocks;
  int64_t init_features = 64;
  int64_t bn_size = 4;
  ClsInput input = ClsInput::SegPlusImage;
  int64_t num_classes = 2;
  NormKind norm = NormKind::Batch;
  int64_t norm_groups = 8;  // group norm only; reduced to gcd with the channel count
  bool detach_seg = false;

  std::vector<std::string> validate() const;
  int64_t in_channels() const { return input == ClsInput::SegPlusImage ? kNumRegions + kNumModalities : kNumRegions; }
};

/// norm-relu-conv1 (bn_size * growth) then norm-relu-conv3 (growth); the output is
/// concatenated onto the running feature stack.
class DenseLayerImpl : public torch::nn::Module {
 public:
  DenseLayerImpl(int64_t in_channels, const ClsHeadConfig& cfg);
  /// Returns the growth_rate new channels only.
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::AnyModule norm1, norm2;
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DenseLayer);

class DenseBlockImpl : public torch::nn::Module {
 public:
  DenseBlockImpl(int64_t num_layers, int64_t in_channels, const ClsHeadConfig& cfg);
  /// Appends each layer's growth_rate channels; records every layer's input width.
  torch::Tensor forward(const torch::Tensor& x, std::vector<int64_t>* trace = nullptr);
  int64_t out_channels() const { return out_channels_; }

  torch::nn::ModuleList layers{nullptr};

 private:
  int64_t out_channels_;
};
TORCH_MODULE(DenseBlock);

/// norm-relu-conv1 halving channels, then 2x average pooling.
class TransitionImpl : public torch::nn::Module {
 public:
  TransitionImpl(int64_t in_channels, int64_t out_channels, const ClsHeadConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::AnyModule norm;
  torch::nn::Conv3d conv{nullptr};
};
TORCH_MODULE(Transition);

/// 3D DenseNet over segmentation probabilities (optionally with the image).
class DenseNet3DImpl : public torch::nn::Module {
 public:
  explicit DenseNet3DImpl(ClsHeadConfig cfg);
  /// x: [B, in_channels, S, S, S] -> logits [B, num_classes].
  torch::Tensor forward(const torch::Tensor& x);
  /// Assembles the input from seg probabilities and the image, then runs forward.
  torch::Tensor forward(const torch::Tensor& seg_probs, const torch::Tensor& image);

  /// Input widths of every dense layer in the most recent forward, block by block.
  const std::vector<int64_t>& layer_input_trace() const { return trace_; }
  const ClsHeadConfig& config() const { return cfg_; }

  torch::nn::Conv3d stem_conv{nullptr};
  torch::nn::AnyModule stem_norm, final_norm;
  torch::nn::ModuleList blocks{nullptr}, transitions{nullptr};
  torch::nn::Linear classifier{nullptr};

 private:
  ClsHeadConfig cfg_;
  std::vector<int64_t> trace_;
};
TORCH_MODULE(DenseNet3D);

/// One prediction per batch item from [B, 2] logits (LGG, HGG).
std::vector<GradePrediction> classify(const torch::Tensor& logits);

}  // namespace mtmed3d::decoders
