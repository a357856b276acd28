#pragma once

#include <torch/torch.h>

#include "mtmed3d/encoder.hpp"
#include "mtmed3d/layers.hpp"

namespace mtmed3d::decoders {

struct SegHeadConfig {
  int64_t out_channels = kNumRegions;
};

/// U-shaped decoder: a residual block on every pyramid stage, then transposed-conv
/// upsampling from the bottleneck with skip concatenation at each resolution,
/// and a 1x1 conv to per-region logits (apply sigmoid for probabilities).
class SegmentationDecoderImpl : public torch::nn::Module {
 public:
  SegmentationDecoderImpl(const encoder::EncoderConfig& enc, SegHeadConfig cfg = {});
  /// Returns logits [B, out_channels, S, S, S].
  torch::Tensor forward(const encoder::FeaturePyramid& pyr);

  torch::nn::ModuleList skip_blocks{nullptr};  // one per pyramid stage
  torch::nn::ModuleList up_blocks{nullptr};    // bottleneck -> stage 0
  torch::nn::Conv3d out{nullptr};

 private:
  std::array<int64_t, encoder::kNumStages> channels_{};
};
TORCH_MODULE(SegmentationDecoder);

}  // namespace mtmed3d::decoders
