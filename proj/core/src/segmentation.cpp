#include "mtmed3d/segmentation.hpp"

#include <stdexcept>

namespace mtmed3d::decoders {

SegmentationDecoderImpl::SegmentationDecoderImpl(const encoder::EncoderConfig& enc, SegHeadConfig cfg) {
  if (cfg.out_channels <= 0) throw std::invalid_argument("SegHeadConfig: out_channels must be positive");
  for (int i = 0; i < encoder::kNumStages; ++i) channels_[i] = enc.stage_channels(i);

  skip_blocks = register_module("skip_blocks", torch::nn::ModuleList());
  for (int i = 0; i < encoder::kNumStages; ++i) skip_blocks->push_back(ResidualConvBlock(channels_[i], channels_[i]));

  // up_blocks[j] lifts stage (5 - j) onto stage (4 - j)
  up_blocks = register_module("up_blocks", torch::nn::ModuleList());
  for (int s = encoder::kNumStages - 1; s >= 1; --s) up_blocks->push_back(UpBlock(channels_[s], channels_[s - 1]));

  out = register_module("out", torch::nn::Conv3d(torch::nn::Conv3dOptions(channels_[0], cfg.out_channels, 1)));
}

torch::Tensor SegmentationDecoderImpl::forward(const encoder::FeaturePyramid& pyr) {
  for (int i = 0; i < encoder::kNumStages; ++i) {
    if (!pyr.stages[i].defined() || pyr.stages[i].dim() != 5 || pyr.stages[i].size(1) != channels_[i])
      throw std::invalid_argument("segment: pyramid stage " + std::to_string(i) + " has an unexpected shape");
    if (i > 0 && pyr.stages[i].size(2) * 2 != pyr.stages[i - 1].size(2))
      throw std::invalid_argument("segment: pyramid extents do not halve at stage " + std::to_string(i));
  }
  std::array<torch::Tensor, encoder::kNumStages> skips;
  for (int i = 0; i < encoder::kNumStages; ++i)
    skips[i] = skip_blocks[i]->as<ResidualConvBlock>()->forward(pyr.stages[i]);

  auto x = skips[encoder::kNumStages - 1];
  for (int j = 0; j < encoder::kNumStages - 1; ++j) {
    const int target = encoder::kNumStages - 2 - j;
    x = up_blocks[j]->as<UpBlock>()->forward(x, skips[target]);
  }
  return conv(out, x);
}

}  // namespace mtmed3d::decoders
