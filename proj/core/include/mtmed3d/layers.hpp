#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mtmed3d {

namespace profiling {

struct MacRecord {
  const torch::nn::Module* module = nullptr;
  std::string kind;
  int64_t macs = 0;
};

/// While alive, every layer helper below appends one MacRecord per call.
/// Scoped to the creating thread.
class MacRecorder {
 public:
  MacRecorder();
  ~MacRecorder();
  MacRecorder(const MacRecorder&) = delete;
  MacRecorder& operator=(const MacRecorder&) = delete;

  const std::vector<MacRecord>& records() const { return records_; }
  int64_t total() const;

 private:
  friend void record(const torch::nn::Module*, std::string, int64_t);
  std::vector<MacRecord> records_;
  MacRecorder* previous_ = nullptr;
};

void record(const torch::nn::Module* module, std::string kind, int64_t macs);
bool recording();

}  // namespace profiling

// Layer calls that report their multiply-accumulate count when profiling.
torch::Tensor conv(torch::nn::Conv3dImpl& layer, const torch::Tensor& x);
torch::Tensor deconv(torch::nn::ConvTranspose3dImpl& layer, const torch::Tensor& x);
torch::Tensor linear(torch::nn::LinearImpl& layer, const torch::Tensor& x);
inline torch::Tensor conv(torch::nn::Conv3d& layer, const torch::Tensor& x) { return conv(*layer, x); }
inline torch::Tensor deconv(torch::nn::ConvTranspose3d& layer, const torch::Tensor& x) { return deconv(*layer, x); }
inline torch::Tensor linear(torch::nn::Linear& layer, const torch::Tensor& x) { return linear(*layer, x); }

inline torch::Tensor to_channels_last(const torch::Tensor& x) { return x.permute({0, 2, 3, 4, 1}).contiguous(); }
inline torch::Tensor to_channels_first(const torch::Tensor& x) { return x.permute({0, 4, 1, 2, 3}).contiguous(); }

/// conv3-norm-lrelu-conv3-norm plus a (1x1 conv + norm) shortcut when the shape
/// changes, then lrelu. Instance norm without affine parameters; convs without bias.
class ResidualConvBlockImpl : public torch::nn::Module {
 public:
  ResidualConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride = 1);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  torch::nn::InstanceNorm3d norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
};
TORCH_MODULE(ResidualConvBlock);

/// Stride-2 transposed conv, concatenation with the skip feature, residual block.
class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

 private:
  torch::nn::ConvTranspose3d up_{nullptr};
  ResidualConvBlock block_{nullptr};
};
TORCH_MODULE(UpBlock);

/// Number of trainable scalars.
int64_t count_parameters(const torch::nn::Module& m);

}  // namespace mtmed3d
