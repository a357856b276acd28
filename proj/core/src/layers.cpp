#include "mtmed3d/layers.hpp"

namespace mtmed3d {
namespace profiling {
namespace {
thread_local MacRecorder* g_active = nullptr;
}

MacRecorder::MacRecorder() : previous_(g_active) { g_active = this; }
MacRecorder::~MacRecorder() { g_active = previous_; }

int64_t MacRecorder::total() const {
  int64_t t = 0;
  for (const auto& r : records_) t += r.macs;
  return t;
}

void record(const torch::nn::Module* module, std::string kind, int64_t macs) {
  if (g_active) g_active->records_.push_back({module, std::move(kind), macs});
}

bool recording() { return g_active != nullptr; }

}  // namespace profiling

torch::Tensor conv(torch::nn::Conv3dImpl& layer, const torch::Tensor& x) {
  auto y = layer.forward(x);
  if (profiling::recording()) {
    const auto& o = layer.options;
    int64_t k = 1;
    for (auto v : *o.kernel_size()) k *= v;
    const int64_t out_vox = y.size(0) * y.size(2) * y.size(3) * y.size(4);
    profiling::record(&layer, "conv3d", o.in_channels() / o.groups() * o.out_channels() * k * out_vox);
  }
  return y;
}

torch::Tensor deconv(torch::nn::ConvTranspose3dImpl& layer, const torch::Tensor& x) {
  auto y = layer.forward(x);
  if (profiling::recording()) {
    const auto& o = layer.options;
    int64_t k = 1;
    for (auto v : *o.kernel_size()) k *= v;
    const int64_t in_vox = x.size(0) * x.size(2) * x.size(3) * x.size(4);
    profiling::record(&layer, "conv_transpose3d", o.in_channels() / o.groups() * o.out_channels() * k * in_vox);
  }
  return y;
}

torch::Tensor linear(torch::nn::LinearImpl& layer, const torch::Tensor& x) {
  auto y = layer.forward(x);
  if (profiling::recording()) {
    const auto& o = layer.options;
    const int64_t rows = y.numel() / o.out_features();
    profiling::record(&layer, "linear", rows * o.in_features() * o.out_features());
  }
  return y;
}

namespace {
torch::nn::Conv3d conv3(int64_t in, int64_t out, int64_t k, int64_t stride) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}
torch::nn::InstanceNorm3d inorm(int64_t c) { return torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(c)); }
}  // namespace

ResidualConvBlockImpl::ResidualConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module("conv1", conv3(in_channels, out_channels, 3, stride));
  norm1_ = register_module("norm1", inorm(out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels, 3, 1));
  norm2_ = register_module("norm2", inorm(out_channels));
  if (in_channels != out_channels || stride != 1) {
    shortcut_ = register_module("conv3", conv3(in_channels, out_channels, 1, stride));
    norm3_ = register_module("norm3", inorm(out_channels));
  }
}

torch::Tensor ResidualConvBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::leaky_relu(norm1_(conv(conv1_, x)), 0.01);
  y = norm2_(conv(conv2_, y));
  auto residual = shortcut_ ? norm3_(conv(shortcut_, x)) : x;
  return torch::leaky_relu(y + residual, 0.01);
}

UpBlockImpl::UpBlockImpl(int64_t in_channels, int64_t out_channels) {
  up_ = register_module(
      "transp_conv",
      torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in_channels, out_channels, 2).stride(2).bias(false)));
  block_ = register_module("conv_block", ResidualConvBlock(2 * out_channels, out_channels));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  auto y = deconv(up_, x);
  return block_(torch::cat({y, skip}, 1));
}

int64_t count_parameters(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace mtmed3d
