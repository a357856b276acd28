#include "mtmed3d/classification.hpp"

#include <numeric>
#include <stdexcept>

namespace mtmed3d::decoders {

std::string_view to_string(ClsInput m) { return m == ClsInput::SegOnly ? "seg_only" : "seg_plus_image"; }

ClsInput cls_input_from_string(std::string_view s) {
  if (s == "seg_only") return ClsInput::SegOnly;
  if (s == "seg_plus_image") return ClsInput::SegPlusImage;
  throw std::invalid_argument("unknown classifier input '" + std::string(s) + "'");
}

std::string_view to_string(NormKind n) { return n == NormKind::Batch ? "batch" : "group"; }

NormKind norm_kind_from_string(std::string_view s) {
  if (s == "batch") return NormKind::Batch;
  if (s == "group") return NormKind::Group;
  throw std::invalid_argument("unknown norm '" + std::string(s) + "' (expected batch or group)");
}

std::vector<std::string> ClsHeadConfig::validate() const {
  std::vector<std::string> v;
  if (block_config != kDenseNet121Blocks) v.emplace_back("block_config must be the DenseNet-121 schedule [6,12,24,16]");
  if (growth_rate <= 0 || init_features <= 0 || bn_size <= 0) v.emplace_back("densenet widths must be positive");
  if (num_classes != 2) v.emplace_back("num_classes must be 2");
  if (norm_groups <= 0) v.emplace_back("norm_groups must be positive");
  return v;
}

namespace {
torch::nn::AnyModule make_norm(int64_t c, const ClsHeadConfig& cfg) {
  if (cfg.norm == NormKind::Batch) return torch::nn::AnyModule(torch::nn::BatchNorm3d(c));
  return torch::nn::AnyModule(torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd(c, cfg.norm_groups), c)));
}

torch::nn::Conv3d make_conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}
}  // namespace

DenseLayerImpl::DenseLayerImpl(int64_t in_channels, const ClsHeadConfig& cfg) {
  const int64_t mid = cfg.bn_size * cfg.growth_rate;
  norm1 = make_norm(in_channels, cfg);
  register_module("norm1", norm1.ptr());
  conv1 = register_module("conv1", make_conv(in_channels, mid, 1));
  norm2 = make_norm(mid, cfg);
  register_module("norm2", norm2.ptr());
  conv2 = register_module("conv2", make_conv(mid, cfg.growth_rate, 3));
}

torch::Tensor DenseLayerImpl::forward(const torch::Tensor& x) {
  auto y = conv(conv1, torch::relu(norm1.forward(x)));
  return conv(conv2, torch::relu(norm2.forward(y)));
}

DenseBlockImpl::DenseBlockImpl(int64_t num_layers, int64_t in_channels, const ClsHeadConfig& cfg)
    : out_channels_(in_channels + num_layers * cfg.growth_rate) {
  layers = register_module("layers", torch::nn::ModuleList());
  for (int64_t l = 0; l < num_layers; ++l) layers->push_back(DenseLayer(in_channels + l * cfg.growth_rate, cfg));
}

torch::Tensor DenseBlockImpl::forward(const torch::Tensor& x, std::vector<int64_t>* trace) {
  std::vector<torch::Tensor> features{x};
  for (const auto& m : *layers) {
    auto stacked = torch::cat(features, 1);
    if (trace) trace->push_back(stacked.size(1));
    features.push_back(m->as<DenseLayer>()->forward(stacked));
  }
  return torch::cat(features, 1);
}

TransitionImpl::TransitionImpl(int64_t in_channels, int64_t out_channels, const ClsHeadConfig& cfg) {
  norm = make_norm(in_channels, cfg);
  register_module("norm", norm.ptr());
  conv = register_module("conv", make_conv(in_channels, out_channels, 1));
}

torch::Tensor TransitionImpl::forward(const torch::Tensor& x) {
  auto y = mtmed3d::conv(conv, torch::relu(norm.forward(x)));
  return torch::avg_pool3d(y, 2, 2);
}

DenseNet3DImpl::DenseNet3DImpl(ClsHeadConfig cfg) : cfg_(std::move(cfg)) {
  if (auto errs = cfg_.validate(); !errs.empty()) throw std::invalid_argument("ClsHeadConfig: " + errs.front());
  stem_conv = register_module(
      "stem_conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg_.in_channels(), cfg_.init_features, 7)
                                         .stride(2)
                                         .padding(3)
                                         .bias(false)));
  stem_norm = make_norm(cfg_.init_features, cfg_);
  register_module("stem_norm", stem_norm.ptr());

  blocks = register_module("blocks", torch::nn::ModuleList());
  transitions = register_module("transitions", torch::nn::ModuleList());
  int64_t c = cfg_.init_features;
  for (size_t b = 0; b < cfg_.block_config.size(); ++b) {
    DenseBlock block(cfg_.block_config[b], c, cfg_);
    c = block->out_channels();
    blocks->push_back(block);
    if (b + 1 < cfg_.block_config.size()) {
      transitions->push_back(Transition(c, c / 2, cfg_));
      c /= 2;
    }
  }
  final_norm = make_norm(c, cfg_);
  register_module("final_norm", final_norm.ptr());
  classifier = register_module("classifier", torch::nn::Linear(c, cfg_.num_classes));

  for (auto& m : modules(false)) {
    if (auto* cv = m->as<torch::nn::Conv3d>()) torch::nn::init::kaiming_normal_(cv->weight);
  }
  torch::NoGradGuard g;
  classifier->bias.zero_();
}

torch::Tensor DenseNet3DImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != cfg_.in_channels())
    throw std::invalid_argument("classify: expected input [B, " + std::to_string(cfg_.in_channels()) + ", D, H, W]");
  trace_.clear();
  auto y = torch::relu(stem_norm.forward(conv(stem_conv, x)));
  y = torch::max_pool3d(y, 3, 2, 1);
  for (size_t b = 0; b < blocks->size(); ++b) {
    y = blocks[b]->as<DenseBlock>()->forward(y, &trace_);
    if (b < transitions->size()) y = transitions[b]->as<Transition>()->forward(y);
  }
  y = torch::relu(final_norm.forward(y));
  y = torch::adaptive_avg_pool3d(y, {1, 1, 1}).flatten(1);
  return linear(classifier, y);
}

torch::Tensor DenseNet3DImpl::forward(const torch::Tensor& seg_probs, const torch::Tensor& image) {
  if (seg_probs.dim() != 5 || seg_probs.size(1) != kNumRegions)
    throw std::invalid_argument("classify: seg_probs must be [B, 3, D, H, W]");
  auto seg = cfg_.detach_seg ? seg_probs.detach() : seg_probs;
  if (cfg_.input == ClsInput::SegOnly) return forward(seg);
  if (image.dim() != 5 || image.size(1) != kNumModalities || image.sizes().slice(2) != seg.sizes().slice(2) ||
      image.size(0) != seg.size(0))
    throw std::invalid_argument("classify: image must be [B, 4, D, H, W] matching seg_probs");
  return forward(torch::cat({seg, image}, 1));
}

std::vector<GradePrediction> classify(const torch::Tensor& logits) {
  if (logits.dim() != 2 || logits.size(1) != 2) throw std::invalid_argument("classify: logits must be [B, 2]");
  auto l = logits.detach().to(torch::kDouble).cpu();
  std::vector<GradePrediction> out;
  for (int64_t b = 0; b < l.size(0); ++b)
    out.push_back(GradePrediction::from_logits(l[b][0].item<double>(), l[b][1].item<double>()));
  return out;
}

}  // namespace mtmed3d::decoders
