#include "mtmed3d/encoder.hpp"

#include <stdexcept>

namespace mtmed3d::encoder {
namespace F = torch::nn::functional;

namespace {

constexpr double kMaskedScore = -1e9;

void init_linear(torch::nn::Linear& l) {
  torch::NoGradGuard g;
  l->weight.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
  if (l->bias.defined()) l->bias.zero_();
}

torch::Tensor pad_to_layout(const torch::Tensor& x, const AttentionWindowLayout& layout) {
  if (!layout.padded()) return x;
  const int64_t pd = layout.padded_extent[0] - layout.extent[0];
  const int64_t ph = layout.padded_extent[1] - layout.extent[1];
  const int64_t pw = layout.padded_extent[2] - layout.extent[2];
  return torch::constant_pad_nd(x, {0, 0, 0, pw, 0, ph, 0, pd}, 0.0);
}

torch::Tensor partition_padded(const torch::Tensor& xp, int64_t w) {
  const auto B = xp.size(0), D = xp.size(1), H = xp.size(2), W = xp.size(3), C = xp.size(4);
  return xp.view({B, D / w, w, H / w, w, W / w, w, C})
      .permute({0, 1, 3, 5, 2, 4, 6, 7})
      .contiguous()
      .view({-1, w * w * w, C});
}

torch::Tensor reverse_padded(const torch::Tensor& windows, int64_t w, const Index3& padded, int64_t B) {
  const auto C = windows.size(-1);
  return windows.view({B, padded[0] / w, padded[1] / w, padded[2] / w, w, w, w, C})
      .permute({0, 1, 4, 2, 5, 3, 6, 7})
      .contiguous()
      .view({B, padded[0], padded[1], padded[2], C});
}

}  // namespace

std::vector<std::string> EncoderConfig::validate() const {
  std::vector<std::string> v;
  if (depths.size() != 4 || num_heads.size() != 4) v.emplace_back("depths and num_heads must both have 4 entries");
  if (embed_dim <= 0 || in_channels <= 0 || patch_size <= 0 || window_size <= 0)
    v.emplace_back("embed_dim, in_channels, patch_size and window_size must be positive");
  for (size_t i = 0; i < depths.size() && i < num_heads.size(); ++i) {
    if (depths[i] <= 0 || depths[i] % 2 != 0) v.emplace_back("each depth must be a positive even number");
    if (num_heads[i] <= 0 || (embed_dim << i) % num_heads[i] != 0)
      v.emplace_back("stage " + std::to_string(i) + " width must be divisible by its head count");
  }
  if (mlp_ratio <= 0) v.emplace_back("mlp_ratio must be positive");
  if (drop_path < 0 || drop_path >= 1) v.emplace_back("drop_path must lie in [0,1)");
  return v;
}

int64_t EncoderConfig::stage_channels(int stage) const {
  if (stage < 0 || stage >= kNumStages) throw std::out_of_range("stage_channels: stage index");
  return stage <= 1 ? embed_dim : embed_dim << (stage - 1);
}

AttentionWindowLayout AttentionWindowLayout::make(const Index3& extent, int64_t window, bool shifted) {
  if (window <= 0) throw std::invalid_argument("window size must be positive");
  AttentionWindowLayout l;
  l.extent = extent;
  l.window = window;
  for (int a = 0; a < 3; ++a) {
    l.window_grid[a] = (extent[a] + window - 1) / window;
    l.padded_extent[a] = l.window_grid[a] * window;
    l.shift[a] = (shifted && extent[a] > window) ? window / 2 : 0;
  }
  return l;
}

torch::Tensor window_partition(const torch::Tensor& x, const AttentionWindowLayout& layout) {
  if (x.dim() != 5 || x.size(1) != layout.extent[0] || x.size(2) != layout.extent[1] || x.size(3) != layout.extent[2])
    throw std::invalid_argument("window_partition: tensor does not match layout extent");
  return partition_padded(pad_to_layout(x, layout), layout.window);
}

torch::Tensor window_reverse(const torch::Tensor& windows, const AttentionWindowLayout& layout, int64_t batch) {
  auto full = reverse_padded(windows, layout.window, layout.padded_extent, batch);
  if (!layout.padded()) return full;
  return full.slice(1, 0, layout.extent[0]).slice(2, 0, layout.extent[1]).slice(3, 0, layout.extent[2]).contiguous();
}

torch::Tensor attention_mask(const AttentionWindowLayout& layout, const torch::TensorOptions& opts) {
  if (!layout.any_shift() && !layout.padded()) return {};
  const auto& P = layout.padded_extent;
  const int64_t w = layout.window;
  auto region = torch::zeros({P[0], P[1], P[2]}, torch::kInt64);
  for (int a = 0; a < 3; ++a) {
    const int64_t s = layout.shift[a];
    if (s == 0) continue;
    auto id = torch::zeros({P[a]}, torch::kInt64);
    id.slice(0, P[a] - w, P[a] - s).fill_(1);
    id.slice(0, P[a] - s, P[a]).fill_(2);
    std::vector<int64_t> shape{1, 1, 1};
    shape[a] = P[a];
    const int64_t weight = a == 0 ? 9 : (a == 1 ? 3 : 1);
    region = region + id.view(shape) * weight;
  }
  auto real = torch::zeros({P[0], P[1], P[2]}, torch::kBool);
  real.slice(0, 0, layout.extent[0]).slice(1, 0, layout.extent[1]).slice(2, 0, layout.extent[2]).fill_(true);
  if (layout.any_shift())
    real = torch::roll(real, {-layout.shift[0], -layout.shift[1], -layout.shift[2]}, {0, 1, 2});

  auto rw = partition_padded(region.view({1, P[0], P[1], P[2], 1}), w).squeeze(-1);  // [nW, N]
  auto kw = partition_padded(real.view({1, P[0], P[1], P[2], 1}), w).squeeze(-1);
  auto blocked = rw.unsqueeze(2).ne(rw.unsqueeze(1)).logical_or(kw.logical_not().unsqueeze(1));
  return torch::zeros(blocked.sizes(), opts).masked_fill(blocked, kMaskedScore);
}

torch::Tensor relative_position_index(int64_t window) {
  auto r = torch::arange(window, torch::kInt64);
  auto grid = torch::meshgrid({r, r, r}, "ij");
  auto coords = torch::stack({grid[0].flatten(), grid[1].flatten(), grid[2].flatten()});  // [3, N]
  auto rel = coords.unsqueeze(2) - coords.unsqueeze(1) + (window - 1);                   // [3, N, N]
  const int64_t span = 2 * window - 1;
  return rel[0] * span * span + rel[1] * span + rel[2];
}

PatchEmbedImpl::PatchEmbedImpl(int64_t in_channels, int64_t embed_dim, int64_t patch_size) : patch_size_(patch_size) {
  proj = register_module(
      "proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_channels, embed_dim, patch_size).stride(patch_size)));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& image) {
  for (int a = 2; a < 5; ++a)
    if (image.size(a) % patch_size_ != 0)
      throw std::invalid_argument("patch_embed: spatial extent not divisible by patch size");
  return conv(proj, image);
}

WindowAttentionImpl::WindowAttentionImpl(int64_t dim, int64_t num_heads, int64_t window)
    : dim_(dim), heads_(num_heads), window_(window) {
  qkv = register_module("qkv", torch::nn::Linear(torch::nn::LinearOptions(dim, 3 * dim)));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  const int64_t span = 2 * window - 1;
  relative_position_bias_table =
      register_parameter("relative_position_bias_table", torch::zeros({span * span * span, num_heads}));
  {
    torch::NoGradGuard g;
    relative_position_bias_table.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
  }
  init_linear(qkv);
  init_linear(proj);
  rel_index_ = relative_position_index(window).flatten();
}

torch::Tensor WindowAttentionImpl::scores(const torch::Tensor& x, const torch::Tensor& mask, torch::Tensor* v_out) {
  const auto Bw = x.size(0), N = x.size(1), C = x.size(2);
  const auto hd = C / heads_;
  auto qkv_t = linear(qkv, x).view({Bw, N, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv_t[0] * (1.0 / std::sqrt(static_cast<double>(hd)));
  auto k = qkv_t[1];
  *v_out = qkv_t[2];
  auto attn = torch::matmul(q, k.transpose(-2, -1));  // [Bw, heads, N, N]
  if (rel_index_.device() != x.device()) rel_index_ = rel_index_.to(x.device());
  auto bias = relative_position_bias_table.index_select(0, rel_index_).view({N, N, heads_}).permute({2, 0, 1});
  attn = attn + bias.unsqueeze(0);
  if (mask.defined()) {
    const auto nW = mask.size(0);
    attn = attn.view({Bw / nW, nW, heads_, N, N}) + mask.unsqueeze(1).unsqueeze(0);
    attn = attn.view({Bw, heads_, N, N});
  }
  if (profiling::recording()) profiling::record(this, "window_attention", 2 * Bw * heads_ * N * N * hd);
  return torch::softmax(attn, -1);
}

torch::Tensor WindowAttentionImpl::attention_weights(const torch::Tensor& x, const torch::Tensor& mask) {
  torch::Tensor v;
  return scores(x, mask, &v);
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
  torch::Tensor v;
  auto attn = scores(x, mask, &v);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({x.size(0), x.size(1), x.size(2)});
  return linear(proj, out);
}

MlpImpl::MlpImpl(int64_t dim, int64_t hidden) {
  fc1 = register_module("linear1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("linear2", torch::nn::Linear(hidden, dim));
  init_linear(fc1);
  init_linear(fc2);
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return linear(fc2, torch::gelu(linear(fc1, x))); }

SwinBlockImpl::SwinBlockImpl(int64_t dim, int64_t num_heads, int64_t window, double mlp_ratio, bool shifted,
                             double drop_path)
    : window_(window), shifted_(shifted), drop_path_(drop_path) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", WindowAttention(dim, num_heads, window));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  mlp = register_module("mlp", Mlp(dim, static_cast<int64_t>(dim * mlp_ratio)));
}

torch::Tensor SwinBlockImpl::drop_path(const torch::Tensor& x) {
  if (!is_training() || drop_path_ <= 0.0) return x;
  const double keep = 1.0 - drop_path_;
  auto m = torch::empty({x.size(0), 1, 1, 1, 1}, x.options()).bernoulli_(keep);
  return x * m / keep;
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
  const auto B = x.size(0);
  const auto layout = AttentionWindowLayout::make({x.size(1), x.size(2), x.size(3)}, window_, shifted_);

  auto h = pad_to_layout(norm1(x), layout);
  if (layout.any_shift()) h = torch::roll(h, {-layout.shift[0], -layout.shift[1], -layout.shift[2]}, {1, 2, 3});
  auto windows = partition_padded(h, window_);
  auto mask = attention_mask(layout, x.options());
  auto attended = reverse_padded(attn(windows, mask), window_, layout.padded_extent, B);
  if (layout.any_shift())
    attended = torch::roll(attended, {layout.shift[0], layout.shift[1], layout.shift[2]}, {1, 2, 3});
  if (layout.padded())
    attended = attended.slice(1, 0, layout.extent[0]).slice(2, 0, layout.extent[1]).slice(3, 0, layout.extent[2]);

  auto z = x + drop_path(attended);
  return z + drop_path(mlp(norm2(z)));
}

PatchMergingImpl::PatchMergingImpl(int64_t dim) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({8 * dim})));
  reduction = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(8 * dim, 2 * dim).bias(false)));
  init_linear(reduction);
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x) {
  auto xp = x;
  const int64_t pd = x.size(1) % 2, ph = x.size(2) % 2, pw = x.size(3) % 2;
  if (pd || ph || pw) xp = torch::constant_pad_nd(x, {0, 0, 0, pw, 0, ph, 0, pd}, 0.0);
  std::vector<torch::Tensor> parts;
  parts.reserve(8);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 2; ++j)
      for (int64_t k = 0; k < 2; ++k) {
        using torch::indexing::Slice;
        parts.push_back(xp.index({Slice(), Slice(i, torch::indexing::None, 2), Slice(j, torch::indexing::None, 2),
                                  Slice(k, torch::indexing::None, 2)}));
      }
  return linear(reduction, norm(torch::cat(parts, -1)));
}

SwinStageImpl::SwinStageImpl(int64_t dim, int64_t depth, int64_t num_heads, int64_t window, double mlp_ratio,
                             const std::vector<double>& drop_path) {
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < depth; ++i)
    blocks->push_back(SwinBlock(dim, num_heads, window, mlp_ratio, i % 2 == 1, drop_path.at(i)));
  downsample = register_module("downsample", PatchMerging(dim));
}

torch::Tensor SwinStageImpl::forward(const torch::Tensor& x) {
  auto h = x;
  for (const auto& b : *blocks) h = b->as<SwinBlock>()->forward(h);
  return downsample(h);
}

torch::Tensor normalize_channels(const torch::Tensor& x) {
  auto cl = to_channels_last(x);
  return to_channels_first(torch::layer_norm(cl, {cl.size(-1)}));
}

SwinEncoderImpl::SwinEncoderImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  if (auto errs = cfg_.validate(); !errs.empty()) throw std::invalid_argument("EncoderConfig: " + errs.front());
  stem = register_module("stem", ResidualConvBlock(cfg_.in_channels, cfg_.embed_dim));
  patch_embed = register_module("patch_embed", PatchEmbed(cfg_.in_channels, cfg_.embed_dim, cfg_.patch_size));

  int64_t total = 0;
  for (auto d : cfg_.depths) total += d;
  std::vector<double> dpr;
  for (int64_t i = 0; i < total; ++i) dpr.push_back(total > 1 ? cfg_.drop_path * i / (total - 1) : 0.0);

  stages = register_module("layers", torch::nn::ModuleList());
  size_t offset = 0;
  for (size_t s = 0; s < 4; ++s) {
    std::vector<double> rates(dpr.begin() + offset, dpr.begin() + offset + cfg_.depths[s]);
    offset += cfg_.depths[s];
    stages->push_back(SwinStage(cfg_.embed_dim << s, cfg_.depths[s], cfg_.num_heads[s], cfg_.window_size,
                                cfg_.mlp_ratio, rates));
  }
}

FeaturePyramid SwinEncoderImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 5) throw std::invalid_argument("encode: expected [B, C, S, S, S]");
  const int64_t divisor = cfg_.patch_size * 16;
  for (int a = 2; a < 5; ++a)
    if (image.size(a) % divisor != 0)
      throw std::invalid_argument("encode: spatial extent must be divisible by " + std::to_string(divisor));

  FeaturePyramid pyr;
  pyr.stages[0] = stem(image);
  auto x = patch_embed(image);
  pyr.stages[1] = normalize_channels(x);
  auto h = to_channels_last(x);
  for (size_t s = 0; s < 4; ++s) {
    h = stages[s]->as<SwinStage>()->forward(h);
    pyr.stages[s + 2] = normalize_channels(to_channels_first(h));
  }
  return pyr;
}

std::vector<torch::Tensor> SwinEncoderImpl::last_stage_parameters() const {
  return stages->children().at(3)->parameters();
}

}  // namespace mtmed3d::encoder
