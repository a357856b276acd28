#pragma once

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mtmed3d/datamodel.hpp"
#include "mtmed3d/layers.hpp"

namespace mtmed3d::encoder {

struct EncoderConfig {
  int64_t in_channels = kNumModalities;
  int64_t embed_dim = 48;
  int64_t patch_size = 2;
  int64_t window_size = 7;
  std::vector<int64_t> depths{2, 2, 2, 2};
  std::vector<int64_t> num_heads{3, 6, 12, 24};
  double mlp_ratio = 4.0;
  double drop_path = 0.0;

  std::vector<std::string> validate() const;
  /// Channel count of pyramid stage i: (E, E, 2E, 4E, 8E, 16E).
  int64_t stage_channels(int stage) const;
};

inline constexpr int kNumStages = 6;

/// Ordered multi-scale features; stage i has extent S / 2^i.
struct FeaturePyramid {
  std::array<torch::Tensor, kNumStages> stages;
};

/// Window tiling of one attention layer. Extents are padded up to a multiple of
/// the window; shift is zero on axes that fit inside a single window.
struct AttentionWindowLayout {
  Index3 extent{};
  Index3 padded_extent{};
  Index3 window_grid{};
  Index3 shift{};
  int64_t window = 7;

  static AttentionWindowLayout make(const Index3& extent, int64_t window, bool shifted);
  int64_t num_windows() const { return window_grid[0] * window_grid[1] * window_grid[2]; }
  int64_t tokens_per_window() const { return window * window * window; }
  bool any_shift() const { return shift[0] || shift[1] || shift[2]; }
  bool padded() const { return padded_extent != extent; }
};

/// x: [B, D, H, W, C] channels-last, unpadded. Zero-pads to the layout and returns
/// [B * num_windows, window^3, C] (batch-major, then window z, y, x).
torch::Tensor window_partition(const torch::Tensor& x, const AttentionWindowLayout& layout);

/// Inverse of window_partition; drops the padding. Returns [B, D, H, W, C].
torch::Tensor window_reverse(const torch::Tensor& windows, const AttentionWindowLayout& layout, int64_t batch);

/// Additive attention mask [num_windows, N, N]: 0 where query and key may interact,
/// a large negative value where the key is padding or comes from a different
/// pre-shift region. Undefined tensor when nothing needs masking.
torch::Tensor attention_mask(const AttentionWindowLayout& layout, const torch::TensorOptions& opts);

/// Index into the (2w-1)^3 relative position table for every (query, key) pair, [w^3, w^3].
torch::Tensor relative_position_index(int64_t window);

class PatchEmbedImpl : public torch::nn::Module {
 public:
  PatchEmbedImpl(int64_t in_channels, int64_t embed_dim, int64_t patch_size);
  /// [B, Cin, S, S, S] -> [B, E, S/p, S/p, S/p]
  torch::Tensor forward(const torch::Tensor& image);
  torch::nn::Conv3d proj{nullptr};

 private:
  int64_t patch_size_;
};
TORCH_MODULE(PatchEmbed);

class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int64_t dim, int64_t num_heads, int64_t window);
  /// x: [B*nW, N, C]; mask: [nW, N, N] additive or undefined.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask = {});
  /// Post-softmax attention weights [B*nW, heads, N, N].
  torch::Tensor attention_weights(const torch::Tensor& x, const torch::Tensor& mask = {});

  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::Tensor relative_position_bias_table;

 private:
  torch::Tensor scores(const torch::Tensor& x, const torch::Tensor& mask, torch::Tensor* v_out);
  int64_t dim_, heads_, window_;
  torch::Tensor rel_index_;
};
TORCH_MODULE(WindowAttention);

class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t dim, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

/// z' = (S)W-MSA(LN(z)) + z;  z = MLP(LN(z')) + z'.
class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(int64_t dim, int64_t num_heads, int64_t window, double mlp_ratio, bool shifted, double drop_path);
  /// x: [B, D, H, W, C] channels-last.
  torch::Tensor forward(const torch::Tensor& x);
  bool shifted() const { return shifted_; }

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  Mlp mlp{nullptr};

 private:
  torch::Tensor drop_path(const torch::Tensor& x);
  int64_t window_;
  bool shifted_;
  double drop_path_;
};
TORCH_MODULE(SwinBlock);

/// Groups 2x2x2 neighbours (8C), layer-norms, projects to 2C. Odd extents are zero-padded.
class PatchMergingImpl : public torch::nn::Module {
 public:
  explicit PatchMergingImpl(int64_t dim);
  /// [B, D, H, W, C] -> [B, ceil(D/2), ceil(H/2), ceil(W/2), 2C]
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

/// One hierarchical stage: `depth` blocks alternating W-MSA / SW-MSA, then patch merging.
class SwinStageImpl : public torch::nn::Module {
 public:
  SwinStageImpl(int64_t dim, int64_t depth, int64_t num_heads, int64_t window, double mlp_ratio,
                const std::vector<double>& drop_path);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::ModuleList blocks{nullptr};
  PatchMerging downsample{nullptr};
};
TORCH_MODULE(SwinStage);

class SwinEncoderImpl : public torch::nn::Module {
 public:
  explicit SwinEncoderImpl(EncoderConfig cfg);
  /// image [B, Cin, S, S, S] with S divisible by 32 -> six pyramid stages (channels-first).
  FeaturePyramid forward(const torch::Tensor& image);
  const EncoderConfig& config() const { return cfg_; }

  /// Parameters of the final stage group (last blocks + merging), the shared subset
  /// used for per-task gradient norms.
  std::vector<torch::Tensor> last_stage_parameters() const;

  ResidualConvBlock stem{nullptr};
  PatchEmbed patch_embed{nullptr};
  torch::nn::ModuleList stages{nullptr};

 private:
  EncoderConfig cfg_;
};
TORCH_MODULE(SwinEncoder);

/// Parameter-free layer norm over channels of a channels-first map.
torch::Tensor normalize_channels(const torch::Tensor& x);

}  // namespace mtmed3d::encoder
