#include <gtest/gtest.h>
#include <torch/torch.h>

#include "mtmed3d/encoder.hpp"

using namespace mtmed3d;
using namespace mtmed3d::encoder;

namespace {

EncoderConfig small_config(int64_t E = 12) {
  EncoderConfig c;
  c.embed_dim = E;
  c.num_heads = {3, 3, 3, 3};
  c.window_size = 4;
  return c;
}

}  // namespace

TEST(EncoderConfig, Validation) {
  EXPECT_TRUE(EncoderConfig{}.validate().empty());
  auto c = EncoderConfig{};
  c.depths = {2, 3, 2, 2};
  EXPECT_FALSE(c.validate().empty());
  c = EncoderConfig{};
  c.embed_dim = 50;
  EXPECT_FALSE(c.validate().empty());
  c = EncoderConfig{};
  c.num_heads = {3, 6, 12};
  EXPECT_FALSE(c.validate().empty());
}

TEST(EncoderConfig, ChannelSchedule) {
  EncoderConfig c;
  const std::array<int64_t, 6> expect{48, 48, 96, 192, 384, 768};
  for (int i = 0; i < kNumStages; ++i) EXPECT_EQ(c.stage_channels(i), expect[i]);
}

TEST(PatchEmbed, Shapes) {
  torch::NoGradGuard ng;
  PatchEmbed pe(4, 48, 2);
  EXPECT_EQ(pe(torch::randn({1, 4, 96, 96, 96})).sizes(), torch::IntArrayRef({1, 48, 48, 48, 48}));
  EXPECT_EQ(pe(torch::randn({1, 4, 4, 4, 4})).sizes(), torch::IntArrayRef({1, 48, 2, 2, 2}));
  EXPECT_THROW(pe(torch::randn({1, 4, 5, 4, 4})), std::invalid_argument);
}

TEST(PatchEmbed, LinearWithoutBias) {
  torch::NoGradGuard ng;
  PatchEmbed pe(4, 8, 2);
  pe->proj->bias.zero_();
  auto a = torch::randn({1, 4, 8, 8, 8}, torch::kDouble), b = torch::randn({1, 4, 8, 8, 8}, torch::kDouble);
  pe->to(torch::kDouble);
  EXPECT_TRUE(torch::allclose(pe(2 * a + b), 2 * pe(a) + pe(b), 1e-10, 1e-10));
}

TEST(WindowLayout, Counts) {
  auto l = AttentionWindowLayout::make({14, 14, 14}, 7, false);
  EXPECT_EQ(l.num_windows(), 8);
  EXPECT_FALSE(l.padded());
  auto p = AttentionWindowLayout::make({12, 12, 12}, 7, false);
  EXPECT_EQ(p.padded_extent, (Index3{14, 14, 14}));
  EXPECT_EQ(p.num_windows(), 8);
  auto s = AttentionWindowLayout::make({3, 12, 3}, 7, true);
  EXPECT_EQ(s.shift, (Index3{0, 3, 0}));
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(s.padded_extent[a] % 7, 0);
    EXPECT_LT(s.shift[a], 7);
  }
}

TEST(WindowPartition, RoundtripWithPadding) {
  for (Index3 ext : {Index3{14, 14, 14}, Index3{12, 12, 12}, Index3{5, 9, 7}}) {
    auto l = AttentionWindowLayout::make(ext, 7, false);
    auto x = torch::randn({2, ext[0], ext[1], ext[2], 3});
    auto w = window_partition(x, l);
    EXPECT_EQ(w.sizes(), torch::IntArrayRef({2 * l.num_windows(), 343, 3}));
    EXPECT_TRUE(torch::equal(window_reverse(w, l, 2), x));
  }
}

TEST(WindowPartition, SingleWindowIsReshape) {
  auto l = AttentionWindowLayout::make({7, 7, 7}, 7, true);
  EXPECT_EQ(l.num_windows(), 1);
  EXPECT_FALSE(l.any_shift());
  auto x = torch::randn({1, 7, 7, 7, 5});
  EXPECT_TRUE(torch::equal(window_partition(x, l), x.reshape({1, 343, 5})));
  EXPECT_FALSE(attention_mask(l, x.options()).defined());
}

TEST(WindowPartition, ShiftThenInverseShiftRecoversInput) {
  auto l = AttentionWindowLayout::make({8, 8, 8}, 4, true);
  auto x = torch::randn({1, 8, 8, 8, 2});
  auto shifted = torch::roll(x, {-l.shift[0], -l.shift[1], -l.shift[2]}, {1, 2, 3});
  auto back = window_reverse(window_partition(shifted, l), l, 1);
  back = torch::roll(back, {l.shift[0], l.shift[1], l.shift[2]}, {1, 2, 3});
  EXPECT_TRUE(torch::equal(back, x));
}

TEST(AttentionMask, PaddingKeysAreBlocked) {
  auto l = AttentionWindowLayout::make({6, 6, 6}, 4, false);
  auto mask = attention_mask(l, torch::TensorOptions().dtype(torch::kFloat));
  ASSERT_TRUE(mask.defined());
  auto real = torch::zeros({1, 8, 8, 8, 1});
  real.slice(1, 0, 6).slice(2, 0, 6).slice(3, 0, 6).fill_(1);
  auto rw = window_partition(real.slice(1, 0, 6).slice(2, 0, 6).slice(3, 0, 6), l).squeeze(-1);  // padded zeros
  auto blocked = mask.lt(-1.0);
  EXPECT_TRUE(torch::equal(blocked, rw.eq(0).unsqueeze(1).expand_as(blocked)));
}

TEST(WindowAttention, RowsSumToOne) {
  torch::NoGradGuard ng;
  WindowAttention attn(12, 3, 4);
  auto l = AttentionWindowLayout::make({8, 8, 8}, 4, true);
  auto x = window_partition(torch::randn({1, 8, 8, 8, 12}), l);
  auto a = attn->attention_weights(x, attention_mask(l, x.options()));
  EXPECT_EQ(a.sizes(), torch::IntArrayRef({8, 3, 64, 64}));
  EXPECT_LT((a.sum(-1) - 1).abs().max().item<double>(), 1e-5);
  EXPECT_GE(a.min().item<double>(), 0.0);
}

// A shifted block may only mix tokens that share a window in the shifted frame without
// wrapping around the volume; perturbing one token must leave all others untouched.
TEST(SwinBlock, ShiftedAttentionConnectivity) {
  torch::NoGradGuard ng;
  for (Index3 ext : {Index3{8, 8, 8}, Index3{6, 8, 5}}) {
    SwinBlock blk(4, 1, 4, 2.0, true, 0.0);
    blk->to(torch::kDouble);
    blk->mlp->fc2->weight.zero_();
    blk->mlp->fc2->bias.zero_();
    auto x = torch::randn({1, ext[0], ext[1], ext[2], 4}, torch::kDouble);
    auto base = blk(x);
    auto l = AttentionWindowLayout::make(ext, 4, true);
    auto win = [&](const Index3& p, int a) {
      const int64_t c = p[a] - l.shift[a];
      return c >= 0 ? c / 4 : -1 - (-c - 1) / 4;
    };
    const std::vector<Index3> probes{{0, 0, 0}, {1, 2, 3}, {ext[0] - 1, ext[1] - 1, ext[2] - 1}, {3, 4, 2}};
    for (const auto& p : probes) {
      auto y = x.clone();
      y[0][p[0]][p[1]][p[2]][0] += 0.5;  // one channel: layer norm ignores uniform shifts
      auto diff = (blk(y) - base).abs().sum(-1)[0];
      auto acc = diff.accessor<double, 3>();
      for (int64_t i = 0; i < ext[0]; ++i)
        for (int64_t j = 0; j < ext[1]; ++j)
          for (int64_t k = 0; k < ext[2]; ++k) {
            const Index3 q{i, j, k};
            const bool same = win(p, 0) == win(q, 0) && win(p, 1) == win(q, 1) && win(p, 2) == win(q, 2);
            if (!same) EXPECT_LT(acc[i][j][k], 1e-12) << "leak from " << p[0] << p[1] << p[2] << " to " << i << j << k;
            else EXPECT_GT(acc[i][j][k], 0.0) << "no path from " << p[0] << p[1] << p[2] << " to " << i << j << k;
          }
    }
  }
}

TEST(SwinBlock, ZeroBranchesAreIdentity) {
  torch::NoGradGuard ng;
  SwinBlock blk(8, 2, 4, 4.0, true, 0.0);
  blk->attn->proj->weight.zero_();
  blk->attn->proj->bias.zero_();
  blk->mlp->fc2->weight.zero_();
  blk->mlp->fc2->bias.zero_();
  auto x = torch::randn({2, 8, 8, 8, 8});
  EXPECT_TRUE(torch::equal(blk(x), x));
}

TEST(PatchMerging, ShapeAndConstantField) {
  torch::NoGradGuard ng;
  PatchMerging pm(48);
  EXPECT_EQ(pm(torch::randn({1, 48, 48, 48, 48})).sizes(), torch::IntArrayRef({1, 24, 24, 24, 96}));
  PatchMerging small(3);
  auto c = torch::ones({1, 8, 8, 8, 3}) * 0.7;
  auto y = small(c);
  EXPECT_EQ(y.sizes(), torch::IntArrayRef({1, 4, 4, 4, 6}));
  EXPECT_LT((y - y[0][0][0][0]).abs().max().item<double>(), 1e-6);
}

TEST(SwinEncoder, PyramidSchedule) {
  torch::NoGradGuard ng;
  auto cfg = small_config();
  SwinEncoder enc(cfg);
  for (int64_t S : {32, 64}) {
    auto pyr = enc(torch::randn({1, 4, S, S, S}));
    for (int i = 0; i < kNumStages; ++i) {
      const int64_t e = S >> i;
      EXPECT_EQ(pyr.stages[i].sizes(), torch::IntArrayRef({1, cfg.stage_channels(i), e, e, e})) << i;
    }
  }
  EXPECT_THROW(enc(torch::randn({1, 4, 48, 48, 48})), std::invalid_argument);
}

TEST(SwinEncoder, LastStageParametersBelongToFinalStage) {
  SwinEncoder enc(small_config());
  auto last = enc->last_stage_parameters();
  auto named = enc->named_parameters();
  int64_t n = 0;
  for (const auto& p : named)
    if (p.key().rfind("layers.3.", 0) == 0) ++n;
  EXPECT_EQ(static_cast<int64_t>(last.size()), n);
  EXPECT_GT(n, 0);
}

TEST(SwinEncoder, RelativePositionIndexRange) {
  auto idx = relative_position_index(3);
  EXPECT_EQ(idx.sizes(), torch::IntArrayRef({27, 27}));
  EXPECT_EQ(idx.min().item<int64_t>(), 0);
  EXPECT_EQ(idx.max().item<int64_t>(), 124);
  EXPECT_EQ(idx[5][5].item<int64_t>(), 62);  // zero offset sits at the table center
}
