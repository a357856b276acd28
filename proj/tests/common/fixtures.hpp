#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "mtmed3d/config.hpp"
#include "mtmed3d/dataio.hpp"
#include "mtmed3d/pipeline.hpp"

namespace fixtures {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, unique per process.
inline fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mtmed3d_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Smallest configuration that still exercises every module: 32^3 crop, narrow widths.
inline mtmed3d::pipeline::RunConfig tiny_config(const fs::path& data_root, const fs::path& out_dir) {
  auto cfg = mtmed3d::pipeline::parse_config(R"(
seed: 3
model:
  encoder: {embed_dim: 6, window_size: 4, num_heads: [3, 3, 3, 3]}
  detection: {neck_channels: 8, group_norm_groups: 4, subnet_depth: 1, anchor_scales: [[2.0], [2.0], [2.0], [2.0]]}
  classification: {growth_rate: 4, init_features: 8, bn_size: 2, norm: group, norm_groups: 4}
optim: {lr_encoder: 1.0e-3, lr_seg: 1.0e-3, lr_det: 1.0e-3, lr_cls: 1.0e-3, max_steps: 3, weight_decay: 0.0}
balance: {l0_steps: 1}
data: {split: all, crop: [32, 32, 32], augment: false}
eval: {validate_every: 1000}
)");
  cfg.data.root = data_root.string();
  cfg.output_dir = out_dir.string();
  return cfg;
}

inline mtmed3d::dataio::PhantomSpec tiny_phantom_spec() {
  mtmed3d::dataio::PhantomSpec spec;
  spec.extent = {36, 34, 33};
  spec.wt_radius_range = {3.0, 6.0};
  return spec;
}

}  // namespace fixtures
