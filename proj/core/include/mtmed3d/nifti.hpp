#pragma once

#include <array>
#include <filesystem>

#include <torch/torch.h>

namespace mtmed3d::nifti {

/// A single-volume NIfTI-1 image. `data` is indexed [i][j][k]; `affine` maps
/// (i, j, k, 1) to scanner RAS+ millimetres (row-major 3x4).
struct Volume {
  torch::Tensor data;
  std::array<double, 12> affine{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  std::array<double, 3> pixdim{1, 1, 1};
};

/// Reads .nii or .nii.gz. Integer types keep their dtype (uint16 widens to int32);
/// a non-trivial scl_slope/scl_inter promotes to float32.
Volume read(const std::filesystem::path& path);

/// Writes NIfTI-1 single-file; gzip when the name ends in .gz. Supports
/// uint8, int16, int32, float32 and float64 tensors.
void write(const std::filesystem::path& path, const Volume& vol);

/// Permutes and flips axes so that i, j, k increase toward R, A, S.
/// Returns the reoriented volume with an updated affine.
Volume to_ras(const Volume& vol);

}  // namespace mtmed3d::nifti
