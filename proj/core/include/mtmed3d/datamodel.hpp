#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace mtmed3d {

/// Spatial index triple. Axis 0/1/2 follow the on-disk NIfTI i/j/k order
/// after reorientation to RAS, so a BraTS volume is 240 x 240 x 155.
using Index3 = std::array<int64_t, 3>;
using Real3 = std::array<double, 3>;

inline constexpr int kNumModalities = 4;
inline constexpr int kNumRegions = 3;

/// Input channel order of every image tensor.
enum class Modality : int { T1 = 0, T1ce = 1, T2 = 2, Flair = 3 };
inline constexpr std::array<std::string_view, kNumModalities> kModalityNames = {"t1", "t1ce", "t2", "flair"};

/// Mask channel order. Regions overlap: ET is inside TC is inside WT.
enum class Region : int { WT = 0, TC = 1, ET = 2 };
inline constexpr std::array<std::string_view, kNumRegions> kRegionNames = {"WT", "TC", "ET"};

enum class Grade : int { LGG = 0, HGG = 1 };

std::string_view to_string(Grade g);
Grade grade_from_string(std::string_view s);

/// Axis-aligned integer box, half-open: voxel v is inside iff lo <= v < hi per axis.
struct BoundingBox3D {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  int64_t volume() const;
  bool well_ordered() const;
  bool contains(const Index3& v) const;
  bool operator==(const BoundingBox3D&) const = default;
};

/// Real-valued box with the same half-open convention; detections live here before rounding.
struct BoxF {
  Real3 lo{0, 0, 0};
  Real3 hi{0, 0, 0};

  static BoxF from(const BoundingBox3D& b);
  double volume() const;
  Real3 center() const;
  Real3 size() const;
  bool well_ordered() const;
};

std::ostream& operator<<(std::ostream& os, const BoundingBox3D& b);
std::ostream& operator<<(std::ostream& os, const BoxF& b);

/// One case: image is float [4, D, H, W], mask is uint8 [3, D, H, W] (WT, TC, ET).
struct VolumeSample {
  std::string case_id;
  torch::Tensor image;
  torch::Tensor mask;
  Grade grade = Grade::LGG;
  BoundingBox3D box;
  // Cleared when a spatial transform (crop) leaves no WT voxels.
  bool usable = true;

  Index3 extent() const;
};

struct GradePrediction {
  std::array<double, 2> logits{0.0, 0.0};  // (LGG, HGG)
  double probability = 0.0;                // P(HGG)

  Grade label() const { return probability >= 0.5 ? Grade::HGG : Grade::LGG; }
  static GradePrediction from_logits(double lgg, double hgg);
};

struct Detection {
  BoxF box;
  double score = 0.0;
};

/// Tight half-open bound of the nonzero voxels of a 3D tensor, or nullopt when empty.
std::optional<BoundingBox3D> foreground_bound(const torch::Tensor& mask3d);

/// Returns one description per violated invariant; empty means valid.
std::vector<std::string> validate_sample(const VolumeSample& s);

}  // namespace mtmed3d
