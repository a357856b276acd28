#pragma once

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtmed3d/datamodel.hpp"

namespace mtmed3d::dataio {

using Rng = std::mt19937_64;
using Interval = std::pair<double, double>;

struct AugmentConfig {
  std::array<double, 3> flip_prob{0.5, 0.5, 0.5};
  double rotate_prob = 0.75;
  // axes spanning the axial plane; rotations are k * 90 degrees, k in {1,2,3}
  std::array<int, 2> rotate_axes{0, 1};
  Interval intensity_shift_range{-0.1, 0.1};
  Interval intensity_scale_range{-0.1, 0.1};
  Index3 crop_size{96, 96, 96};
  uint64_t seed = 0;

  /// Empty when valid.
  std::vector<std::string> validate() const;
};

/// Desk-scale synthetic phantom description. Radii of TC/ET are fractions of
/// the enclosing region's radii, so the regions nest by construction.
struct PhantomSpec {
  Index3 extent{64, 64, 64};
  Interval center_range{0.4, 0.6};     // tumor center, as a fraction of extent
  Interval wt_radius_range{6.0, 12.0}; // voxels, drawn per axis
  Interval tc_fraction_range{0.5, 0.8};
  Interval et_fraction_range{0.4, 0.7};
  double et_absent_prob = 0.5;
  double brain_fraction = 0.45;        // brain ellipsoid radius as a fraction of extent
  double noise_sigma = 0.1;
  // grade rule: HGG iff |ET| / |WT| >= this threshold
  double hgg_et_fraction = 0.01;

  std::vector<std::string> validate() const;
};

/// Grade assigned by the phantom rule from voxel counts.
Grade phantom_grade(const PhantomSpec& spec, int64_t wt_voxels, int64_t et_voxels);

/// Tight half-open bound of a binary 3D mask. Throws std::invalid_argument
/// ("no foreground") on an empty mask.
BoundingBox3D derive_bbox(const torch::Tensor& wt_mask);

/// Groups raw BraTS labels {0,1,2,4} into the uint8 [3, D, H, W] WT/TC/ET mask.
torch::Tensor group_labels(const torch::Tensor& labels);

/// Inverse of group_labels for nested masks: ET -> 4, TC\ET -> 1, WT\TC -> 2.
torch::Tensor ungroup_labels(const torch::Tensor& mask);

/// Per-channel z-score over nonzero voxels; zero voxels stay zero. A channel with
/// zero variance on its support becomes all zeros and its index is reported.
torch::Tensor normalize(const torch::Tensor& image, std::vector<int>* degenerate_channels = nullptr);

/// Offsets used by center_crop: floor((extent - size) / 2) per axis.
Index3 center_crop_offsets(const Index3& extent, const Index3& size);

VolumeSample center_crop(const VolumeSample& sample, const Index3& size);

VolumeSample augment(const VolumeSample& sample, const AugmentConfig& cfg, Rng& rng);

VolumeSample synth_case(const PhantomSpec& spec, Rng& rng, std::string case_id = "phantom");

/// BraTS layout: <root>/<HGG|LGG>/<case_id>/<case_id>_{t1,t1ce,t2,flair,seg}.nii.gz
std::filesystem::path case_dir(const std::filesystem::path& root, const std::string& case_id, Grade grade);

/// Finds <root>/HGG/<id>, <root>/LGG/<id> (grade from the folder) or <root>/<id>
/// (grade from <root>/manifest.txt, default LGG).
VolumeSample load_case(const std::filesystem::path& root, const std::string& case_id);

void write_case(const VolumeSample& sample, const std::filesystem::path& root);

struct ManifestEntry {
  std::string case_id;
  Grade grade = Grade::LGG;
  BoundingBox3D box;
};

inline constexpr const char* kManifestName = "manifest.txt";

/// Plain text, one case per line: `case_id grade lo0 lo1 lo2 hi0 hi1 hi2`; `#` starts a comment.
void write_manifest(const std::filesystem::path& file, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& file);

/// Case ids under a BraTS root, from the manifest when present, else from the HGG/LGG folders. Sorted.
std::vector<ManifestEntry> list_cases(const std::filesystem::path& root);

/// Stable per-case stream seed so parallel loaders stay deterministic.
uint64_t case_seed(uint64_t base_seed, const std::string& case_id);

}  // namespace mtmed3d::dataio
