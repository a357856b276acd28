#include "mtmed3d/dataio.hpp"

#include "mtmed3d/log.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mtmed3d/nifti.hpp"

namespace mtmed3d::dataio {
namespace fs = std::filesystem;

namespace {

bool in_unit(double p) { return p >= 0.0 && p <= 1.0; }

void rederive_box(VolumeSample& s) {
  auto b = foreground_bound(s.mask[static_cast<int>(Region::WT)]);
  s.usable = b.has_value();
  s.box = b.value_or(BoundingBox3D{});
}

double uniform(Rng& rng, const Interval& r) {
  if (r.first == r.second) return r.first;
  return std::uniform_real_distribution<double>(r.first, r.second)(rng);
}

}  // namespace

std::vector<std::string> AugmentConfig::validate() const {
  std::vector<std::string> v;
  for (double p : flip_prob)
    if (!in_unit(p)) v.emplace_back("flip_prob must lie in [0,1]");
  if (!in_unit(rotate_prob)) v.emplace_back("rotate_prob must lie in [0,1]");
  if (rotate_axes[0] == rotate_axes[1] || rotate_axes[0] < 0 || rotate_axes[0] > 2 || rotate_axes[1] < 0 ||
      rotate_axes[1] > 2)
    v.emplace_back("rotate_axes must name two distinct spatial axes");
  if (intensity_shift_range.first > intensity_shift_range.second) v.emplace_back("intensity_shift_range reversed");
  if (intensity_scale_range.first > intensity_scale_range.second) v.emplace_back("intensity_scale_range reversed");
  for (auto c : crop_size)
    if (c <= 0) v.emplace_back("crop_size must be positive");
  return v;
}

std::vector<std::string> PhantomSpec::validate() const {
  std::vector<std::string> v;
  for (auto e : extent)
    if (e < 4) v.emplace_back("extent must be at least 4 per axis");
  auto ordered = [&](const Interval& r, const char* name, double lo, double hi) {
    if (r.first > r.second || r.first < lo || r.second > hi) v.emplace_back(std::string(name) + " out of range");
  };
  ordered(center_range, "center_range", 0.0, 1.0);
  ordered(wt_radius_range, "wt_radius_range", 0.0, 1e9);
  ordered(tc_fraction_range, "tc_fraction_range", 0.0, 1.0);
  ordered(et_fraction_range, "et_fraction_range", 0.0, 1.0);
  if (!in_unit(et_absent_prob)) v.emplace_back("et_absent_prob must lie in [0,1]");
  if (noise_sigma < 0) v.emplace_back("noise_sigma must be non-negative");
  return v;
}

Grade phantom_grade(const PhantomSpec& spec, int64_t wt_voxels, int64_t et_voxels) {
  if (wt_voxels <= 0 || et_voxels <= 0) return Grade::LGG;
  const double frac = static_cast<double>(et_voxels) / static_cast<double>(wt_voxels);
  return frac >= spec.hgg_et_fraction ? Grade::HGG : Grade::LGG;
}

BoundingBox3D derive_bbox(const torch::Tensor& wt_mask) {
  auto b = foreground_bound(wt_mask);
  if (!b) throw std::invalid_argument("derive_bbox: no foreground");
  return *b;
}

torch::Tensor group_labels(const torch::Tensor& labels) {
  if (labels.dim() != 3) throw std::invalid_argument("group_labels: expected a 3D label volume");
  auto l = labels.to(torch::kInt64);
  auto known = l.eq(0) | l.eq(1) | l.eq(2) | l.eq(4);
  if (!known.all().item<bool>()) {
    auto bad = l.masked_select(known.logical_not())[0].item<int64_t>();
    throw std::runtime_error("group_labels: unknown label value " + std::to_string(bad));
  }
  auto wt = l.eq(1) | l.eq(2) | l.eq(4);
  auto tc = l.eq(1) | l.eq(4);
  auto et = l.eq(4);
  return torch::stack({wt, tc, et}).to(torch::kUInt8);
}

torch::Tensor ungroup_labels(const torch::Tensor& mask) {
  auto m = mask.to(torch::kBool);
  auto wt = m[0], tc = m[1], et = m[2];
  auto out = torch::zeros(wt.sizes(), torch::kUInt8);
  out.masked_fill_(wt, 2);
  out.masked_fill_(tc, 1);
  out.masked_fill_(et, 4);
  return out;
}

torch::Tensor normalize(const torch::Tensor& image, std::vector<int>* degenerate_channels) {
  if (image.dim() != 4) throw std::invalid_argument("normalize: expected [C, D, H, W]");
  auto img = image.to(torch::kDouble);
  auto out = torch::zeros_like(img);
  for (int64_t c = 0; c < img.size(0); ++c) {
    auto ch = img[c];
    auto nz = ch.ne(0);
    const auto n = nz.sum().item<int64_t>();
    if (n == 0) continue;
    auto vals = ch.masked_select(nz);
    const double mean = vals.mean().item<double>();
    const double var = (vals - mean).square().mean().item<double>();
    if (!(var > 0.0)) {
      log::warn("normalize: channel " + std::to_string(c) + " has zero variance on its support; output set to zero");
      if (degenerate_channels) degenerate_channels->push_back(static_cast<int>(c));
      continue;
    }
    const double sd = std::sqrt(var);
    out[c] = torch::where(nz, (ch - mean) / sd, torch::zeros_like(ch));
  }
  return out.to(image.scalar_type());
}

Index3 center_crop_offsets(const Index3& extent, const Index3& size) {
  Index3 off{};
  for (int a = 0; a < 3; ++a) {
    if (size[a] > extent[a] || size[a] <= 0)
      throw std::invalid_argument("center_crop: crop size exceeds volume extent on axis " + std::to_string(a));
    off[a] = (extent[a] - size[a]) / 2;
  }
  return off;
}

VolumeSample center_crop(const VolumeSample& sample, const Index3& size) {
  const auto off = center_crop_offsets(sample.extent(), size);
  VolumeSample out = sample;
  auto crop = [&](const torch::Tensor& t) {
    return t.slice(1, off[0], off[0] + size[0]).slice(2, off[1], off[1] + size[1]).slice(3, off[2], off[2] + size[2])
        .contiguous();
  };
  out.image = crop(sample.image);
  out.mask = crop(sample.mask);
  rederive_box(out);
  return out;
}

VolumeSample augment(const VolumeSample& sample, const AugmentConfig& cfg, Rng& rng) {
  VolumeSample out = sample;
  auto image = sample.image;
  auto mask = sample.mask;
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  for (int a = 0; a < 3; ++a) {
    if (u01(rng) < cfg.flip_prob[a]) {
      image = image.flip({a + 1});
      mask = mask.flip({a + 1});
    }
  }
  if (u01(rng) < cfg.rotate_prob) {
    int k = std::uniform_int_distribution<int>(1, 3)(rng);
    const int64_t ax0 = cfg.rotate_axes[0] + 1, ax1 = cfg.rotate_axes[1] + 1;
    if (image.size(ax0) != image.size(ax1)) k = 2;  // keep the extent for non-square planes
    image = torch::rot90(image, k, {ax0, ax1});
    mask = torch::rot90(mask, k, {ax0, ax1});
  }
  auto shifted = image.clone();
  for (int64_t c = 0; c < shifted.size(0); ++c) {
    const double delta = uniform(rng, cfg.intensity_shift_range);
    const double scale = uniform(rng, cfg.intensity_scale_range);
    if (delta != 0.0) shifted[c].add_(delta);
    if (scale != 0.0) shifted[c].mul_(1.0 + scale);
  }
  out.image = shifted.contiguous();
  out.mask = mask.contiguous();
  rederive_box(out);
  return out;
}

VolumeSample synth_case(const PhantomSpec& spec, Rng& rng, std::string case_id) {
  if (auto errs = spec.validate(); !errs.empty()) throw std::invalid_argument("synth_case: " + errs.front());
  const auto& ext = spec.extent;

  Real3 center{}, r_wt{}, r_tc{}, r_et{};
  for (int a = 0; a < 3; ++a) center[a] = uniform(rng, spec.center_range) * static_cast<double>(ext[a] - 1);
  for (int a = 0; a < 3; ++a) r_wt[a] = uniform(rng, spec.wt_radius_range);
  const double f_tc = uniform(rng, spec.tc_fraction_range);
  const double f_et = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.et_absent_prob
                          ? 0.0
                          : uniform(rng, spec.et_fraction_range);
  for (int a = 0; a < 3; ++a) {
    r_tc[a] = r_wt[a] * f_tc;
    r_et[a] = r_tc[a] * f_et;
  }

  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto grid = torch::meshgrid({torch::arange(ext[0], opts), torch::arange(ext[1], opts), torch::arange(ext[2], opts)},
                              "ij");
  auto inside = [&](const Real3& c, const Real3& r) {
    if (r[0] <= 0 || r[1] <= 0 || r[2] <= 0) return torch::zeros({ext[0], ext[1], ext[2]}, torch::kBool);
    auto q = ((grid[0] - c[0]) / r[0]).square() + ((grid[1] - c[1]) / r[1]).square() +
             ((grid[2] - c[2]) / r[2]).square();
    return q.le(1.0);
  };
  const Real3 mid{(ext[0] - 1) / 2.0, (ext[1] - 1) / 2.0, (ext[2] - 1) / 2.0};
  const Real3 brain_r{spec.brain_fraction * ext[0], spec.brain_fraction * ext[1], spec.brain_fraction * ext[2]};
  auto brain = inside(mid, brain_r);
  auto wt = inside(center, r_wt);
  auto tc = inside(center, r_tc).logical_and(wt);
  auto et = inside(center, r_et).logical_and(tc);
  brain = brain.logical_or(wt);

  // healthy tissue 1.0; offsets per region for (T1, T1ce, T2, FLAIR)
  constexpr double kEdema[4] = {-0.2, 0.0, 1.0, 1.5};
  constexpr double kCore[4] = {-0.5, 0.3, 0.5, 0.5};
  constexpr double kEnhancing[4] = {0.0, 2.0, 0.0, 0.8};
  auto edema = wt.logical_and(tc.logical_not());
  auto core = tc.logical_and(et.logical_not());

  // draw the noise through the explicit rng so output depends only on it
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  const int64_t nvox = ext[0] * ext[1] * ext[2];
  auto image = torch::empty({kNumModalities, ext[0], ext[1], ext[2]}, opts);
  for (int m = 0; m < kNumModalities; ++m) {
    auto ch = torch::empty({nvox}, opts);
    auto* p = ch.data_ptr<double>();
    for (int64_t n = 0; n < nvox; ++n) p[n] = spec.noise_sigma > 0 ? noise(rng) : 0.0;
    ch = ch.view({ext[0], ext[1], ext[2]});
    auto base = brain.to(torch::kDouble) + edema.to(torch::kDouble) * kEdema[m] +
                core.to(torch::kDouble) * kCore[m] + et.to(torch::kDouble) * kEnhancing[m];
    image[m] = torch::where(brain, base + ch, torch::zeros_like(ch));
  }

  VolumeSample s;
  s.case_id = std::move(case_id);
  s.image = image.to(torch::kFloat).contiguous();
  s.mask = torch::stack({wt, tc, et}).to(torch::kUInt8).contiguous();
  s.grade = phantom_grade(spec, wt.sum().item<int64_t>(), et.sum().item<int64_t>());
  rederive_box(s);
  return s;
}

fs::path case_dir(const fs::path& root, const std::string& case_id, Grade grade) {
  return root / std::string(to_string(grade)) / case_id;
}

namespace {

fs::path modality_file(const fs::path& dir, const std::string& case_id, std::string_view suffix) {
  return dir / (case_id + "_" + std::string(suffix) + ".nii.gz");
}

fs::path find_volume(const fs::path& dir, const std::string& case_id, std::string_view suffix) {
  auto gz = modality_file(dir, case_id, suffix);
  if (fs::exists(gz)) return gz;
  auto plain = dir / (case_id + "_" + std::string(suffix) + ".nii");
  if (fs::exists(plain)) return plain;
  throw std::runtime_error("load_case: missing " + std::string(suffix) + " volume for case " + case_id + " in " +
                           dir.string());
}

}  // namespace

VolumeSample load_case(const fs::path& root, const std::string& case_id) {
  fs::path dir;
  std::optional<Grade> grade;
  for (Grade g : {Grade::HGG, Grade::LGG}) {
    auto d = case_dir(root, case_id, g);
    if (fs::is_directory(d)) {
      dir = d;
      grade = g;
      break;
    }
  }
  if (dir.empty()) {
    if (!fs::is_directory(root / case_id)) throw std::runtime_error("load_case: no directory for case " + case_id);
    dir = root / case_id;
    if (fs::exists(root / kManifestName)) {
      for (const auto& e : read_manifest(root / kManifestName))
        if (e.case_id == case_id) grade = e.grade;
    }
  }

  std::vector<torch::Tensor> channels;
  std::optional<std::vector<int64_t>> shape;
  for (auto name : kModalityNames) {
    auto vol = nifti::to_ras(nifti::read(find_volume(dir, case_id, name)));
    auto sizes = vol.data.sizes().vec();
    if (shape && *shape != sizes)
      throw std::runtime_error("load_case: modality " + std::string(name) + " has a mismatched spatial shape");
    shape = sizes;
    channels.push_back(vol.data.to(torch::kFloat));
  }
  auto seg = nifti::to_ras(nifti::read(find_volume(dir, case_id, "seg")));
  if (seg.data.sizes().vec() != *shape) throw std::runtime_error("load_case: label volume has a mismatched shape");

  VolumeSample s;
  s.case_id = case_id;
  s.image = torch::stack(channels).contiguous();
  s.mask = group_labels(seg.data).contiguous();
  s.grade = grade.value_or(Grade::LGG);
  rederive_box(s);
  return s;
}

void write_case(const VolumeSample& sample, const fs::path& root) {
  const auto dir = case_dir(root, sample.case_id, sample.grade);
  fs::create_directories(dir);
  for (int m = 0; m < kNumModalities; ++m) {
    nifti::Volume v;
    v.data = sample.image[m].to(torch::kFloat).contiguous();
    nifti::write(modality_file(dir, sample.case_id, kModalityNames[m]), v);
  }
  nifti::Volume seg;
  seg.data = ungroup_labels(sample.mask);
  nifti::write(modality_file(dir, sample.case_id, "seg"), seg);
}

void write_manifest(const fs::path& file, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + file.string());
  out << "# case_id grade lo0 lo1 lo2 hi0 hi1 hi2 (half-open voxel box of WT)\n";
  for (const auto& e : entries) {
    out << e.case_id << ' ' << to_string(e.grade);
    for (auto v : e.box.lo) out << ' ' << v;
    for (auto v : e.box.hi) out << ' ' << v;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_manifest: write failed for " + file.string());
}

std::vector<ManifestEntry> read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + file.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    ManifestEntry e;
    std::string grade;
    if (!(ss >> e.case_id)) continue;
    if (!(ss >> grade >> e.box.lo[0] >> e.box.lo[1] >> e.box.lo[2] >> e.box.hi[0] >> e.box.hi[1] >> e.box.hi[2]))
      throw std::runtime_error("read_manifest: malformed line " + std::to_string(lineno) + " in " + file.string());
    e.grade = grade_from_string(grade);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> list_cases(const fs::path& root) {
  if (fs::exists(root / kManifestName)) {
    auto m = read_manifest(root / kManifestName);
    std::sort(m.begin(), m.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
    return m;
  }
  std::vector<ManifestEntry> out;
  for (Grade g : {Grade::HGG, Grade::LGG}) {
    auto d = root / std::string(to_string(g));
    if (!fs::is_directory(d)) continue;
    for (const auto& entry : fs::directory_iterator(d)) {
      if (!entry.is_directory()) continue;
      ManifestEntry e;
      e.case_id = entry.path().filename().string();
      e.grade = g;
      out.push_back(e);
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
  return out;
}

uint64_t case_seed(uint64_t base_seed, const std::string& case_id) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : case_id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finaliser
  uint64_t z = h ^ (base_seed + 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace mtmed3d::dataio
