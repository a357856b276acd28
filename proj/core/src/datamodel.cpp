#include "mtmed3d/datamodel.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace mtmed3d {

std::string_view to_string(Grade g) { return g == Grade::HGG ? "HGG" : "LGG"; }

Grade grade_from_string(std::string_view s) {
  if (s == "HGG" || s == "hgg") return Grade::HGG;
  if (s == "LGG" || s == "lgg") return Grade::LGG;
  throw std::invalid_argument("unknown grade '" + std::string(s) + "'");
}

int64_t BoundingBox3D::volume() const {
  int64_t v = 1;
  for (int a = 0; a < 3; ++a) v *= std::max<int64_t>(0, hi[a] - lo[a]);
  return v;
}

bool BoundingBox3D::well_ordered() const {
  for (int a = 0; a < 3; ++a)
    if (!(lo[a] < hi[a])) return false;
  return true;
}

bool BoundingBox3D::contains(const Index3& v) const {
  for (int a = 0; a < 3; ++a)
    if (v[a] < lo[a] || v[a] >= hi[a]) return false;
  return true;
}

BoxF BoxF::from(const BoundingBox3D& b) {
  BoxF f;
  for (int a = 0; a < 3; ++a) {
    f.lo[a] = static_cast<double>(b.lo[a]);
    f.hi[a] = static_cast<double>(b.hi[a]);
  }
  return f;
}

double BoxF::volume() const {
  double v = 1.0;
  for (int a = 0; a < 3; ++a) v *= std::max(0.0, hi[a] - lo[a]);
  return v;
}

Real3 BoxF::center() const { return {(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2}; }
Real3 BoxF::size() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }

bool BoxF::well_ordered() const {
  for (int a = 0; a < 3; ++a)
    if (!(lo[a] < hi[a])) return false;
  return true;
}

std::ostream& operator<<(std::ostream& os, const BoundingBox3D& b) {
  return os << "[(" << b.lo[0] << "," << b.lo[1] << "," << b.lo[2] << "),(" << b.hi[0] << "," << b.hi[1] << ","
            << b.hi[2] << "))";
}

std::ostream& operator<<(std::ostream& os, const BoxF& b) {
  return os << "[(" << b.lo[0] << "," << b.lo[1] << "," << b.lo[2] << "),(" << b.hi[0] << "," << b.hi[1] << ","
            << b.hi[2] << "))";
}

Index3 VolumeSample::extent() const {
  if (!image.defined() || image.dim() != 4) return {0, 0, 0};
  return {image.size(1), image.size(2), image.size(3)};
}

GradePrediction GradePrediction::from_logits(double lgg, double hgg) {
  GradePrediction p;
  p.logits = {lgg, hgg};
  // two-way softmax, written as a logistic of the logit gap
  p.probability = 1.0 / (1.0 + std::exp(lgg - hgg));
  return p;
}

std::optional<BoundingBox3D> foreground_bound(const torch::Tensor& mask3d) {
  if (mask3d.dim() != 3) throw std::invalid_argument("foreground_bound: expected a 3D tensor");
  auto fg = mask3d.ne(0);
  if (!fg.any().item<bool>()) return std::nullopt;
  BoundingBox3D box;
  for (int a = 0; a < 3; ++a) {
    std::vector<int64_t> other;
    for (int b = 0; b < 3; ++b)
      if (b != a) other.push_back(b);
    auto profile = fg.any(other[1]).any(other[0]);  // reduce higher axis first so indices stay valid
    auto idx = profile.nonzero().flatten();
    box.lo[a] = idx.min().item<int64_t>();
    box.hi[a] = idx.max().item<int64_t>() + 1;
  }
  return box;
}

std::vector<std::string> validate_sample(const VolumeSample& s) {
  std::vector<std::string> v;
  if (!s.image.defined() || s.image.dim() != 4 || s.image.size(0) != kNumModalities) {
    v.emplace_back("image: expected shape [4, D, H, W]");
  }
  if (!s.mask.defined() || s.mask.dim() != 4 || s.mask.size(0) != kNumRegions) {
    v.emplace_back("mask: expected shape [3, D, H, W]");
    return v;
  }
  if (s.image.defined() && s.image.dim() == 4 &&
      (s.image.size(1) != s.mask.size(1) || s.image.size(2) != s.mask.size(2) || s.image.size(3) != s.mask.size(3))) {
    v.emplace_back("shape: image and mask extents differ");
  }
  auto m = s.mask.to(torch::kInt64);
  if (!m.eq(0).logical_or(m.eq(1)).all().item<bool>()) v.emplace_back("binary: mask has values outside {0,1}");
  auto wt = m[static_cast<int>(Region::WT)].ne(0);
  auto tc = m[static_cast<int>(Region::TC)].ne(0);
  auto et = m[static_cast<int>(Region::ET)].ne(0);
  if (tc.logical_and(wt.logical_not()).any().item<bool>()) v.emplace_back("nesting: TC ⊄ WT");
  if (et.logical_and(tc.logical_not()).any().item<bool>()) v.emplace_back("nesting: ET ⊄ TC");

  auto tight = foreground_bound(wt);
  if (!tight) {
    v.emplace_back("box inconsistent with empty WT");
  } else {
    if (!s.box.well_ordered()) v.emplace_back("box: min corner not strictly below max corner");
    if (!(s.box == *tight)) v.emplace_back("box: differs from tight bound of WT");
  }
  return v;
}

}  // namespace mtmed3d
