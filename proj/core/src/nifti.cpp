#include "mtmed3d/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mtmed3d::nifti {
namespace {

#pragma pack(push, 1)
struct Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kUInt8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64, kInt8 = 256, kUInt16 = 512;

template <typename T>
void swap_bytes(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
}

void swap_header(Header& h) {
  swap_bytes(h.sizeof_hdr);
  for (auto& d : h.dim) swap_bytes(d);
  swap_bytes(h.datatype);
  swap_bytes(h.bitpix);
  for (auto& p : h.pixdim) swap_bytes(p);
  swap_bytes(h.vox_offset);
  swap_bytes(h.scl_slope);
  swap_bytes(h.scl_inter);
  swap_bytes(h.qform_code);
  swap_bytes(h.sform_code);
  swap_bytes(h.quatern_b);
  swap_bytes(h.quatern_c);
  swap_bytes(h.quatern_d);
  swap_bytes(h.qoffset_x);
  swap_bytes(h.qoffset_y);
  swap_bytes(h.qoffset_z);
  for (int i = 0; i < 4; ++i) {
    swap_bytes(h.srow_x[i]);
    swap_bytes(h.srow_y[i]);
    swap_bytes(h.srow_z[i]);
  }
}

struct GzFile {
  gzFile f = nullptr;
  GzFile(const std::filesystem::path& p, const char* mode) : f(gzopen(p.c_str(), mode)) {}
  ~GzFile() {
    if (f) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
};

void read_exact(gzFile f, void* dst, size_t n, const std::filesystem::path& p) {
  auto* out = static_cast<char*>(dst);
  while (n > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw std::runtime_error("nifti: truncated file " + p.string());
    out += got;
    n -= static_cast<size_t>(got);
  }
}

std::array<double, 12> affine_from_header(const Header& h) {
  std::array<double, 12> a{};
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      a[c] = h.srow_x[c];
      a[4 + c] = h.srow_y[c];
      a[8 + c] = h.srow_z[c];
    }
    return a;
  }
  const double dx = h.pixdim[1] > 0 ? h.pixdim[1] : 1.0;
  const double dy = h.pixdim[2] > 0 ? h.pixdim[2] : 1.0;
  double dz = h.pixdim[3] > 0 ? h.pixdim[3] : 1.0;
  if (h.qform_code > 0) {
    double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double aa = 1.0 - (b * b + c * c + d * d);
    aa = aa < 1e-7 ? 0.0 : std::sqrt(aa);
    if (h.pixdim[0] < 0) dz = -dz;
    const double r[9] = {aa * aa + b * b - c * c - d * d, 2 * (b * c - aa * d),         2 * (b * d + aa * c),
                         2 * (b * c + aa * d),         aa * aa + c * c - b * b - d * d, 2 * (c * d - aa * b),
                         2 * (b * d - aa * c),         2 * (c * d + aa * b),         aa * aa + d * d - c * c - b * b};
    const double s[3] = {dx, dy, dz};
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) a[row * 4 + col] = r[row * 3 + col] * s[col];
    a[3] = h.qoffset_x;
    a[7] = h.qoffset_y;
    a[11] = h.qoffset_z;
    return a;
  }
  a[0] = dx;
  a[5] = dy;
  a[10] = dz;
  return a;
}

torch::ScalarType scalar_type(int16_t datatype) {
  switch (datatype) {
    case kUInt8: return torch::kUInt8;
    case kInt8: return torch::kInt8;
    case kInt16: return torch::kInt16;
    case kUInt16: return torch::kInt16;  // raw bits; widened after read
    case kInt32: return torch::kInt32;
    case kFloat32: return torch::kFloat;
    case kFloat64: return torch::kDouble;
    default: throw std::runtime_error("nifti: unsupported datatype " + std::to_string(datatype));
  }
}

bool ends_with_gz(const std::filesystem::path& p) {
  const auto s = p.string();
  return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

}  // namespace

Volume read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("nifti: missing file " + path.string());
  GzFile file(path, "rb");
  if (!file.f) throw std::runtime_error("nifti: cannot open " + path.string());

  Header h{};
  read_exact(file.f, &h, sizeof(Header), path);
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw std::runtime_error("nifti: not a NIfTI-1 file " + path.string());
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0)
    throw std::runtime_error("nifti: bad magic in " + path.string());
  if (std::memcmp(h.magic, "ni1", 4) == 0) throw std::runtime_error("nifti: two-file (.hdr/.img) format unsupported");
  const int ndim = h.dim[0];
  if (ndim < 3 || ndim > 7) throw std::runtime_error("nifti: expected a 3D volume in " + path.string());
  for (int d = 4; d <= ndim; ++d)
    if (h.dim[d] > 1) throw std::runtime_error("nifti: only single 3D volumes are supported: " + path.string());

  const int64_t ni = h.dim[1], nj = h.dim[2], nk = h.dim[3];
  const auto dtype = scalar_type(h.datatype);

  // skip extensions up to vox_offset
  const auto offset = static_cast<int64_t>(h.vox_offset);
  if (offset > static_cast<int64_t>(sizeof(Header))) {
    std::vector<char> skip(static_cast<size_t>(offset - static_cast<int64_t>(sizeof(Header))));
    read_exact(file.f, skip.data(), skip.size(), path);
  }

  auto raw = torch::empty({nk, nj, ni}, torch::TensorOptions().dtype(dtype));
  read_exact(file.f, raw.data_ptr(), static_cast<size_t>(raw.numel()) * raw.element_size(), path);
  if (swapped && raw.element_size() > 1) {
    auto* bytes = static_cast<unsigned char*>(raw.data_ptr());
    const auto es = static_cast<size_t>(raw.element_size());
    for (int64_t n = 0; n < raw.numel(); ++n) std::reverse(bytes + n * es, bytes + (n + 1) * es);
  }
  if (h.datatype == kUInt16) raw = raw.to(torch::kInt32).bitwise_and(0xFFFF);

  Volume vol;
  vol.data = raw.permute({2, 1, 0}).contiguous();
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
    vol.data = vol.data.to(torch::kFloat) * h.scl_slope + h.scl_inter;
  }
  vol.affine = affine_from_header(h);
  for (int a = 0; a < 3; ++a) vol.pixdim[a] = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : 1.0;
  return vol;
}

void write(const std::filesystem::path& path, const Volume& vol) {
  if (!vol.data.defined() || vol.data.dim() != 3) throw std::invalid_argument("nifti::write: expected 3D data");
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    if (vol.data.size(a) > 32767) throw std::invalid_argument("nifti::write: extent too large");
    h.dim[a + 1] = static_cast<int16_t>(vol.data.size(a));
  }
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  switch (vol.data.scalar_type()) {
    case torch::kUInt8: h.datatype = kUInt8; h.bitpix = 8; break;
    case torch::kInt16: h.datatype = kInt16; h.bitpix = 16; break;
    case torch::kInt32: h.datatype = kInt32; h.bitpix = 32; break;
    case torch::kFloat: h.datatype = kFloat32; h.bitpix = 32; break;
    case torch::kDouble: h.datatype = kFloat64; h.bitpix = 64; break;
    default: throw std::invalid_argument("nifti::write: unsupported dtype");
  }
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(vol.pixdim[a]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 1;
  h.qform_code = 0;
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(vol.affine[c]);
    h.srow_y[c] = static_cast<float>(vol.affine[4 + c]);
    h.srow_z[c] = static_cast<float>(vol.affine[8 + c]);
  }
  std::memcpy(h.magic, "n+1", 4);

  const auto body = vol.data.permute({2, 1, 0}).contiguous();
  const char ext[4] = {0, 0, 0, 0};
  const auto nbytes = static_cast<size_t>(body.numel()) * body.element_size();

  if (ends_with_gz(path)) {
    GzFile file(path, "wb6");
    if (!file.f) throw std::runtime_error("nifti: cannot write " + path.string());
    bool ok = gzwrite(file.f, &h, sizeof(Header)) == static_cast<int>(sizeof(Header));
    ok = ok && gzwrite(file.f, ext, 4) == 4;
    const auto* p = static_cast<const char*>(body.data_ptr());
    size_t left = nbytes;
    while (ok && left > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<size_t>(left, 1u << 30));
      ok = gzwrite(file.f, p, chunk) == static_cast<int>(chunk);
      p += chunk;
      left -= chunk;
    }
    if (!ok) throw std::runtime_error("nifti: write failed for " + path.string());
  } else {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("nifti: cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(&h), sizeof(Header));
    out.write(ext, 4);
    out.write(static_cast<const char*>(body.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!out) throw std::runtime_error("nifti: write failed for " + path.string());
  }
}

Volume to_ras(const Volume& vol) {
  // For each array axis, the dominant world axis of its direction column and the sign.
  std::array<int, 3> world_of{};
  std::array<bool, 3> negative{};
  std::array<bool, 3> taken{false, false, false};
  for (int n = 0; n < 3; ++n) {
    int best = -1;
    double best_abs = -1.0;
    for (int w = 0; w < 3; ++w) {
      const double v = std::abs(vol.affine[w * 4 + n]);
      if (!taken[w] && v > best_abs) {
        best_abs = v;
        best = w;
      }
    }
    world_of[n] = best;
    taken[best] = true;
    negative[n] = vol.affine[best * 4 + n] < 0;
  }

  Volume out;
  out.affine = vol.affine;
  auto data = vol.data;
  // flip negative axes in array space first, fixing the affine translation
  for (int n = 0; n < 3; ++n) {
    if (!negative[n]) continue;
    data = data.flip({n});
    const double len = static_cast<double>(vol.data.size(n) - 1);
    for (int w = 0; w < 3; ++w) {
      out.affine[w * 4 + 3] += out.affine[w * 4 + n] * len;
      out.affine[w * 4 + n] = -out.affine[w * 4 + n];
    }
  }
  // permute so output axis w holds the array axis whose dominant world axis is w
  std::array<int64_t, 3> perm{};
  for (int n = 0; n < 3; ++n) perm[world_of[n]] = n;
  out.data = data.permute({perm[0], perm[1], perm[2]}).contiguous();
  std::array<double, 12> aff = out.affine;
  for (int w = 0; w < 3; ++w)
    for (int c = 0; c < 3; ++c) aff[w * 4 + c] = out.affine[w * 4 + perm[c]];
  out.affine = aff;
  for (int c = 0; c < 3; ++c) out.pixdim[c] = vol.pixdim[perm[c]];
  return out;
}

}  // namespace mtmed3d::nifti
