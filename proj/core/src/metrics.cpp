#include "mtmed3d/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mtmed3d/detection.hpp"
#include "mtmed3d/log.hpp"

namespace mtmed3d::metrics {

using nlohmann::json;

double dice_metric(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw std::invalid_argument("dice_metric: shapes differ");
  auto p = pred.to(torch::kBool);
  auto g = gt.to(torch::kBool);
  const auto inter = torch::logical_and(p, g).sum().item<int64_t>();
  const auto total = p.sum().item<int64_t>() + g.sum().item<int64_t>();
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

torch::Tensor boundary(const torch::Tensor& mask) {
  if (mask.dim() != 3) throw std::invalid_argument("boundary: expected a 3D mask");
  auto m = mask.to(torch::kBool);
  auto padded = torch::constant_pad_nd(m.to(torch::kUInt8), {1, 1, 1, 1, 1, 1}, 0).to(torch::kBool);
  const auto D = m.size(0), H = m.size(1), W = m.size(2);
  auto interior = m.clone();
  for (int a = 0; a < 3; ++a)
    for (int s : {0, 2}) {
      auto n = padded.narrow(0, a == 0 ? s : 1, D).narrow(1, a == 1 ? s : 1, H).narrow(2, a == 2 ? s : 1, W);
      interior = torch::logical_and(interior, n);
    }
  return torch::logical_and(m, torch::logical_not(interior));
}

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D lower envelope of parabolas over f (squared distances), in place.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int64_t>& v, std::vector<double>& z) {
  const int64_t n = static_cast<int64_t>(f.size());
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int64_t p = v[k];
      s = ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q - p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[k] = q;  // k == 0: the new parabola dominates everywhere
      z[k] = -kInf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
    }
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double dq = static_cast<double>(q - v[j]);
    d[q] = dq * dq + f[v[j]];
  }
}
}  // namespace

torch::Tensor squared_distance_transform(const torch::Tensor& sites) {
  if (sites.dim() != 3) throw std::invalid_argument("squared_distance_transform: expected a 3D tensor");
  auto s = sites.to(torch::kBool).contiguous();
  const int64_t n[3] = {s.size(0), s.size(1), s.size(2)};
  auto out = torch::where(s, torch::zeros(s.sizes(), torch::kDouble), torch::full(s.sizes(), kInf, torch::kDouble))
                 .contiguous();
  double* data = out.data_ptr<double>();
  const int64_t stride[3] = {n[1] * n[2], n[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t len = n[axis];
    std::vector<double> f(len), d(len), z(len + 1);
    std::vector<int64_t> v(len);
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int64_t i = 0; i < n[a1]; ++i)
      for (int64_t j = 0; j < n[a2]; ++j) {
        double* base = data + i * stride[a1] + j * stride[a2];
        for (int64_t q = 0; q < len; ++q) f[q] = base[q * stride[axis]];
        edt_1d(f, d, v, z);
        for (int64_t q = 0; q < len; ++q) base[q * stride[axis]] = d[q];
      }
  }
  return out;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile: empty sample");
  if (q < 0 || q > 100) throw std::invalid_argument("percentile: q must lie in [0, 100]");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

MaybeReal hausdorff(const torch::Tensor& pred, const torch::Tensor& gt, double q) {
  if (pred.sizes() != gt.sizes()) throw std::invalid_argument("hausdorff: shapes differ");
  auto bp = boundary(pred);
  auto bg = boundary(gt);
  if (!bp.any().item<bool>() || !bg.any().item<bool>()) return std::nullopt;
  auto directed = [&](const torch::Tensor& from, const torch::Tensor& to) {
    auto d2 = squared_distance_transform(to).masked_select(from).sqrt().contiguous();
    std::vector<double> v(d2.data_ptr<double>(), d2.data_ptr<double>() + d2.numel());
    return percentile(std::move(v), q);
  };
  return std::max(directed(bp, bg), directed(bg, bp));
}

ApResult average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BoxF>>& gts,
                           double iou_thr) {
  if (dets.size() != gts.size()) throw std::invalid_argument("average_precision: dets and gts cover different cases");
  struct Item {
    double score;
    size_t c, k;
  };
  std::vector<Item> items;
  size_t n_gt = 0;
  for (size_t c = 0; c < dets.size(); ++c) {
    n_gt += gts[c].size();
    for (size_t k = 0; k < dets[c].size(); ++k) items.push_back({dets[c][k].score, c, k});
  }
  if (n_gt == 0) {
    if (items.empty()) log::debug("average_precision: no gts and no detections, reported as 1");
    return items.empty() ? ApResult{1.0, 1.0} : ApResult{0.0, 1.0};
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(gts.size());
  for (size_t c = 0; c < gts.size(); ++c) used[c].assign(gts[c].size(), false);
  std::vector<double> precision, recall;
  size_t tp = 0;
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const auto& box = dets[it.c][it.k].box;
    double best = -1;
    size_t best_g = 0;
    for (size_t g = 0; g < gts[it.c].size(); ++g) {
      if (used[it.c][g]) continue;
      const double iou = decoders::iou_3d(box, gts[it.c][g]);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= 0 && best >= iou_thr - 1e-12) {
      used[it.c][best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  ApResult r;
  r.ar = recall.empty() ? 0.0 : recall.back();
  // precision envelope, then area over recall steps
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double prev = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    r.ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return r;
}

std::vector<double> sweep_thresholds() {
  std::vector<double> t;
  for (int k = 0; k <= 8; ++k) t.push_back((10.0 + 5.0 * k) / 100.0);
  return t;
}

MapSweep map_sweep(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BoxF>>& gts) {
  MapSweep m;
  const auto th = sweep_thresholds();
  for (double t : th) {
    const auto r = average_precision(dets, gts, t);
    m.map_sweep += r.ap;
    m.mar_sweep += r.ar;
  }
  m.map_sweep /= static_cast<double>(th.size());
  m.mar_sweep /= static_cast<double>(th.size());
  const auto r50 = average_precision(dets, gts, 0.5);
  m.map_50 = r50.ap;
  m.mar_50 = r50.ar;
  return m;
}

ClassificationMetrics classification_metrics(const std::vector<Grade>& pred, const std::vector<Grade>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("classification_metrics: length mismatch");
  ClassificationMetrics m;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == Grade::HGG, g = gt[i] == Grade::HGG;
    if (p && g) ++m.tp;
    else if (!p && !g) ++m.tn;
    else if (p) ++m.fp;
    else ++m.fn;
  }
  auto ratio = [](int64_t a, int64_t b) -> MaybeReal {
    return b > 0 ? MaybeReal(static_cast<double>(a) / static_cast<double>(b)) : std::nullopt;
  };
  m.acc = ratio(m.tp + m.tn, static_cast<int64_t>(pred.size()));
  m.sen = ratio(m.tp, m.tp + m.fn);
  m.spe = ratio(m.tn, m.tn + m.fp);
  return m;
}

int64_t serialized_size(torch::nn::Module& model) {
  torch::serialize::OutputArchive ar;
  model.save(ar);
  std::ostringstream os;
  ar.save_to(os);
  return static_cast<int64_t>(os.str().size());
}

Efficiency profile(torch::nn::Module& model, const std::function<void()>& forward_once, int repeats,
                   std::vector<profiling::MacRecord>* records) {
  if (repeats <= 0) throw std::invalid_argument("profile: repeats must be positive");
  torch::NoGradGuard g;
  Efficiency e;
  e.params = count_parameters(model);
  {
    profiling::MacRecorder rec;
    forward_once();
    e.macs = rec.total();
    if (records) *records = rec.records();
  }
  e.flops = 2 * e.macs;
  for (int i = 0; i < 5; ++i) forward_once();
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    forward_once();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  e.latency_s = percentile(t, 50.0);
  e.size_mb = static_cast<double>(serialized_size(model)) / (1024.0 * 1024.0);
  return e;
}

std::string mac_table_csv(const torch::nn::Module& root, const std::vector<profiling::MacRecord>& records) {
  std::map<const torch::nn::Module*, std::string> names;
  for (const auto& item : root.named_modules()) names[item.value().get()] = item.key();
  std::ostringstream os;
  os << "module,kind,macs\n";
  for (const auto& r : records) {
    auto it = names.find(r.module);
    os << (it == names.end() ? std::string("?") : (it->second.empty() ? std::string("<root>") : it->second)) << ','
       << r.kind << ',' << r.macs << '\n';
  }
  return os.str();
}

namespace {
json opt(const MaybeReal& v) { return v ? json(*v) : json(nullptr); }
MaybeReal opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}
const std::array<const char*, kNumRegions> kRegionKeys{"WT", "TC", "ET"};
}  // namespace

json MetricsReport::to_json() const {
  json j;
  json d = json::object(), h = json::object();
  for (int r = 0; r < kNumRegions; ++r) {
    d[kRegionKeys[r]] = opt(dice[r]);
    h[kRegionKeys[r]] = opt(hd[r]);
  }
  j["num_cases"] = num_cases;
  j["segmentation"] = {{"dice", d}, {"hd", h}, {"hd_percentile", hd_percentile}};
  j["classification"] = {{"acc", opt(acc)}, {"sen", opt(sen)}, {"spe", opt(spe)}};
  j["detection"] = {{"map_sweep", opt(map_sweep)}, {"map_50", opt(map_50)}, {"mar_sweep", opt(mar_sweep)},
                    {"mar_50", opt(mar_50)}};
  if (efficiency)
    j["efficiency"] = {{"params", efficiency->params},       {"macs", efficiency->macs},
                       {"flops", efficiency->flops},         {"latency_s", efficiency->latency_s},
                       {"size_mb", efficiency->size_mb}};
  else
    j["efficiency"] = nullptr;
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  if (auto errs = validate_report(j); !errs.empty()) throw std::invalid_argument("metrics report: " + errs.front());
  MetricsReport r;
  r.num_cases = j.at("num_cases").get<int64_t>();
  const auto& s = j.at("segmentation");
  for (int k = 0; k < kNumRegions; ++k) {
    r.dice[k] = opt_from(s.at("dice"), kRegionKeys[k]);
    r.hd[k] = opt_from(s.at("hd"), kRegionKeys[k]);
  }
  r.hd_percentile = s.at("hd_percentile").get<double>();
  const auto& c = j.at("classification");
  r.acc = opt_from(c, "acc");
  r.sen = opt_from(c, "sen");
  r.spe = opt_from(c, "spe");
  const auto& d = j.at("detection");
  r.map_sweep = opt_from(d, "map_sweep");
  r.map_50 = opt_from(d, "map_50");
  r.mar_sweep = opt_from(d, "mar_sweep");
  r.mar_50 = opt_from(d, "mar_50");
  if (!j.at("efficiency").is_null()) {
    const auto& e = j.at("efficiency");
    r.efficiency = Efficiency{e.at("params").get<int64_t>(), e.at("macs").get<int64_t>(), e.at("flops").get<int64_t>(),
                              e.at("latency_s").get<double>(), e.at("size_mb").get<double>()};
  }
  return r;
}

std::vector<std::string> validate_report(const json& j) {
  std::vector<std::string> v;
  if (!j.is_object()) return {"report must be an object"};
  auto need_obj = [&](const json& parent, const std::string& key, const std::string& path) -> const json* {
    if (!parent.contains(key) || !parent.at(key).is_object()) {
      v.push_back(path + key + ": missing object");
      return nullptr;
    }
    return &parent.at(key);
  };
  auto check_num = [&](const json& parent, const std::string& key, const std::string& path, double lo, double hi,
                       bool nullable) {
    if (!parent.contains(key)) {
      v.push_back(path + key + ": missing");
      return;
    }
    const auto& x = parent.at(key);
    if (x.is_null()) {
      if (!nullable) v.push_back(path + key + ": must not be null");
      return;
    }
    if (!x.is_number()) {
      v.push_back(path + key + ": must be a number or null");
      return;
    }
    const double d = x.get<double>();
    if (!(d >= lo && d <= hi)) v.push_back(path + key + ": out of range");
  };
  const double inf = std::numeric_limits<double>::infinity();
  if (!j.contains("num_cases") || !j.at("num_cases").is_number_integer() || j.at("num_cases").get<int64_t>() < 0)
    v.emplace_back("num_cases: must be a non-negative integer");
  if (const auto* s = need_obj(j, "segmentation", "")) {
    if (const auto* d = need_obj(*s, "dice", "segmentation."))
      for (const auto* k : kRegionKeys) check_num(*d, k, "segmentation.dice.", 0, 1, true);
    if (const auto* h = need_obj(*s, "hd", "segmentation."))
      for (const auto* k : kRegionKeys) check_num(*h, k, "segmentation.hd.", 0, inf, true);
    check_num(*s, "hd_percentile", "segmentation.", 0, 100, false);
  }
  if (const auto* c = need_obj(j, "classification", ""))
    for (const auto* k : {"acc", "sen", "spe"}) check_num(*c, k, "classification.", 0, 1, true);
  if (const auto* d = need_obj(j, "detection", ""))
    for (const auto* k : {"map_sweep", "map_50", "mar_sweep", "mar_50"}) check_num(*d, k, "detection.", 0, 1, true);
  if (!j.contains("efficiency")) {
    v.emplace_back("efficiency: missing (use null when not profiled)");
  } else if (!j.at("efficiency").is_null()) {
    const auto& e = j.at("efficiency");
    if (!e.is_object()) {
      v.emplace_back("efficiency: must be an object or null");
    } else {
      for (const auto* k : {"params", "macs", "flops"})
        if (!e.contains(k) || !e.at(k).is_number_integer() || e.at(k).get<int64_t>() < 0)
          v.push_back(std::string("efficiency.") + k + ": must be a non-negative integer");
      if (e.contains("params") && e.at("params").is_number_integer() && e.at("params").get<int64_t>() <= 0)
        v.emplace_back("efficiency.params: must be positive");
      check_num(e, "latency_s", "efficiency.", 0, inf, false);
      check_num(e, "size_mb", "efficiency.", 0, inf, false);
    }
  }
  return v;
}

}  // namespace mtmed3d::metrics
