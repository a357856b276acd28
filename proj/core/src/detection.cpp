#include "mtmed3d/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mtmed3d::decoders {
namespace F = torch::nn::functional;

namespace {
// keeps exp() finite for wild regressions during early training
const double kMaxLogScale = std::log(1000.0 / 16.0);

torch::nn::Conv3d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
}
}  // namespace

std::string_view to_string(Neck n) { return n == Neck::PANet ? "panet" : "fpn"; }

Neck neck_from_string(std::string_view s) {
  if (s == "panet" || s == "PANet" || s == "PANET") return Neck::PANet;
  if (s == "fpn" || s == "FPN") return Neck::FPN;
  throw std::invalid_argument("unknown neck '" + std::string(s) + "' (expected fpn or panet)");
}

std::vector<std::string> DetectionHeadConfig::validate() const {
  std::vector<std::string> v;
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!unit(iou_pos) || !unit(iou_neg) || !unit(nms_iou) || !unit(score_threshold))
    v.emplace_back("detection thresholds must lie in [0,1]");
  if (iou_neg > iou_pos) v.emplace_back("iou_neg must not exceed iou_pos");
  if (neck_channels <= 0 || subnet_depth < 0 || group_norm_groups <= 0) v.emplace_back("invalid neck/subnet sizes");
  if (anchor_scales.size() != kNeckStages.size()) v.emplace_back("anchor_scales needs one list per neck level");
  for (const auto& s : anchor_scales) {
    if (s.empty() || s.size() != anchor_scales[0].size())
      v.emplace_back("every level needs the same non-zero number of anchor scales");
    for (double x : s)
      if (!(x > 0)) v.emplace_back("anchor scales must be positive");
  }
  if (max_detections <= 0 || pre_nms_top_k <= 0) v.emplace_back("max_detections and pre_nms_top_k must be positive");
  return v;
}

BoxF Anchor::box() const {
  BoxF b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = center[a] - size[a] / 2;
    b.hi[a] = center[a] + size[a] / 2;
  }
  return b;
}

double iou_3d(const BoxF& a, const BoxF& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) inter *= std::max(0.0, std::min(a.hi[k], b.hi[k]) - std::max(a.lo[k], b.lo[k]));
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou_3d(const BoundingBox3D& a, const BoundingBox3D& b) { return iou_3d(BoxF::from(a), BoxF::from(b)); }

torch::Tensor iou_3d(const torch::Tensor& boxes, const BoxF& b) {
  auto lo = boxes.slice(1, 0, 3);
  auto hi = boxes.slice(1, 3, 6);
  auto blo = torch::tensor({b.lo[0], b.lo[1], b.lo[2]}, boxes.options());
  auto bhi = torch::tensor({b.hi[0], b.hi[1], b.hi[2]}, boxes.options());
  auto inter = (torch::minimum(hi, bhi) - torch::maximum(lo, blo)).clamp_min(0).prod(1);
  auto va = (hi - lo).clamp_min(0).prod(1);
  auto uni = va + b.volume() - inter;
  return torch::where(uni > 0, inter / uni, torch::zeros_like(uni));
}

std::vector<std::vector<Anchor>> generate_anchors(const std::vector<Index3>& level_extents, const Index3& volume_extent,
                                                  const DetectionHeadConfig& cfg) {
  if (level_extents.size() != cfg.anchor_scales.size())
    throw std::invalid_argument("generate_anchors: one scale list per level required");
  std::vector<std::vector<Anchor>> out(level_extents.size());
  for (size_t l = 0; l < level_extents.size(); ++l) {
    const auto& ext = level_extents[l];
    Real3 stride{};
    for (int a = 0; a < 3; ++a) stride[a] = static_cast<double>(volume_extent[a]) / static_cast<double>(ext[a]);
    auto& level = out[l];
    level.reserve(static_cast<size_t>(ext[0] * ext[1] * ext[2]) * cfg.anchor_scales[l].size());
    for (int64_t i = 0; i < ext[0]; ++i)
      for (int64_t j = 0; j < ext[1]; ++j)
        for (int64_t k = 0; k < ext[2]; ++k)
          for (double scale : cfg.anchor_scales[l]) {
            Anchor a;
            a.center = {(i + 0.5) * stride[0], (j + 0.5) * stride[1], (k + 0.5) * stride[2]};
            a.size = {scale * stride[0], scale * stride[1], scale * stride[2]};
            level.push_back(a);
          }
  }
  return out;
}

torch::Tensor anchors_tensor(const std::vector<std::vector<Anchor>>& anchors) {
  int64_t n = 0;
  for (const auto& l : anchors) n += static_cast<int64_t>(l.size());
  auto t = torch::empty({n, 6}, torch::kDouble);
  auto acc = t.accessor<double, 2>();
  int64_t r = 0;
  for (const auto& l : anchors)
    for (const auto& a : l) {
      for (int k = 0; k < 3; ++k) {
        acc[r][k] = a.center[k];
        acc[r][3 + k] = a.size[k];
      }
      ++r;
    }
  return t;
}

torch::Tensor anchor_boxes(const torch::Tensor& anchors) {
  auto c = anchors.slice(1, 0, 3);
  auto s = anchors.slice(1, 3, 6);
  return torch::cat({c - s / 2, c + s / 2}, 1);
}

Deltas encode_box(const BoxF& gt, const Anchor& a) {
  const auto gc = gt.center();
  const auto gs = gt.size();
  Deltas d{};
  for (int k = 0; k < 3; ++k) {
    if (!(gs[k] > 0) || !(a.size[k] > 0)) throw std::invalid_argument("encode_box: non-positive box size");
    d[k] = (gc[k] - a.center[k]) / a.size[k];
    d[3 + k] = std::log(gs[k] / a.size[k]);
  }
  return d;
}

BoxF decode_box(const Deltas& d, const Anchor& a) {
  BoxF b;
  for (int k = 0; k < 3; ++k) {
    if (!(a.size[k] > 0)) throw std::invalid_argument("decode_box: non-positive anchor size");
    const double c = d[k] * a.size[k] + a.center[k];
    const double s = std::exp(d[3 + k]) * a.size[k];
    b.lo[k] = c - s / 2;
    b.hi[k] = c + s / 2;
  }
  return b;
}

torch::Tensor encode_boxes(const BoxF& gt, const torch::Tensor& anchors) {
  const auto gc = gt.center();
  const auto gs = gt.size();
  for (int k = 0; k < 3; ++k)
    if (!(gs[k] > 0)) throw std::invalid_argument("encode_boxes: non-positive box size");
  auto ac = anchors.slice(1, 0, 3);
  auto as = anchors.slice(1, 3, 6);
  auto gct = torch::tensor({gc[0], gc[1], gc[2]}, anchors.options());
  auto gst = torch::tensor({gs[0], gs[1], gs[2]}, anchors.options());
  return torch::cat({(gct - ac) / as, torch::log(gst / as)}, 1);
}

torch::Tensor decode_boxes(const torch::Tensor& deltas, const torch::Tensor& anchors) {
  auto ac = anchors.slice(1, 0, 3);
  auto as = anchors.slice(1, 3, 6);
  auto c = deltas.slice(1, 0, 3) * as + ac;
  auto s = torch::exp(deltas.slice(1, 3, 6).clamp_max(kMaxLogScale)) * as;
  return torch::cat({c - s / 2, c + s / 2}, 1);
}

torch::Tensor match_anchors(const torch::Tensor& anchors, const BoxF& gt, const DetectionHeadConfig& cfg) {
  auto ious = iou_3d(anchor_boxes(anchors.to(torch::kDouble)), gt);
  auto labels = torch::full({anchors.size(0)}, static_cast<int8_t>(AnchorLabel::Ignore), torch::kInt8);
  labels.masked_fill_(ious.lt(cfg.iou_neg), static_cast<int8_t>(AnchorLabel::Negative));
  labels.masked_fill_(ious.ge(cfg.iou_pos), static_cast<int8_t>(AnchorLabel::Positive));
  if (anchors.size(0) > 0) labels[ious.argmax().item<int64_t>()] = static_cast<int8_t>(AnchorLabel::Positive);
  return labels;
}

DetectionNeckImpl::DetectionNeckImpl(const encoder::EncoderConfig& enc, const DetectionHeadConfig& cfg)
    : neck_(cfg.neck) {
  const int64_t nc = cfg.neck_channels;
  lateral = register_module("lateral", torch::nn::ModuleList());
  fpn_out = register_module("fpn_out", torch::nn::ModuleList());
  for (int s : kNeckStages) {
    lateral->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(enc.stage_channels(s), nc, 1)));
    fpn_out->push_back(conv3(nc, nc));
  }
  if (neck_ == Neck::PANet) {
    pan_down = register_module("pan_down", torch::nn::ModuleList());
    pan_fuse = register_module("pan_fuse", torch::nn::ModuleList());
    for (size_t i = 0; i + 1 < kNeckStages.size(); ++i) {
      pan_down->push_back(conv3(nc, nc, 2));
      pan_fuse->push_back(conv3(2 * nc, nc));
    }
  }
}

std::vector<torch::Tensor> DetectionNeckImpl::forward(const encoder::FeaturePyramid& pyr) {
  const size_t L = kNeckStages.size();
  std::vector<torch::Tensor> lat(L), inner(L), P(L);
  for (size_t i = 0; i < L; ++i) lat[i] = conv(*lateral[i]->as<torch::nn::Conv3d>(), pyr.stages[kNeckStages[i]]);

  inner[L - 1] = lat[L - 1];
  for (size_t i = L - 1; i-- > 0;) {
    auto up = F::interpolate(inner[i + 1], F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{lat[i].size(2), lat[i].size(3), lat[i].size(4)})
                                               .mode(torch::kNearest));
    inner[i] = lat[i] + up;
  }
  for (size_t i = 0; i < L; ++i) P[i] = conv(*fpn_out[i]->as<torch::nn::Conv3d>(), inner[i]);
  if (neck_ == Neck::FPN) return P;

  std::vector<torch::Tensor> N(L);
  N[0] = P[0];
  for (size_t i = 0; i + 1 < L; ++i) {
    auto down = torch::relu(conv(*pan_down[i]->as<torch::nn::Conv3d>(), N[i]));
    N[i + 1] = torch::relu(conv(*pan_fuse[i]->as<torch::nn::Conv3d>(), torch::cat({down, P[i + 1]}, 1)));
  }
  return N;
}

DetectionSubnetsImpl::DetectionSubnetsImpl(const DetectionHeadConfig& cfg) : anchors_per_cell_(cfg.anchors_per_cell()) {
  const int64_t nc = cfg.neck_channels;
  const int64_t groups = std::gcd(nc, cfg.group_norm_groups);
  cls_convs = register_module("cls_convs", torch::nn::ModuleList());
  cls_norms = register_module("cls_norms", torch::nn::ModuleList());
  box_convs = register_module("box_convs", torch::nn::ModuleList());
  box_norms = register_module("box_norms", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.subnet_depth; ++i) {
    cls_convs->push_back(conv3(nc, nc));
    cls_norms->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, nc)));
    box_convs->push_back(conv3(nc, nc));
    box_norms->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, nc)));
  }
  cls_out = register_module("cls_out", conv3(nc, anchors_per_cell_));
  box_out = register_module("box_out", conv3(nc, 6 * anchors_per_cell_));

  torch::NoGradGuard g;
  for (auto& p : named_parameters()) {
    if (p.key().find("weight") != std::string::npos && p.value().dim() == 5) p.value().normal_(0.0, 0.01);
    if (p.key().find("bias") != std::string::npos && p.key().find("norm") == std::string::npos) p.value().zero_();
  }
  // prior probability 0.01 for the objectness logits
  cls_out->bias.fill_(-std::log(99.0));
}

torch::Tensor DetectionSubnetsImpl::first_block_normed(const torch::Tensor& level) {
  if (cls_convs->size() == 0) return level;
  return cls_norms[0]->as<torch::nn::GroupNorm>()->forward(conv(*cls_convs[0]->as<torch::nn::Conv3d>(), level));
}

DetectionOutputs DetectionSubnetsImpl::forward(const std::vector<torch::Tensor>& levels) {
  std::vector<torch::Tensor> logits, deltas;
  const int64_t A = anchors_per_cell_;
  for (const auto& level : levels) {
    auto c = level;
    auto b = level;
    for (size_t i = 0; i < cls_convs->size(); ++i) {
      c = torch::relu(cls_norms[i]->as<torch::nn::GroupNorm>()->forward(conv(*cls_convs[i]->as<torch::nn::Conv3d>(), c)));
      b = torch::relu(box_norms[i]->as<torch::nn::GroupNorm>()->forward(conv(*box_convs[i]->as<torch::nn::Conv3d>(), b)));
    }
    const auto B = level.size(0), d = level.size(2), h = level.size(3), w = level.size(4);
    logits.push_back(conv(cls_out, c).permute({0, 2, 3, 4, 1}).reshape({B, -1}));
    deltas.push_back(conv(box_out, b).view({B, A, 6, d, h, w}).permute({0, 3, 4, 5, 1, 2}).reshape({B, -1, 6}));
  }
  return {torch::cat(logits, 1), torch::cat(deltas, 1)};
}

DetectionDecoderImpl::DetectionDecoderImpl(const encoder::EncoderConfig& enc, DetectionHeadConfig cfg)
    : cfg_(std::move(cfg)) {
  if (auto errs = cfg_.validate(); !errs.empty()) throw std::invalid_argument("DetectionHeadConfig: " + errs.front());
  neck = register_module("neck", DetectionNeck(enc, cfg_));
  subnets = register_module("subnets", DetectionSubnets(cfg_));
}

DetectionOutputs DetectionDecoderImpl::forward(const encoder::FeaturePyramid& pyr) { return subnets(neck(pyr)); }

std::vector<Index3> neck_level_extents(const Index3& input_extent) {
  std::vector<Index3> out;
  for (int s : kNeckStages) {
    Index3 e{};
    for (int a = 0; a < 3; ++a) e[a] = input_extent[a] >> s;
    out.push_back(e);
  }
  return out;
}

std::vector<int64_t> nms_3d(const std::vector<BoxF>& boxes, const std::vector<double>& scores, double iou_thr) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms_3d: boxes and scores differ in length");
  std::vector<int64_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return scores[a] > scores[b]; });
  std::vector<int64_t> kept;
  for (int64_t i : order) {
    bool suppressed = false;
    for (int64_t k : kept)
      if (iou_3d(boxes[i], boxes[k]) > iou_thr) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<Detection> postprocess_detections(const torch::Tensor& logits, const torch::Tensor& deltas,
                                              const torch::Tensor& anchors, const Index3& volume_extent,
                                              const DetectionHeadConfig& cfg) {
  torch::NoGradGuard g;
  auto lg = logits.detach().reshape({-1}).to(torch::kDouble).cpu();
  auto dl = deltas.detach().reshape({-1, 6}).to(torch::kDouble).cpu();
  auto an = anchors.to(torch::kDouble).cpu();
  if (lg.size(0) != dl.size(0) || lg.size(0) != an.size(0))
    throw std::invalid_argument("postprocess_detections: logits, deltas and anchors are not aligned");

  auto scores = torch::sigmoid(lg);
  auto keep = scores.ge(cfg.score_threshold).nonzero().flatten();
  if (keep.numel() == 0) return {};
  auto kept_scores = scores.index_select(0, keep);
  if (keep.numel() > cfg.pre_nms_top_k) {
    auto top = kept_scores.topk(cfg.pre_nms_top_k);
    keep = keep.index_select(0, std::get<1>(top));
    kept_scores = std::get<0>(top);
  }
  auto boxes = decode_boxes(dl.index_select(0, keep), an.index_select(0, keep));
  for (int a = 0; a < 3; ++a) {
    boxes.select(1, a).clamp_(0.0, static_cast<double>(volume_extent[a]));
    boxes.select(1, 3 + a).clamp_(0.0, static_cast<double>(volume_extent[a]));
  }

  std::vector<BoxF> cand;
  std::vector<double> cand_scores;
  auto bacc = boxes.accessor<double, 2>();
  auto sacc = kept_scores.accessor<double, 1>();
  for (int64_t i = 0; i < boxes.size(0); ++i) {
    BoxF b;
    for (int a = 0; a < 3; ++a) {
      b.lo[a] = bacc[i][a];
      b.hi[a] = bacc[i][3 + a];
    }
    if (!b.well_ordered()) continue;
    cand.push_back(b);
    cand_scores.push_back(sacc[i]);
  }
  std::vector<Detection> out;
  for (int64_t i : nms_3d(cand, cand_scores, cfg.nms_iou)) {
    if (static_cast<int64_t>(out.size()) >= cfg.max_detections) break;
    out.push_back({cand[i], cand_scores[i]});
  }
  return out;
}

}  // namespace mtmed3d::decoders
