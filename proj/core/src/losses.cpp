#include "mtmed3d/losses.hpp"

#include <stdexcept>

#include "mtmed3d/log.hpp"

namespace mtmed3d::losses {

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth) {
  if (probs.sizes() != target.sizes()) throw std::invalid_argument("dice_loss: probs and target shapes differ");
  if (probs.dim() < 2) throw std::invalid_argument("dice_loss: expected a channel axis");
  auto p = probs.dim() == 4 ? probs.unsqueeze(0) : probs;
  auto g = (target.dim() == 4 ? target.unsqueeze(0) : target).to(p.dtype());
  std::vector<int64_t> axes{0};
  for (int64_t a = 2; a < p.dim(); ++a) axes.push_back(a);
  auto inter = (p * g).sum(axes);
  auto denom = p.sum(axes) + g.sum(axes);
  return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean();
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& target, double gamma, double alpha) {
  if (logits.dim() != 2 || logits.size(1) != 2) throw std::invalid_argument("focal_loss: logits must be [B, 2]");
  auto t = target.to(torch::kLong).reshape({-1});
  if (t.size(0) != logits.size(0)) throw std::invalid_argument("focal_loss: target length differs from batch");
  auto logp = torch::log_softmax(logits, 1).gather(1, t.unsqueeze(1)).squeeze(1);
  auto pt = logp.exp();
  auto at = torch::where(t.eq(static_cast<int64_t>(Grade::HGG)), torch::full_like(pt, alpha),
                         torch::full_like(pt, 1.0 - alpha));
  return (-at * (1.0 - pt).pow(gamma) * logp).mean();
}

torch::Tensor sigmoid_focal_loss_sum(const torch::Tensor& logits, const torch::Tensor& target, double gamma,
                                     double alpha) {
  auto t = target.to(logits.dtype());
  auto p = torch::sigmoid(logits);
  auto ce = torch::binary_cross_entropy_with_logits(logits, t, {}, {}, at::Reduction::None);
  auto pt = p * t + (1 - p) * (1 - t);
  auto at = alpha * t + (1 - alpha) * (1 - t);
  return (at * (1 - pt).pow(gamma) * ce).sum();
}

torch::Tensor smooth_l1(const torch::Tensor& pred, const torch::Tensor& target, double beta) {
  if (pred.sizes() != target.sizes()) throw std::invalid_argument("smooth_l1: pred and target shapes differ");
  if (!(beta > 0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  if (pred.numel() == 0) {
    log::warn("smooth_l1: empty positive set, loss is zero");
    return (pred.sum() * 0.0).to(pred.dtype());
  }
  auto x = (pred - target).abs();
  return torch::where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta).mean();
}

DetectionLossParts detection_loss(const torch::Tensor& logits, const torch::Tensor& deltas,
                                  const torch::Tensor& anchors, const BoxF& gt, const decoders::DetectionHeadConfig& det,
                                  const LossConfig& cfg) {
  auto lg = logits.reshape({-1});
  auto dl = deltas.reshape({-1, 6});
  if (lg.size(0) != anchors.size(0) || dl.size(0) != anchors.size(0))
    throw std::invalid_argument("detection_loss: outputs are not aligned with the anchors");
  auto labels = decoders::match_anchors(anchors, gt, det).to(lg.device());
  auto pos = labels.eq(static_cast<int8_t>(decoders::AnchorLabel::Positive));
  auto valid = labels.ne(static_cast<int8_t>(decoders::AnchorLabel::Ignore));
  auto pos_idx = pos.nonzero().flatten();

  DetectionLossParts out;
  out.num_positive = pos_idx.size(0);
  auto target_deltas =
      decoders::encode_boxes(gt, anchors.index_select(0, pos_idx.cpu()).to(torch::kDouble)).to(dl.options());
  out.box = smooth_l1(dl.index_select(0, pos_idx), target_deltas, cfg.smooth_l1_beta);
  auto valid_idx = valid.nonzero().flatten();
  out.objectness = sigmoid_focal_loss_sum(lg.index_select(0, valid_idx), pos.index_select(0, valid_idx),
                                          cfg.det_focal_gamma, cfg.det_focal_alpha) /
                   static_cast<double>(std::max<int64_t>(1, out.num_positive));
  out.total = out.box + cfg.det_objectness_weight * out.objectness;
  return out;
}

std::array<double, kNumTasks> LossBundle::values() const {
  auto v = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
  return {v(L_seg), v(L_cls), v(L_det)};
}

LossBundle total_loss(const torch::Tensor& L_seg, const torch::Tensor& L_cls, const torch::Tensor& L_det,
                      const torch::Tensor& weights) {
  if (weights.numel() != kNumTasks) throw std::invalid_argument("total_loss: expected three weights");
  LossBundle b{L_seg, L_cls, L_det, {}};
  auto parts = b.parts();
  for (int i = 0; i < kNumTasks; ++i) {
    if (!parts[i].defined()) continue;
    auto term = weights[i] * parts[i];
    b.L_total = b.L_total.defined() ? b.L_total + term : term;
  }
  if (!b.L_total.defined()) b.L_total = torch::zeros({}, weights.options());
  return b;
}

LossBundle total_loss(const torch::Tensor& L_seg, const torch::Tensor& L_cls, const torch::Tensor& L_det,
                      const std::array<double, kNumTasks>& weights) {
  auto opts = L_seg.defined() ? L_seg.options() : L_cls.defined() ? L_cls.options()
                                                : L_det.defined() ? L_det.options()
                                                                  : torch::TensorOptions(torch::kFloat);
  return total_loss(L_seg, L_cls, L_det, torch::tensor({weights[0], weights[1], weights[2]}, opts));
}

}  // namespace mtmed3d::losses
