#include "mtmed3d/model.hpp"

#include <sstream>
#include <stdexcept>

namespace mtmed3d::pipeline {

MultiTaskModelImpl::MultiTaskModelImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  encoder = register_module("encoder", encoder::SwinEncoder(cfg_.encoder));
  const auto v = cfg_.variant;
  if (v == Variant::Multi || v == Variant::SegOnly || v == Variant::ClsOnly)
    seg_head = register_module("seg_head", decoders::SegmentationDecoder(cfg_.encoder, cfg_.segmentation));
  if (v == Variant::Multi || v == Variant::DetOnly)
    det_head = register_module("det_head", decoders::DetectionDecoder(cfg_.encoder, cfg_.detection));
  if (v == Variant::Multi || v == Variant::ClsOnly)
    cls_head = register_module("cls_head", decoders::DenseNet3D(cfg_.classification));
}

ModelOutputs MultiTaskModelImpl::forward(const torch::Tensor& image) {
  ModelOutputs out;
  const auto pyr = encoder->forward(image);
  if (has_seg()) out.seg_logits = seg_head->forward(pyr);
  if (has_det()) out.det = det_head->forward(pyr);
  if (has_cls()) out.cls_logits = cls_head->forward(torch::sigmoid(out.seg_logits), image);
  return out;
}

std::vector<Task> MultiTaskModelImpl::trained_tasks() const {
  switch (cfg_.variant) {
    case Variant::Multi: return {Task::Seg, Task::Det, Task::Cls};
    case Variant::SegOnly: return {Task::Seg};
    case Variant::DetOnly: return {Task::Det};
    case Variant::ClsOnly: return {Task::Cls};
  }
  return {};
}

std::vector<std::pair<std::string, std::vector<torch::Tensor>>> MultiTaskModelImpl::parameter_groups() const {
  std::vector<std::pair<std::string, std::vector<torch::Tensor>>> g;
  g.emplace_back("encoder", encoder->parameters());
  if (has_seg()) g.emplace_back("seg_head", seg_head->parameters());
  if (has_det()) g.emplace_back("det_head", det_head->parameters());
  if (has_cls()) g.emplace_back("cls_head", cls_head->parameters());
  return g;
}

std::vector<torch::Tensor> MultiTaskModelImpl::shared_parameters(const std::string& which) const {
  if (which == "last") return encoder->last_stage_parameters();
  if (which == "all") return encoder->parameters();
  throw std::invalid_argument("shared_parameters: expected last or all");
}

MultiTaskModel build_model(const ModelConfig& cfg) { return MultiTaskModel(cfg); }

MultiTaskModel build_single_task(const ModelConfig& cfg, Task task) {
  auto c = cfg;
  c.variant = task == Task::Seg ? Variant::SegOnly : task == Task::Det ? Variant::DetOnly : Variant::ClsOnly;
  return MultiTaskModel(c);
}

std::vector<std::pair<std::string, std::vector<int64_t>>> weight_manifest(const torch::nn::Module& m) {
  std::vector<std::pair<std::string, std::vector<int64_t>>> out;
  for (const auto& p : m.named_parameters()) out.emplace_back(p.key(), p.value().sizes().vec());
  for (const auto& b : m.named_buffers()) out.emplace_back(b.key(), b.value().sizes().vec());
  return out;
}

std::string manifest_text(const std::vector<std::pair<std::string, std::vector<int64_t>>>& manifest) {
  std::ostringstream os;
  for (const auto& [name, shape] : manifest) {
    os << name << ' ';
    if (shape.empty()) os << "scalar";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << '\n';
  }
  return os.str();
}

}  // namespace mtmed3d::pipeline
