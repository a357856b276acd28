#include "mtmed3d/config.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include <yaml-cpp/yaml.h>

namespace mtmed3d::pipeline {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Multi: return "multi";
    case Variant::SegOnly: return "seg_only";
    case Variant::DetOnly: return "det_only";
    case Variant::ClsOnly: return "cls_only";
  }
  return "multi";
}

Variant variant_from_string(std::string_view s) {
  if (s == "multi") return Variant::Multi;
  if (s == "seg_only") return Variant::SegOnly;
  if (s == "det_only") return Variant::DetOnly;
  if (s == "cls_only") return Variant::ClsOnly;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

std::string_view to_string(Balance b) {
  switch (b) {
    case Balance::GradNorm: return "gradnorm";
    case Balance::Mgda: return "mgda";
    case Balance::Fixed: return "fixed";
  }
  return "gradnorm";
}

Balance balance_from_string(std::string_view s) {
  if (s == "gradnorm") return Balance::GradNorm;
  if (s == "mgda") return Balance::Mgda;
  if (s == "fixed") return Balance::Fixed;
  throw std::invalid_argument("unknown balance method '" + std::string(s) + "'");
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> v;
  auto add = [&](const std::string& prefix, const std::vector<std::string>& errs) {
    for (const auto& e : errs) v.push_back(prefix + e);
  };
  add("model.encoder: ", model.encoder.validate());
  add("model.detection: ", model.detection.validate());
  add("model.classification: ", model.classification.validate());
  add("data.augment: ", data.augment_cfg.validate());
  if (model.segmentation.out_channels != kNumRegions) v.emplace_back("model.segmentation.out_channels must be 3");
  if (optim.batch_size < 1) v.emplace_back("optim.batch_size must be >= 1");
  if (optim.epochs < 1) v.emplace_back("optim.epochs must be >= 1");
  if (optim.max_steps < 0) v.emplace_back("optim.max_steps must be >= 0");
  for (double lr : {optim.lr_encoder, optim.lr_seg, optim.lr_det, optim.lr_cls})
    if (!(lr > 0)) v.emplace_back("optim learning rates must be positive");
  if (optim.min_lr < 0) v.emplace_back("optim.min_lr must be >= 0");
  if (fold < 0 || fold >= 5) v.emplace_back("fold must lie in [0, 5)");
  if (data.split != "fold" && data.split != "all") v.emplace_back("data.split must be fold or all");
  if (balance.shared_params != "last" && balance.shared_params != "all")
    v.emplace_back("balance.shared_params must be last or all");
  if (balance.method != Balance::Fixed && model.variant != Variant::Multi)
    v.emplace_back("balance.method gradnorm/mgda requires model.variant multi");
  for (double w : balance.fixed_weights)
    if (w < 0) v.emplace_back("balance.fixed_weights must be non-negative");
  if (balance.l0_steps < 1) v.emplace_back("balance.l0_steps must be >= 1");
  const int64_t mult = model.encoder.patch_size * 16;
  for (auto c : data.crop)
    if (c <= 0 || c % mult != 0) v.emplace_back("data.crop must be positive multiples of " + std::to_string(mult));
  if (device != "cpu" && device.rfind("cuda", 0) != 0) v.emplace_back("device must be cpu or cuda[:n]");
  if (eval.hd_percentile < 0 || eval.hd_percentile > 100) v.emplace_back("eval.hd_percentile must lie in [0, 100]");
  if (log_every < 1 || eval.validate_every < 1) v.emplace_back("log_every and eval.validate_every must be >= 1");
  return v;
}

namespace {

// Decoding walks every known key and fails on leftovers, so typos surface early.
class Reader {
 public:
  Reader(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw std::invalid_argument(path_ + ": expected a mapping");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    if (!node_ || node_.IsNull()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw std::invalid_argument("unknown config key '" + prefix() + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!node_ || !node_[key]) return;
    try {
      out = node_[key].template as<T>();
    } catch (const YAML::Exception&) {
      throw std::invalid_argument("config key '" + prefix() + key + "' has the wrong type");
    }
  }
  template <typename T, size_t N>
  void get(const char* key, std::array<T, N>& out) {
    std::vector<T> v(out.begin(), out.end());
    get(key, v);
    if (v.size() != N) throw std::invalid_argument("config key '" + prefix() + key + "' needs " + std::to_string(N) + " values");
    std::copy(v.begin(), v.end(), out.begin());
  }
  template <typename E, typename Parse>
  void get_enum(const char* key, E& out, Parse parse) {
    std::string s;
    get(key, s);
    if (!s.empty()) out = parse(s);
  }
  Reader child(const char* key) {
    seen_.insert(key);
    return Reader(node_ ? node_[key] : YAML::Node(), prefix() + key);
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

void set_path(YAML::Node node, const std::vector<std::string>& parts, size_t i, const YAML::Node& value) {
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  if (!node[parts[i]] || !node[parts[i]].IsMap()) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
  set_path(node[parts[i]], parts, i + 1, value);
}

void set_path(YAML::Node root, const std::string& dotted, const YAML::Node& value) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty() || parts.front().empty()) throw std::invalid_argument("empty override key");
  set_path(root, parts, 0, value);
}

RunConfig decode(const YAML::Node& root) {
  RunConfig c;
  Reader r(root, "");
  r.get("seed", c.seed);
  r.get("fold", c.fold);
  r.get("device", c.device);
  r.get("output_dir", c.output_dir);
  r.get("log_every", c.log_every);
  {
    auto m = r.child("model");
    m.get_enum("variant", c.model.variant, variant_from_string);
    {
      auto e = m.child("encoder");
      auto& x = c.model.encoder;
      e.get("in_channels", x.in_channels);
      e.get("embed_dim", x.embed_dim);
      e.get("patch_size", x.patch_size);
      e.get("window_size", x.window_size);
      e.get("depths", x.depths);
      e.get("num_heads", x.num_heads);
      e.get("mlp_ratio", x.mlp_ratio);
      e.get("drop_path", x.drop_path);
    }
    {
      auto s = m.child("segmentation");
      s.get("out_channels", c.model.segmentation.out_channels);
    }
    {
      auto d = m.child("detection");
      auto& x = c.model.detection;
      d.get_enum("neck", x.neck, decoders::neck_from_string);
      d.get("neck_channels", x.neck_channels);
      d.get("anchor_scales", x.anchor_scales);
      d.get("subnet_depth", x.subnet_depth);
      d.get("group_norm_groups", x.group_norm_groups);
      d.get("iou_pos", x.iou_pos);
      d.get("iou_neg", x.iou_neg);
      d.get("nms_iou", x.nms_iou);
      d.get("score_threshold", x.score_threshold);
      d.get("pre_nms_top_k", x.pre_nms_top_k);
      d.get("max_detections", x.max_detections);
    }
    {
      auto k = m.child("classification");
      auto& x = c.model.classification;
      k.get("growth_rate", x.growth_rate);
      k.get("block_config", x.block_config);
      k.get("init_features", x.init_features);
      k.get("bn_size", x.bn_size);
      k.get_enum("input", x.input, decoders::cls_input_from_string);
      k.get("num_classes", x.num_classes);
      k.get_enum("norm", x.norm, decoders::norm_kind_from_string);
      k.get("norm_groups", x.norm_groups);
      k.get("detach_seg", x.detach_seg);
    }
  }
  {
    auto l = r.child("loss");
    auto& x = c.loss;
    l.get("dice_smooth", x.dice_smooth);
    l.get("focal_gamma", x.focal_gamma);
    l.get("focal_alpha", x.focal_alpha);
    l.get("smooth_l1_beta", x.smooth_l1_beta);
    l.get("det_focal_gamma", x.det_focal_gamma);
    l.get("det_focal_alpha", x.det_focal_alpha);
    l.get("det_objectness_weight", x.det_objectness_weight);
  }
  {
    auto o = r.child("optim");
    auto& x = c.optim;
    o.get("lr_encoder", x.lr_encoder);
    o.get("lr_seg", x.lr_seg);
    o.get("lr_det", x.lr_det);
    o.get("lr_cls", x.lr_cls);
    o.get("min_lr", x.min_lr);
    o.get("weight_decay", x.weight_decay);
    o.get("epochs", x.epochs);
    o.get("max_steps", x.max_steps);
    o.get("batch_size", x.batch_size);
    o.get("grad_clip", x.grad_clip);
  }
  {
    auto b = r.child("balance");
    auto& x = c.balance;
    b.get_enum("method", x.method, balance_from_string);
    b.get("alpha", x.alpha);
    b.get("lr_w", x.lr_w);
    b.get("l0_steps", x.l0_steps);
    b.get("shared_params", x.shared_params);
    b.get("fixed_weights", x.fixed_weights);
    b.get("mgda_max_iter", x.mgda_max_iter);
    b.get("mgda_tol", x.mgda_tol);
  }
  {
    auto d = r.child("data");
    auto& x = c.data;
    d.get("root", x.root);
    d.get("split", x.split);
    d.get("crop", x.crop);
    d.get("normalize", x.normalize);
    d.get("augment", x.augment);
    auto a = d.child("augment_cfg");
    auto& y = x.augment_cfg;
    a.get("flip_prob", y.flip_prob);
    a.get("rotate_prob", y.rotate_prob);
    a.get("rotate_axes", y.rotate_axes);
    std::array<double, 2> shift{y.intensity_shift_range.first, y.intensity_shift_range.second};
    std::array<double, 2> scale{y.intensity_scale_range.first, y.intensity_scale_range.second};
    a.get("intensity_shift_range", shift);
    a.get("intensity_scale_range", scale);
    y.intensity_shift_range = {shift[0], shift[1]};
    y.intensity_scale_range = {scale[0], scale[1]};
  }
  {
    auto e = r.child("eval");
    e.get("hd_percentile", c.eval.hd_percentile);
    e.get("validate_every", c.eval.validate_every);
    e.get("profile", c.eval.profile);
  }
  c.data.augment_cfg.crop_size = c.data.crop;
  c.data.augment_cfg.seed = c.seed;
  return c;
}

template <typename T>
YAML::Node seq(const T& values) {
  YAML::Node n(YAML::NodeType::Sequence);
  for (const auto& v : values) n.push_back(v);
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = yaml_text.empty() ? YAML::Node(YAML::NodeType::Map) : YAML::Load(yaml_text);
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override '" + o + "' is not key=value");
    set_path(root, o.substr(0, eq), YAML::Load(o.substr(eq + 1)));
  }
  auto cfg = decode(root);
  if (auto errs = cfg.validate(); !errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string to_yaml(const RunConfig& c) {
  YAML::Node n;
  n["seed"] = c.seed;
  n["fold"] = c.fold;
  n["device"] = c.device;
  n["output_dir"] = c.output_dir;
  n["log_every"] = c.log_every;
  auto m = n["model"];
  m["variant"] = std::string(to_string(c.model.variant));
  const auto& e = c.model.encoder;
  m["encoder"]["in_channels"] = e.in_channels;
  m["encoder"]["embed_dim"] = e.embed_dim;
  m["encoder"]["patch_size"] = e.patch_size;
  m["encoder"]["window_size"] = e.window_size;
  m["encoder"]["depths"] = seq(e.depths);
  m["encoder"]["num_heads"] = seq(e.num_heads);
  m["encoder"]["mlp_ratio"] = e.mlp_ratio;
  m["encoder"]["drop_path"] = e.drop_path;
  m["segmentation"]["out_channels"] = c.model.segmentation.out_channels;
  const auto& d = c.model.detection;
  m["detection"]["neck"] = std::string(decoders::to_string(d.neck));
  m["detection"]["neck_channels"] = d.neck_channels;
  YAML::Node scales(YAML::NodeType::Sequence);
  for (const auto& s : d.anchor_scales) scales.push_back(seq(s));
  m["detection"]["anchor_scales"] = scales;
  m["detection"]["subnet_depth"] = d.subnet_depth;
  m["detection"]["group_norm_groups"] = d.group_norm_groups;
  m["detection"]["iou_pos"] = d.iou_pos;
  m["detection"]["iou_neg"] = d.iou_neg;
  m["detection"]["nms_iou"] = d.nms_iou;
  m["detection"]["score_threshold"] = d.score_threshold;
  m["detection"]["pre_nms_top_k"] = d.pre_nms_top_k;
  m["detection"]["max_detections"] = d.max_detections;
  const auto& k = c.model.classification;
  m["classification"]["growth_rate"] = k.growth_rate;
  m["classification"]["block_config"] = seq(k.block_config);
  m["classification"]["init_features"] = k.init_features;
  m["classification"]["bn_size"] = k.bn_size;
  m["classification"]["input"] = std::string(decoders::to_string(k.input));
  m["classification"]["num_classes"] = k.num_classes;
  m["classification"]["norm"] = std::string(decoders::to_string(k.norm));
  m["classification"]["norm_groups"] = k.norm_groups;
  m["classification"]["detach_seg"] = k.detach_seg;
  const auto& l = c.loss;
  n["loss"]["dice_smooth"] = l.dice_smooth;
  n["loss"]["focal_gamma"] = l.focal_gamma;
  n["loss"]["focal_alpha"] = l.focal_alpha;
  n["loss"]["smooth_l1_beta"] = l.smooth_l1_beta;
  n["loss"]["det_focal_gamma"] = l.det_focal_gamma;
  n["loss"]["det_focal_alpha"] = l.det_focal_alpha;
  n["loss"]["det_objectness_weight"] = l.det_objectness_weight;
  const auto& o = c.optim;
  n["optim"]["lr_encoder"] = o.lr_encoder;
  n["optim"]["lr_seg"] = o.lr_seg;
  n["optim"]["lr_det"] = o.lr_det;
  n["optim"]["lr_cls"] = o.lr_cls;
  n["optim"]["min_lr"] = o.min_lr;
  n["optim"]["weight_decay"] = o.weight_decay;
  n["optim"]["epochs"] = o.epochs;
  n["optim"]["max_steps"] = o.max_steps;
  n["optim"]["batch_size"] = o.batch_size;
  n["optim"]["grad_clip"] = o.grad_clip;
  const auto& b = c.balance;
  n["balance"]["method"] = std::string(to_string(b.method));
  n["balance"]["alpha"] = b.alpha;
  n["balance"]["lr_w"] = b.lr_w;
  n["balance"]["l0_steps"] = b.l0_steps;
  n["balance"]["shared_params"] = b.shared_params;
  n["balance"]["fixed_weights"] = seq(b.fixed_weights);
  n["balance"]["mgda_max_iter"] = b.mgda_max_iter;
  n["balance"]["mgda_tol"] = b.mgda_tol;
  const auto& a = c.data.augment_cfg;
  n["data"]["root"] = c.data.root;
  n["data"]["split"] = c.data.split;
  n["data"]["crop"] = seq(c.data.crop);
  n["data"]["normalize"] = c.data.normalize;
  n["data"]["augment"] = c.data.augment;
  n["data"]["augment_cfg"]["flip_prob"] = seq(a.flip_prob);
  n["data"]["augment_cfg"]["rotate_prob"] = a.rotate_prob;
  n["data"]["augment_cfg"]["rotate_axes"] = seq(a.rotate_axes);
  n["data"]["augment_cfg"]["intensity_shift_range"] =
      seq(std::array<double, 2>{a.intensity_shift_range.first, a.intensity_shift_range.second});
  n["data"]["augment_cfg"]["intensity_scale_range"] =
      seq(std::array<double, 2>{a.intensity_scale_range.first, a.intensity_scale_range.second});
  n["eval"]["hd_percentile"] = c.eval.hd_percentile;
  n["eval"]["validate_every"] = c.eval.validate_every;
  n["eval"]["profile"] = c.eval.profile;
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << n;
  return std::string(out.c_str()) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_yaml(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace mtmed3d::pipeline
