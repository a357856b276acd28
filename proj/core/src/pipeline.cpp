#include "mtmed3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mtmed3d/log.hpp"
#include "mtmed3d/nifti.hpp"

namespace mtmed3d::pipeline {

using nlohmann::json;

std::vector<Fold> five_fold_split(const std::vector<Grade>& grades, uint64_t seed) {
  constexpr size_t K = 5;
  std::vector<Fold> folds(K);
  dataio::Rng rng(seed);
  for (Grade g : {Grade::HGG, Grade::LGG}) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < grades.size(); ++i)
      if (grades[i] == g) idx.push_back(i);
    if (idx.empty()) continue;
    if (idx.size() < K)
      throw std::invalid_argument("five_fold_split: grade " + std::string(to_string(g)) + " has fewer than 5 cases");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t k = 0; k < idx.size(); ++k) folds[k % K].val.push_back(idx[k]);
  }
  if (grades.empty()) throw std::invalid_argument("five_fold_split: no cases");
  for (auto& f : folds) {
    std::sort(f.val.begin(), f.val.end());
    for (size_t i = 0; i < grades.size(); ++i)
      if (!std::binary_search(f.val.begin(), f.val.end(), i)) f.train.push_back(i);
  }
  return folds;
}

double cosine_lr(double base, double min_lr, int64_t step, int64_t total) {
  if (total <= 0) return base;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(M_PI * t));
}

std::vector<dataio::ManifestEntry> synth_dataset(const fs::path& root, int64_t n, const dataio::PhantomSpec& spec,
                                                 uint64_t seed, bool balanced) {
  if (n <= 0) throw std::invalid_argument("synth_dataset: n must be positive");
  std::vector<dataio::ManifestEntry> entries;
  for (int64_t i = 0; i < n; ++i) {
    std::ostringstream id;
    id << "phantom_" << std::setw(3) << std::setfill('0') << i;
    dataio::Rng rng(dataio::case_seed(seed, id.str()));
    auto case_spec = spec;
    if (balanced) case_spec.et_absent_prob = i % 2 == 0 ? 0.0 : 1.0;
    auto s = dataio::synth_case(case_spec, rng, id.str());
    dataio::write_case(s, root);
    entries.push_back({s.case_id, s.grade, s.box});
  }
  dataio::write_manifest(root / dataio::kManifestName, entries);
  return entries;
}

VolumeSample prepare_sample(const VolumeSample& raw, const DataConfig& cfg, dataio::Rng* augment_rng) {
  const auto ext = raw.extent();
  for (int a = 0; a < 3; ++a)
    if (ext[a] < cfg.crop[a])
      throw std::invalid_argument("case " + raw.case_id + " is smaller than the configured crop");
  auto s = dataio::center_crop(raw, cfg.crop);
  if (cfg.normalize) s.image = dataio::normalize(s.image);
  if (augment_rng && cfg.augment) s = dataio::augment(s, cfg.augment_cfg, *augment_rng);
  return s;
}

torch::Tensor anchors_for(const Index3& extent, const decoders::DetectionHeadConfig& cfg) {
  return decoders::anchors_tensor(decoders::generate_anchors(decoders::neck_level_extents(extent), extent, cfg));
}

namespace {

torch::Device device_of(const RunConfig& cfg) { return torch::Device(cfg.device); }

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << s;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

torch::Tensor triple_tensor(const mtl::Triple& t) { return torch::tensor({t[0], t[1], t[2]}, torch::kDouble); }
mtl::Triple tensor_triple(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  return {c[0].item<double>(), c[1].item<double>(), c[2].item<double>()};
}

std::vector<VolumeSample> load_all(const fs::path& root, const std::vector<dataio::ManifestEntry>& entries) {
  std::vector<VolumeSample> out;
  for (const auto& e : entries) out.push_back(dataio::load_case(root, e.case_id));
  return out;
}

struct Batch {
  torch::Tensor image, mask, grades;
  std::vector<std::optional<BoxF>> boxes;
  std::vector<std::string> ids;
};

Batch make_batch(const std::vector<VolumeSample>& samples, torch::Device dev) {
  Batch b;
  std::vector<torch::Tensor> im, mk;
  std::vector<int64_t> gr;
  for (const auto& s : samples) {
    im.push_back(s.image.to(torch::kFloat));
    mk.push_back(s.mask.to(torch::kFloat));
    gr.push_back(static_cast<int64_t>(s.grade));
    b.boxes.push_back(s.usable ? std::optional<BoxF>(BoxF::from(s.box)) : std::nullopt);
    b.ids.push_back(s.case_id);
  }
  b.image = torch::stack(im).to(dev);
  b.mask = torch::stack(mk).to(dev);
  b.grades = torch::tensor(gr, torch::kLong).to(dev);
  return b;
}

std::string rng_state(const dataio::Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

double selection_score(const metrics::MetricsReport& r) {
  double dice = 0;
  int n = 0;
  for (const auto& d : r.dice)
    if (d) {
      dice += *d;
      ++n;
    }
  std::vector<double> parts;
  if (n) parts.push_back(dice / n);
  if (r.acc) parts.push_back(*r.acc);
  if (r.map_sweep) parts.push_back(*r.map_sweep);
  if (parts.empty()) return 0.0;
  return std::accumulate(parts.begin(), parts.end(), 0.0) / static_cast<double>(parts.size());
}

std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> split_cases(const RunConfig& cfg,
                                                                            std::vector<VolumeSample> all) {
  if (all.empty()) throw std::invalid_argument("no cases found under " + cfg.data.root);
  if (cfg.data.split == "all") return {all, all};
  std::vector<Grade> grades;
  for (const auto& s : all) grades.push_back(s.grade);
  const auto fold = five_fold_split(grades, cfg.seed).at(static_cast<size_t>(cfg.fold));
  std::vector<VolumeSample> tr, va;
  for (auto i : fold.train) tr.push_back(all[i]);
  for (auto i : fold.val) va.push_back(all[i]);
  return {tr, va};
}

}  // namespace

void save_checkpoint(const fs::path& path, MultiTaskModel& model, const CheckpointInfo& info,
                     torch::optim::Optimizer* optimizer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive ar, model_ar;
  model->save(model_ar);
  ar.write("model", model_ar);
  if (optimizer) {
    torch::serialize::OutputArchive opt_ar;
    optimizer->save(opt_ar);
    ar.write("optimizer", opt_ar);
  }
  ar.write("meta/config_yaml", c10::IValue(to_yaml(info.config)));
  ar.write("meta/config_hash", c10::IValue(config_hash(info.config)));
  ar.write("meta/rng", c10::IValue(info.rng_state));
  ar.write("meta/w", triple_tensor(info.weights.w));
  ar.write("meta/L0", triple_tensor(info.weights.L0));
  ar.write("meta/L0_sum", triple_tensor(info.weights.L0_sum));
  ar.write("meta/alpha", torch::tensor(info.weights.alpha, torch::kDouble));
  ar.write("meta/counters", torch::tensor({info.epoch, info.step, info.weights.step, info.weights.L0_count,
                                           info.weights.l0_steps},
                                          torch::kLong));
  ar.save_to(path.string());
  write_text(fs::path(path.string() + ".manifest.txt"), manifest_text(weight_manifest(*model)));
}

MultiTaskModel load_checkpoint(const fs::path& path, CheckpointInfo* info, torch::optim::Optimizer* optimizer) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  ar.load_from(path.string());
  c10::IValue yaml, hash, rng;
  ar.read("meta/config_yaml", yaml);
  ar.read("meta/config_hash", hash);
  ar.read("meta/rng", rng);
  CheckpointInfo local;
  auto& ci = info ? *info : local;
  ci.config = parse_config(yaml.toStringRef());
  ci.config_hash = hash.toStringRef();
  ci.rng_state = rng.toStringRef();
  if (config_hash(ci.config) != ci.config_hash) log::warn("checkpoint config hash differs from its stored config");
  torch::Tensor w, L0, L0s, alpha, counters;
  ar.read("meta/w", w);
  ar.read("meta/L0", L0);
  ar.read("meta/L0_sum", L0s);
  ar.read("meta/alpha", alpha);
  ar.read("meta/counters", counters);
  ci.weights.w = tensor_triple(w);
  ci.weights.L0 = tensor_triple(L0);
  ci.weights.L0_sum = tensor_triple(L0s);
  ci.weights.alpha = alpha.item<double>();
  ci.epoch = counters[0].item<int64_t>();
  ci.step = counters[1].item<int64_t>();
  ci.weights.step = counters[2].item<int64_t>();
  ci.weights.L0_count = counters[3].item<int64_t>();
  ci.weights.l0_steps = counters[4].item<int64_t>();

  auto model = build_model(ci.config.model);
  torch::serialize::InputArchive model_ar;
  ar.read("model", model_ar);
  model->load(model_ar);
  model->to(device_of(ci.config));
  if (optimizer) {
    torch::serialize::InputArchive opt_ar;
    ar.read("optimizer", opt_ar);
    optimizer->load(opt_ar);
  }
  return model;
}

TrainResult train(const RunConfig& cfg, const TrainHooks& hooks) {
  const fs::path root = cfg.data.root;
  auto all = load_all(root, dataio::list_cases(root));
  auto [tr, va] = split_cases(cfg, std::move(all));
  return train_on(cfg, tr, va, hooks);
}

TrainResult train_on(const RunConfig& cfg, const std::vector<VolumeSample>& train_cases,
                     const std::vector<VolumeSample>& val_cases, const TrainHooks& hooks) {
  if (auto errs = cfg.validate(); !errs.empty()) throw std::invalid_argument("train: " + errs.front());
  if (train_cases.empty()) throw std::invalid_argument("train: empty training set");
  const auto dev = device_of(cfg);
  const fs::path out_dir = cfg.output_dir;
  fs::create_directories(out_dir);
  write_text(out_dir / "config.yaml", to_yaml(cfg));

  torch::manual_seed(cfg.seed);
  dataio::Rng rng(cfg.seed);
  auto model = build_model(cfg.model);
  model->to(dev);

  const std::map<std::string, double> base_lr{{"encoder", cfg.optim.lr_encoder},
                                              {"seg_head", cfg.optim.lr_seg},
                                              {"det_head", cfg.optim.lr_det},
                                              {"cls_head", cfg.optim.lr_cls}};
  std::vector<torch::optim::OptimizerParamGroup> groups;
  std::vector<double> group_base;
  for (auto& [name, params] : model->parameter_groups()) {
    const double lr = base_lr.at(name);
    groups.emplace_back(params, std::make_unique<torch::optim::AdamWOptions>(
                                    torch::optim::AdamWOptions(lr).weight_decay(cfg.optim.weight_decay)));
    group_base.push_back(lr);
  }
  torch::optim::AdamW optimizer(std::move(groups));

  const auto tasks = model->trained_tasks();
  auto trains = [&](Task t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
  const auto anchors = model->has_det() ? anchors_for(cfg.data.crop, cfg.model.detection) : torch::Tensor();
  const auto shared = model->shared_parameters(cfg.balance.shared_params);

  mtl::TaskWeights tw;
  tw.alpha = cfg.balance.alpha;
  tw.l0_steps = cfg.balance.l0_steps;
  if (cfg.balance.method == Balance::Fixed) tw.w = cfg.balance.fixed_weights;

  const int64_t B = cfg.optim.batch_size;
  const int64_t n = static_cast<int64_t>(train_cases.size());
  const int64_t steps_per_epoch = (n + B - 1) / B;
  const int64_t total = cfg.optim.max_steps > 0 ? cfg.optim.max_steps : cfg.optim.epochs * steps_per_epoch;

  TrainResult result;
  result.log_csv = out_dir / "train_log.csv";
  result.best_checkpoint = out_dir / "best.pt";
  result.last_checkpoint = out_dir / "last.pt";
  std::ofstream log_file(result.log_csv);
  log_file << kTrainLogHeader << '\n';
  log_file.precision(10);

  auto validate_now = [&](int64_t epoch, int64_t step) {
    const auto& cases = val_cases.empty() ? train_cases : val_cases;
    std::vector<VolumeSample> prepared;
    for (const auto& c : cases) prepared.push_back(prepare_sample(c, cfg.data));
    const auto report = evaluate_model(model, cfg, prepared);
    const double score = selection_score(report);
    log::info("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
              " validation score " + std::to_string(score));
    if (score > result.best_score) {
      result.best_score = score;
      save_checkpoint(result.best_checkpoint, model, {cfg, tw, epoch, step, config_hash(cfg), rng_state(rng)});
    }
  };

  std::vector<size_t> order(train_cases.size());
  std::iota(order.begin(), order.end(), 0);
  int64_t step = 0, epoch = 0;
  while (step < total) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t start = 0; start < n && step < total; start += B) {
      std::vector<VolumeSample> samples;
      for (int64_t i = start; i < std::min(n, start + B); ++i)
        samples.push_back(prepare_sample(train_cases[order[i]], cfg.data, &rng));
      const auto batch = make_batch(samples, dev);

      for (size_t g = 0; g < optimizer.param_groups().size(); ++g)
        static_cast<torch::optim::AdamWOptions&>(optimizer.param_groups()[g].options())
            .lr(cosine_lr(group_base[g], cfg.optim.min_lr, step, total));

      model->train();
      auto out = model->forward(batch.image);
      torch::Tensor L_seg, L_cls, L_det;
      if (trains(Task::Seg)) L_seg = losses::dice_loss(torch::sigmoid(out.seg_logits), batch.mask, cfg.loss.dice_smooth);
      if (trains(Task::Cls))
        L_cls = losses::focal_loss(out.cls_logits, batch.grades, cfg.loss.focal_gamma, cfg.loss.focal_alpha);
      if (trains(Task::Det)) {
        std::vector<torch::Tensor> per;
        for (size_t b = 0; b < batch.boxes.size(); ++b) {
          if (!batch.boxes[b]) continue;
          per.push_back(losses::detection_loss(out.det.logits[b], out.det.deltas[b], anchors, *batch.boxes[b],
                                               cfg.model.detection, cfg.loss)
                            .total);
        }
        L_det = per.empty() ? out.det.logits.sum() * 0.0 : torch::stack(per).mean();
      }
      const std::array<torch::Tensor, 3> parts{L_seg, L_cls, L_det};
      mtl::Triple values{};
      bool finite = true;
      for (int i = 0; i < 3; ++i) {
        values[i] = parts[i].defined() ? parts[i].item<double>() : 0.0;
        finite = finite && std::isfinite(values[i]);
      }
      if (!finite) {
        json dump = {{"step", step},       {"epoch", epoch},     {"cases", batch.ids},
                     {"L_seg", values[0]}, {"L_cls", values[1]}, {"L_det", values[2]},
                     {"w", tw.w}};
        write_text(out_dir / "nonfinite_dump.json", dump.dump(2));
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + "; see " +
                                 (out_dir / "nonfinite_dump.json").string());
      }

      StepRecord rec;
      rec.step = step;
      rec.L_seg = values[0];
      rec.L_cls = values[1];
      rec.L_det = values[2];
      mtl::Triple unweighted{};
      if (cfg.balance.method == Balance::GradNorm) {
        mtl::grad_norms(parts, tw.w, shared, &unweighted);
      } else if (cfg.balance.method == Balance::Mgda) {
        std::vector<torch::Tensor> g;
        for (const auto& p : parts) g.push_back(mtl::flat_grad(p, shared));
        const auto m = mtl::mgda_minnorm(g, cfg.balance.mgda_max_iter, cfg.balance.mgda_tol);
        tw.w = {m.coeffs[0], m.coeffs[1], m.coeffs[2]};
      }
      rec.w = tw.w;

      auto bundle = losses::total_loss(L_seg, L_cls, L_det, tw.w);
      rec.L_total = bundle.L_total.item<double>();
      optimizer.zero_grad();
      bundle.L_total.backward();
      if (cfg.optim.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.optim.grad_clip);
      optimizer.step();

      if (cfg.balance.method == Balance::GradNorm) rec.L_grad = mtl::gradnorm_step(tw, values, unweighted, cfg.balance.lr_w).L_grad;
      rec.lr = cosine_lr(cfg.optim.lr_encoder, cfg.optim.min_lr, step, total);

      log_file << rec.step << ',' << rec.L_seg << ',' << rec.L_cls << ',' << rec.L_det << ',' << rec.w[0] << ','
               << rec.w[1] << ',' << rec.w[2] << ',' << rec.L_grad << ',' << rec.lr << '\n';
      if (step % cfg.log_every == 0)
        log::debug("step " + std::to_string(step) + " L_seg " + std::to_string(rec.L_seg) + " L_cls " +
                   std::to_string(rec.L_cls) + " L_det " + std::to_string(rec.L_det));
      result.log.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      ++step;
    }
    ++epoch;
    if (epoch % cfg.eval.validate_every == 0 || step >= total) validate_now(epoch, step);
  }
  log_file.flush();
  save_checkpoint(result.last_checkpoint, model, {cfg, tw, epoch, step, config_hash(cfg), rng_state(rng)}, &optimizer);
  result.steps = step;
  result.weights = tw;
  return result;
}

metrics::MetricsReport evaluate_model(MultiTaskModel& model, const RunConfig& cfg,
                                      const std::vector<VolumeSample>& cases, std::vector<CaseOutput>* outputs) {
  if (cases.empty()) throw std::invalid_argument("evaluate: empty split");
  torch::NoGradGuard ng;
  const bool was_training = model->is_training();
  model->eval();
  const auto dev = device_of(cfg);

  metrics::MetricsReport rep;
  rep.num_cases = static_cast<int64_t>(cases.size());
  rep.hd_percentile = cfg.eval.hd_percentile;
  std::array<std::vector<double>, kNumRegions> dice, hd;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<BoxF>> gts;
  std::vector<Grade> pred_grades, gt_grades;
  torch::Tensor anchors;

  for (const auto& s : cases) {
    const auto ext = s.extent();
    auto out = model->forward(s.image.to(torch::kFloat).unsqueeze(0).to(dev));
    CaseOutput co;
    co.case_id = s.case_id;
    co.gt_grade = s.grade;
    if (s.usable) co.gt_box = BoxF::from(s.box);
    if (model->has_seg()) {
      co.seg_mask = (torch::sigmoid(out.seg_logits[0]) > 0.5).to(torch::kUInt8).cpu();
      for (int r = 0; r < kNumRegions; ++r) {
        dice[r].push_back(metrics::dice_metric(co.seg_mask[r], s.mask[r]));
        if (auto h = metrics::hausdorff(co.seg_mask[r], s.mask[r], cfg.eval.hd_percentile)) hd[r].push_back(*h);
      }
    }
    if (model->has_det()) {
      if (!anchors.defined() || anchors.size(0) == 0) anchors = anchors_for(ext, cfg.model.detection);
      co.detections =
          decoders::postprocess_detections(out.det.logits[0], out.det.deltas[0], anchors, ext, cfg.model.detection);
      dets.push_back(co.detections);
      gts.push_back(co.gt_box ? std::vector<BoxF>{*co.gt_box} : std::vector<BoxF>{});
    }
    if (model->has_cls()) {
      co.grade = decoders::classify(out.cls_logits).front();
      pred_grades.push_back(co.grade->label());
      gt_grades.push_back(s.grade);
    }
    if (outputs) outputs->push_back(std::move(co));
  }
  auto mean = [](const std::vector<double>& v) -> metrics::MaybeReal {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  for (int r = 0; r < kNumRegions; ++r) {
    rep.dice[r] = mean(dice[r]);
    rep.hd[r] = mean(hd[r]);
  }
  if (model->has_det()) {
    const auto m = metrics::map_sweep(dets, gts);
    rep.map_sweep = m.map_sweep;
    rep.map_50 = m.map_50;
    rep.mar_sweep = m.mar_sweep;
    rep.mar_50 = m.mar_50;
  }
  if (model->has_cls()) {
    const auto c = metrics::classification_metrics(pred_grades, gt_grades);
    rep.acc = c.acc;
    rep.sen = c.sen;
    rep.spe = c.spe;
  }
  if (was_training) model->train();
  return rep;
}

metrics::MetricsReport evaluate(const fs::path& checkpoint, const std::string& split, const fs::path& report_path,
                                const std::optional<std::string>& data_root) {
  CheckpointInfo info;
  auto model = load_checkpoint(checkpoint, &info);
  auto cfg = info.config;
  if (data_root) cfg.data.root = *data_root;
  const fs::path root = cfg.data.root;
  auto all = load_all(root, dataio::list_cases(root));
  auto [tr, va] = split_cases(cfg, std::move(all));
  std::vector<VolumeSample> chosen;
  if (split == "train") chosen = tr;
  else if (split == "val") chosen = va;
  else if (split == "all") {
    chosen = tr;
    if (cfg.data.split != "all") chosen.insert(chosen.end(), va.begin(), va.end());
  } else {
    throw std::invalid_argument("evaluate: split must be train, val or all");
  }
  if (chosen.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<VolumeSample> prepared;
  for (const auto& c : chosen) prepared.push_back(prepare_sample(c, cfg.data));
  auto rep = evaluate_model(model, cfg, prepared);
  if (cfg.eval.profile) rep.efficiency = profile_model(cfg.model, cfg.data.crop, 5).efficiency;
  if (!report_path.empty()) write_text(report_path, rep.to_json().dump(2) + "\n");
  return rep;
}

json detections_json(const std::string& case_id, const std::optional<GradePrediction>& grade,
                     const std::vector<Detection>& dets) {
  json j;
  j["case_id"] = case_id;
  if (grade) {
    j["grade"] = std::string(to_string(grade->label()));
    j["grade_probability"] = grade->probability;
  } else {
    j["grade"] = nullptr;
    j["grade_probability"] = nullptr;
  }
  j["detections"] = json::array();
  for (const auto& d : dets)
    j["detections"].push_back({{"lo", d.box.lo}, {"hi", d.box.hi}, {"score", d.score}});
  return j;
}

InferResult infer(const fs::path& checkpoint, const fs::path& data_root, const std::string& case_id,
                  const fs::path& out_dir) {
  CheckpointInfo info;
  auto model = load_checkpoint(checkpoint, &info);
  const auto raw = dataio::load_case(data_root, case_id);
  const auto prepared = prepare_sample(raw, info.config.data);
  std::vector<CaseOutput> outs;
  evaluate_model(model, info.config, {prepared}, &outs);
  auto& co = outs.front();
  const auto off = dataio::center_crop_offsets(raw.extent(), info.config.data.crop);

  InferResult r;
  r.case_id = case_id;
  r.grade = co.grade;
  for (auto d : co.detections) {
    for (int a = 0; a < 3; ++a) {
      d.box.lo[a] += static_cast<double>(off[a]);
      d.box.hi[a] += static_cast<double>(off[a]);
    }
    r.detections.push_back(d);
  }
  fs::create_directories(out_dir);
  if (co.seg_mask.defined()) {
    auto full = torch::zeros({kNumRegions, raw.extent()[0], raw.extent()[1], raw.extent()[2]}, torch::kUInt8);
    auto m = co.seg_mask.clone();
    m[1].mul_(m[0]);  // enforce ET in TC in WT before relabelling
    m[2].mul_(m[1]);
    const auto& c = info.config.data.crop;
    full.narrow(1, off[0], c[0]).narrow(2, off[1], c[1]).narrow(3, off[2], c[2]).copy_(m);
    nifti::Volume v;
    v.data = dataio::ungroup_labels(full);
    r.seg_path = out_dir / (case_id + "_pred_seg.nii.gz");
    nifti::write(r.seg_path, v);
  }
  r.detections_path = out_dir / (case_id + "_detections.json");
  write_text(r.detections_path, detections_json(case_id, r.grade, r.detections).dump(2) + "\n");
  return r;
}

ProfileResult profile_model(const ModelConfig& cfg, const Index3& extent, int repeats) {
  auto model = build_model(cfg);
  model->eval();
  auto x = torch::randn({1, cfg.encoder.in_channels, extent[0], extent[1], extent[2]});
  std::vector<profiling::MacRecord> records;
  ProfileResult r;
  r.efficiency = metrics::profile(*model, [&] { model->forward(x); }, repeats, &records);
  r.mac_csv = metrics::mac_table_csv(*model, records);
  return r;
}

std::vector<AblationRun> ablate(const RunConfig& base) {
  std::vector<AblationRun> runs;
  json summary = json::array();
  for (auto neck : {decoders::Neck::FPN, decoders::Neck::PANet})
    for (auto bal : {Balance::GradNorm, Balance::Mgda}) {
      AblationRun run;
      run.neck = neck;
      run.balance = bal;
      run.name = std::string(decoders::to_string(neck)) + "_" + std::string(to_string(bal));
      auto cfg = base;
      cfg.model.variant = Variant::Multi;
      cfg.model.detection.neck = neck;
      cfg.balance.method = bal;
      run.dir = fs::path(base.output_dir) / run.name;
      cfg.output_dir = run.dir.string();
      log::info("ablation run " + run.name);
      const auto tr = train(cfg);
      run.report = evaluate(tr.best_checkpoint, "val", run.dir / "report.json", cfg.data.root);
      summary.push_back({{"name", run.name},
                         {"neck", std::string(decoders::to_string(neck))},
                         {"balance", std::string(to_string(bal))},
                         {"report", run.report.to_json()}});
      runs.push_back(std::move(run));
    }
  write_text(fs::path(base.output_dir) / "ablation.json", summary.dump(2) + "\n");
  return runs;
}

}  // namespace mtmed3d::pipeline
