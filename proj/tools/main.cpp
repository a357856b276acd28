#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "mtmed3d/log.hpp"
#include "mtmed3d/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mtmed3d;
using nlohmann::json;

namespace {

struct Common {
  std::optional<uint64_t> seed;
  std::optional<int> fold;
  std::optional<std::string> device;
  std::string log_level = "info";
};

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::string> output;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.config, "YAML run config (defaults when omitted)");
  cmd->add_option("-s,--set", a.overrides, "override, e.g. optim.max_steps=200")->take_all();
  cmd->add_option("-o,--output", a.output, "output directory");
}

pipeline::RunConfig resolve(const ConfigArgs& a, const Common& c) {
  auto ov = a.overrides;
  if (c.seed) ov.push_back("seed=" + std::to_string(*c.seed));
  if (c.fold) ov.push_back("fold=" + std::to_string(*c.fold));
  if (c.device) ov.push_back("device=" + *c.device);
  if (a.output) ov.push_back("output_dir=\"" + *a.output + "\"");
  return a.config.empty() ? pipeline::parse_config("", ov) : pipeline::load_config(a.config, ov);
}

void print_efficiency(const std::string& name, const metrics::Efficiency& e) {
  std::cout << std::left << std::setw(10) << name << " params " << e.params << "  MACs " << e.macs << "  FLOPs "
            << e.flops << "  latency_s " << e.latency_s << "  size_mb " << std::fixed << std::setprecision(2)
            << e.size_mb << std::defaultfloat << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task 3D brain tumour detection, segmentation and grading"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--seed", common.seed, "random seed override");
  app.add_option("--fold", common.fold, "cross-validation fold in [0, 5)");
  app.add_option("--device", common.device, "cpu or cuda[:n]");
  app.add_option("--log-level", common.log_level, "debug|info|warn|error|off");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a synthetic phantom dataset in BraTS layout");
  std::string synth_out = "data/phantoms";
  int64_t synth_n = 8, synth_extent = 64;
  std::vector<double> wt_radius;
  synth->add_option("-o,--output", synth_out, "dataset root");
  synth->add_option("-n,--num-cases", synth_n, "number of cases");
  synth->add_option("--extent", synth_extent, "cubic volume extent");
  synth->add_option("--wt-radius", wt_radius, "whole-tumour radius range (two values)")->expected(2);
  std::vector<double> et_fraction;
  synth->add_option("--et-fraction", et_fraction, "ET radius range as a fraction of TC (two values)")->expected(2);
  bool synth_balanced = false;
  synth->add_flag("--balanced", synth_balanced, "alternate forced ET presence and absence");

  // split
  auto* split = app.add_subcommand("split", "stratified five-fold split of a dataset");
  std::string split_data = "data/phantoms", split_out;
  split->add_option("-d,--data", split_data, "dataset root");
  split->add_option("-o,--output", split_out, "write the folds as JSON here (stdout otherwise)");

  // train
  auto* train = app.add_subcommand("train", "train one configuration");
  ConfigArgs train_args;
  add_config_args(train, train_args);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "metrics report for a checkpoint");
  std::string eval_ckpt, eval_split = "val", eval_out;
  std::optional<std::string> eval_data;
  eval->add_option("-k,--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "train|val|all");
  eval->add_option("-o,--output", eval_out, "report JSON path");
  eval->add_option("-d,--data", eval_data, "dataset root override");

  // infer
  auto* inf = app.add_subcommand("infer", "predict one case");
  std::string inf_ckpt, inf_data, inf_case, inf_out = "predictions";
  inf->add_option("-k,--checkpoint", inf_ckpt, "checkpoint file")->required();
  inf->add_option("-d,--data", inf_data, "dataset root")->required();
  inf->add_option("--case", inf_case, "case id")->required();
  inf->add_option("-o,--output", inf_out, "output directory");

  // profile
  auto* prof = app.add_subcommand("profile", "parameters, MACs, FLOPs, latency and size");
  ConfigArgs prof_args;
  add_config_args(prof, prof_args);
  int64_t prof_extent = 0;
  int prof_repeats = 10;
  std::string prof_csv, prof_json;
  bool prof_compare = false;
  prof->add_option("--extent", prof_extent, "cubic input extent (default: data.crop)");
  prof->add_option("--repeats", prof_repeats, "timed forward passes");
  prof->add_option("--mac-csv", prof_csv, "per-layer MACs table");
  prof->add_option("--json", prof_json, "write the efficiency records as JSON");
  prof->add_flag("--compare", prof_compare, "also profile the three single-task models");

  // ablate
  auto* abl = app.add_subcommand("ablate", "train and evaluate the neck x balancer grid");
  ConfigArgs abl_args;
  add_config_args(abl, abl_args);

  CLI11_PARSE(app, argc, argv);

  try {
    log::set_level(log::level_from_string(common.log_level));

    if (*synth) {
      dataio::PhantomSpec spec;
      spec.extent = {synth_extent, synth_extent, synth_extent};
      if (wt_radius.size() == 2) spec.wt_radius_range = {wt_radius[0], wt_radius[1]};
      if (et_fraction.size() == 2) spec.et_fraction_range = {et_fraction[0], et_fraction[1]};
      const auto entries = pipeline::synth_dataset(synth_out, synth_n, spec, common.seed.value_or(0), synth_balanced);
      int64_t hgg = 0;
      for (const auto& e : entries) hgg += e.grade == Grade::HGG;
      std::cout << "wrote " << entries.size() << " cases (" << hgg << " HGG, " << entries.size() - hgg
                << " LGG) to " << synth_out << '\n';
    } else if (*split) {
      const auto entries = dataio::list_cases(split_data);
      std::vector<Grade> grades;
      for (const auto& e : entries) grades.push_back(e.grade);
      const auto folds = pipeline::five_fold_split(grades, common.seed.value_or(0));
      json j = json::array();
      for (size_t k = 0; k < folds.size(); ++k) {
        json f{{"fold", k}, {"train", json::array()}, {"val", json::array()}};
        for (auto i : folds[k].train) f["train"].push_back(entries[i].case_id);
        for (auto i : folds[k].val) f["val"].push_back(entries[i].case_id);
        j.push_back(f);
      }
      if (split_out.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        std::ofstream(split_out) << j.dump(2) << '\n';
        std::cout << "wrote " << split_out << '\n';
      }
    } else if (*train) {
      const auto cfg = resolve(train_args, common);
      const auto r = pipeline::train(cfg);
      std::cout << "trained " << r.steps << " steps; best score " << r.best_score << "\n  best: " << r.best_checkpoint
                << "\n  last: " << r.last_checkpoint << "\n  log:  " << r.log_csv << '\n';
    } else if (*eval) {
      const auto rep = pipeline::evaluate(eval_ckpt, eval_split, eval_out, eval_data);
      std::cout << rep.to_json().dump(2) << '\n';
    } else if (*inf) {
      const auto r = pipeline::infer(inf_ckpt, inf_data, inf_case, inf_out);
      std::cout << pipeline::detections_json(r.case_id, r.grade, r.detections).dump(2) << '\n';
      if (!r.seg_path.empty()) std::cout << "segmentation: " << r.seg_path << '\n';
    } else if (*prof) {
      const auto cfg = resolve(prof_args, common);
      const Index3 ext = prof_extent > 0 ? Index3{prof_extent, prof_extent, prof_extent} : cfg.data.crop;
      json out;
      const auto enc_params = count_parameters(*encoder::SwinEncoder(cfg.model.encoder));
      std::cout << "encoder parameters " << enc_params << '\n';
      out["encoder_params"] = enc_params;
      const auto main = pipeline::profile_model(cfg.model, ext, prof_repeats);
      print_efficiency(std::string(pipeline::to_string(cfg.model.variant)), main.efficiency);
      out[std::string(pipeline::to_string(cfg.model.variant))] = {
          {"params", main.efficiency.params}, {"macs", main.efficiency.macs}, {"flops", main.efficiency.flops},
          {"latency_s", main.efficiency.latency_s}, {"size_mb", main.efficiency.size_mb}};
      if (!prof_csv.empty()) std::ofstream(prof_csv) << main.mac_csv;
      if (prof_compare) {
        int64_t single_sum = 0;
        for (auto v : {pipeline::Variant::SegOnly, pipeline::Variant::DetOnly, pipeline::Variant::ClsOnly}) {
          auto mc = cfg.model;
          mc.variant = v;
          const auto r = pipeline::profile_model(mc, ext, prof_repeats);
          print_efficiency(std::string(pipeline::to_string(v)), r.efficiency);
          single_sum += r.efficiency.params;
          out[std::string(pipeline::to_string(v))] = {{"params", r.efficiency.params}, {"macs", r.efficiency.macs},
                                                      {"flops", r.efficiency.flops},
                                                      {"latency_s", r.efficiency.latency_s},
                                                      {"size_mb", r.efficiency.size_mb}};
        }
        const double reduction = 1.0 - static_cast<double>(main.efficiency.params) / static_cast<double>(single_sum);
        std::cout << "single-task total params " << single_sum << "; multi-task reduction " << std::fixed
                  << std::setprecision(2) << 100.0 * reduction << "%\n";
        out["single_task_params_total"] = single_sum;
        out["param_reduction"] = reduction;
      }
      if (!prof_json.empty()) std::ofstream(prof_json) << out.dump(2) << '\n';
    } else if (*abl) {
      const auto cfg = resolve(abl_args, common);
      const auto runs = pipeline::ablate(cfg);
      for (const auto& r : runs) {
        const auto j = r.report.to_json();
        std::cout << std::left << std::setw(16) << r.name << " dice " << j["segmentation"]["dice"].dump() << " acc "
                  << j["classification"]["acc"].dump() << " mAP " << j["detection"]["map_sweep"].dump() << '\n';
      }
      std::cout << "summary: " << (fs::path(cfg.output_dir) / "ablation.json").string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}
