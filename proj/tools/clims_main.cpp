// clims: synthetic-benchmark training and evaluation of text-matching
// activation maps. Subcommands: synth-data, train, eval, ablate.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "clims/evalkit.hpp"
#include "clims/losses.hpp"
#include "clims/matcher.hpp"
#include "clims/pipeline.hpp"
#include "clims/png_io.hpp"
#include "clims/synthgen.hpp"

namespace fs = std::filesystem;
using namespace clims;

namespace {

struct CommonModelArgs {
  std::string prompts_path;
  std::string concepts_path;
};

SyntheticMatcher make_matcher(const CommonModelArgs& args) {
  if (!args.concepts_path.empty()) return SyntheticMatcher(load_concept_table(args.concepts_path));
  return SyntheticMatcher(default_concept_table());
}

PromptBook make_prompt_book(const CommonModelArgs& args, const SceneDataset& data) {
  if (!args.prompts_path.empty()) return load_prompt_book(args.prompts_path);
  return build_prompt_book(data.class_names, synthetic_background_map());
}

TrainObjective objective_from_losses(const std::string& losses, const LossWeights& base) {
  if (losses.empty())
    return TrainObjective::text_matching_with(base);
  LossWeights w{0, 0, 0, 0};
  bool cls = false;
  std::stringstream ss(losses);
  std::string term;
  int terms = 0;
  while (std::getline(ss, term, ',')) {
    ++terms;
    if (term == "otm")
      w.alpha = base.alpha;
    else if (term == "btm")
      w.beta = base.beta;
    else if (term == "cbs")
      w.gamma = base.gamma;
    else if (term == "reg")
      w.delta = base.delta;
    else if (term == "cls")
      cls = true;
    else
      throw ValidationError("--losses: unknown term \"" + term + "\" (expect otm,btm,cbs,reg,cls)");
  }
  if (cls) {
    require(terms == 1, "--losses: cls cannot be combined with other terms");
    return TrainObjective::classifier();
  }
  return TrainObjective::text_matching_with(w);
}

void report_artifact(const std::string& path) { std::cout << "wrote: " << path << "\n"; }

int run(int argc, char** argv) {
  CLI::App app{"text-matching activation maps on a synthetic benchmark"};
  app.require_subcommand(1);

  // ---- synth-data -------------------------------------------------------
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic scene dataset");
  std::string synth_spec = "default", synth_out;
  int synth_n = 0, synth_offset = 0;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "scene spec JSON path, or \"default\"");
  synth->add_option("--n", synth_n, "number of scenes")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--offset", synth_offset, "first scene index");
  synth->add_option("--seed", [&synth_seed](const CLI::results_t& r) {
    synth_seed = std::stoull(r[0]);
    return true;
  }, "override the spec seed");

  // ---- shared train/eval/ablate options ---------------------------------
  CommonModelArgs model_args;
  std::string config_path, data_dir, out_dir, losses, resume_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<int> epochs_override, batch_override, crop_override;
  std::optional<real> lr_override, wd_override;
  bool deterministic = false;

  const auto add_model_options = [&](CLI::App* cmd) {
    cmd->add_option("--prompts", model_args.prompts_path, "prompt book JSON");
    cmd->add_option("--concepts", model_args.concepts_path, "concept table JSON");
  };
  const auto add_config_options = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "training config JSON");
    cmd->add_option("--seed", [&seed_override](const CLI::results_t& r) {
      seed_override = std::stoull(r[0]);
      return true;
    }, "override config seed");
    cmd->add_option("--epochs", [&epochs_override](const CLI::results_t& r) {
      epochs_override = std::stoi(r[0]);
      return true;
    }, "override config epochs");
    cmd->add_option("--batch-size", [&batch_override](const CLI::results_t& r) {
      batch_override = std::stoi(r[0]);
      return true;
    }, "override config batch size");
    cmd->add_option("--crop-size", [&crop_override](const CLI::results_t& r) {
      crop_override = std::stoi(r[0]);
      return true;
    }, "override config crop size");
    cmd->add_option("--learning-rate", [&lr_override](const CLI::results_t& r) {
      lr_override = std::stod(r[0]);
      return true;
    }, "override config learning rate");
    cmd->add_option("--weight-decay", [&wd_override](const CLI::results_t& r) {
      wd_override = std::stod(r[0]);
      return true;
    }, "override config weight decay");
    cmd->add_flag("--deterministic", deterministic,
                  "runs are always deterministic; flag kept for interface stability");
  };
  const auto effective_config = [&]() {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (epochs_override) cfg.epochs = *epochs_override;
    if (batch_override) cfg.batch_size = *batch_override;
    if (crop_override) cfg.crop_size = *crop_override;
    if (lr_override) cfg.learning_rate = *lr_override;
    if (wd_override) cfg.weight_decay = *wd_override;
    validate_config(cfg);
    return cfg;
  };

  // ---- train -------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train on a generated dataset");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "run output directory")->required();
  train_cmd->add_option("--losses", losses, "comma list of otm,btm,cbs,reg (or just cls)");
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  add_config_options(train_cmd);
  add_model_options(train_cmd);

  // ---- eval --------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against ground truth");
  std::string eval_checkpoint, cam_mode = "sigmoid";
  real fixed_threshold = -1;
  int sample_cams = 4;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory with masks")->required();
  eval_cmd->add_option("--out", out_dir, "report output directory")->required();
  eval_cmd->add_option("--threshold", fixed_threshold, "fixed background threshold (skips sweep)");
  eval_cmd->add_option("--cam-mode", cam_mode, "sigmoid or conventional");
  eval_cmd->add_option("--sample-cams", sample_cams, "number of images whose maps are exported");
  add_config_options(eval_cmd);
  add_model_options(eval_cmd);

  // ---- ablate --------------------------------------------------------------
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate loss-combination variants");
  std::string eval_data_dir, variants_arg;
  ablate_cmd->add_option("--data", data_dir, "training dataset directory")->required();
  ablate_cmd->add_option("--eval-data", eval_data_dir, "held-out dataset directory")->required();
  ablate_cmd->add_option("--out", out_dir, "output directory")->required();
  ablate_cmd->add_option("--variants", variants_arg, "comma list (default: all six)");
  add_config_options(ablate_cmd);
  add_model_options(ablate_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage/help
    return code == 0 ? 0 : 1;
  }
  (void)deterministic;

  if (synth->parsed()) {
    SceneSpec spec = synth_spec == "default" ? default_scene_spec() : load_scene_spec(synth_spec);
    if (synth_seed) spec.seed = *synth_seed;
    require(synth_n >= 0, "synth-data: --n must be nonnegative");
    generate_dataset(spec, synth_n, synth_out, synth_offset);
    report_artifact((fs::path(synth_out) / "manifest.json").string());
    report_artifact((fs::path(synth_out) / "scene_spec.json").string());
    std::cout << "scenes: " << synth_n << "\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const TrainConfig cfg = effective_config();
    const SceneDataset data = load_dataset(data_dir, false);
    const SyntheticMatcher matcher = make_matcher(model_args);
    const PromptBook book = make_prompt_book(model_args, data);
    const TrainObjective objective = objective_from_losses(losses, cfg.loss_weights);
    std::optional<TrainState> resume;
    if (!resume_path.empty()) {
      CheckpointLoadResult loaded = load_checkpoint(resume_path, config_hash(cfg));
      if (!loaded.warning.empty()) std::cerr << "warning: " << loaded.warning << "\n";
      resume = std::move(loaded.state);
    }
    const TrainResult result = train(cfg, data, book, matcher, out_dir, objective, resume);
    save_config(cfg, (fs::path(out_dir) / "config.json").string());
    for (const auto& ckpt : result.checkpoints) report_artifact(ckpt);
    report_artifact((fs::path(out_dir) / "loss_log.jsonl").string());
    std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    require(cam_mode == "sigmoid" || cam_mode == "conventional",
            "eval: --cam-mode must be sigmoid or conventional");
    const TrainConfig cfg = effective_config();
    const SceneDataset data = load_dataset(data_dir, true);
    const CheckpointLoadResult loaded = load_checkpoint(eval_checkpoint, config_hash(cfg));
    if (!loaded.warning.empty()) std::cerr << "warning: " << loaded.warning << "\n";
    const CamMode mode = cam_mode == "sigmoid" ? CamMode::sigmoid_head : CamMode::conventional;
    const EvalSummary summary =
        evaluate_dataset(loaded.state.params, data, mode, default_threshold_grid(), fixed_threshold);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("eval: cannot create \"" + out_dir + "\"");

    nlohmann::json j;
    j["miou"] = summary.miou;
    j["best_threshold"] = summary.best_threshold;
    j["foreground_recall"] = summary.foreground_recall;
    j["mean_area"] = summary.mean_area;
    j["background_iou"] = summary.class_iou[0];
    nlohmann::json per_class = nlohmann::json::object();
    for (int k = 1; k < summary.class_iou.size(); ++k)
      per_class[data.class_names[static_cast<std::size_t>(k - 1)]] = summary.class_iou[k];
    j["class_iou"] = per_class;
    j["sweep"] = {{"thresholds", summary.sweep.thresholds}, {"miou", summary.sweep.miou}};
    const std::string report_path = (fs::path(out_dir) / "report.json").string();
    {
      std::ofstream out(report_path);
      if (!out.good()) throw std::runtime_error("eval: cannot write \"" + report_path + "\"");
      out << j.dump(2) << '\n';
    }
    report_artifact(report_path);

    std::ostringstream table;
    table.setf(std::ios::fixed);
    table.precision(1);
    table << "mIoU " << 100 * summary.miou << " at threshold " << summary.best_threshold << "\n";
    table << "background " << 100 * summary.class_iou[0] << "\n";
    for (int k = 1; k < summary.class_iou.size(); ++k)
      table << data.class_names[static_cast<std::size_t>(k - 1)] << " " << 100 * summary.class_iou[k]
            << "\n";
    const std::string table_path = (fs::path(out_dir) / "report.txt").string();
    {
      std::ofstream out(table_path);
      out << table.str();
    }
    report_artifact(table_path);
    std::cout << table.str();

    const int samples = std::min<int>(sample_cams, data.size());
    for (int i = 0; i < samples; ++i) {
      const ActivationMaps cams =
          mode == CamMode::sigmoid_head
              ? extract_cams(loaded.state.params, data.images[static_cast<std::size_t>(i)],
                             data.labels[static_cast<std::size_t>(i)])
              : extract_conventional_cams(loaded.state.params, data.images[static_cast<std::size_t>(i)],
                                          data.labels[static_cast<std::size_t>(i)]);
      report_artifact(export_cam_pngs(cams, data.class_names, summary.best_threshold,
                                      loaded.state.config_hash,
                                      (fs::path(out_dir) / "cams").string(), i));
    }
    return 0;
  }

  if (ablate_cmd->parsed()) {
    const TrainConfig cfg = effective_config();
    const SceneDataset train_data = load_dataset(data_dir, false);
    const SceneDataset eval_data = load_dataset(eval_data_dir, true);
    const SyntheticMatcher matcher = make_matcher(model_args);
    const PromptBook book = make_prompt_book(model_args, train_data);
    std::vector<std::string> variants;
    if (variants_arg.empty()) {
      variants = ablation_variant_names();
    } else {
      std::stringstream ss(variants_arg);
      std::string v;
      while (std::getline(ss, v, ',')) variants.push_back(v);
    }
    const AblationReport report =
        ablation_run(cfg, train_data, eval_data, book, matcher, variants, out_dir);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    const std::string json_path = (fs::path(out_dir) / "ablation.json").string();
    {
      std::ofstream out(json_path);
      if (!out.good()) throw std::runtime_error("ablate: cannot write \"" + json_path + "\"");
      out << ablation_report_json(report) << '\n';
    }
    const std::string table_path = (fs::path(out_dir) / "ablation.txt").string();
    {
      std::ofstream out(table_path);
      out << render_ablation_table(report);
    }
    report_artifact(json_path);
    report_artifact(table_path);
    std::cout << render_ablation_table(report);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
