#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "updetr/dataset.hpp"
#include "updetr/error.hpp"
#include "updetr/eval.hpp"
#include "updetr/gradcheck.hpp"
#include "updetr/train.hpp"

namespace fs = std::filesystem;
using namespace updetr;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// `--key value` for every flat config key, applied after the config file.
struct Overrides {
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    for (const auto& key : config_keys()) {
      if (key == "seed" || key == "mode") continue;
      cmd->add_option("--" + key, values[key], "config override")->group("Config overrides");
    }
  }

  void apply(TrainConfig& cfg) const {
    for (const auto& [key, value] : values)
      if (!value.empty()) set_config_key(cfg, key, value);
  }
};

TrainConfig build_config(TrainMode mode, const std::string& path, const Overrides& overrides,
                         const std::optional<std::uint64_t>& seed) {
  TrainConfig cfg = path.empty() ? default_config(mode) : load_config(path, mode);
  cfg.mode = mode;
  overrides.apply(cfg);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

void save_run(const fs::path& out, const std::string& stem, const TrainResult& run) {
  fs::create_directories(out);
  write_checkpoint((out / (stem + ".ckpt")).string(), training_records(run));
  write_curves(out / (stem + "_curves.csv"), run.curves);
}

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

void print_report(const ApReport& r) {
  std::printf("AP %.4f  AP50 %.4f  AP75 %.4f\n", r.mean_ap, r.mean_ap50, r.mean_ap75);
  for (std::size_t c = 0; c < r.ap.size(); ++c)
    std::printf("class %zu  AP %s  AP50 %s  AP75 %s\n", c, opt_str(r.ap[c]).c_str(),
                opt_str(r.ap50[c]).c_str(), opt_str(r.ap75[c]).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised pre-training for detection transformers, desk scale"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;

  auto* synth = app.add_subcommand("synth", "write a synthetic shapes dataset");
  std::size_t synth_n = 0;
  std::string synth_out;
  SynthSpec spec;
  synth->add_option("--n", synth_n, "number of images")->required()->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", seed, "dataset seed");
  synth->add_option("--canvas", spec.width, "canvas side in pixels");
  synth->add_option("--min-shapes", spec.min_shapes);
  synth->add_option("--max-shapes", spec.max_shapes);

  auto* pre = app.add_subcommand("pretrain", "pretext pre-training");
  std::string pre_config, pre_out, pre_resume;
  Overrides pre_over;
  pre->add_option("--config", pre_config, "flat JSON config")->check(CLI::ExistingFile);
  pre->add_option("--out", pre_out, "output directory")->required();
  pre->add_option("--resume", pre_resume, "continue from a pretrain checkpoint")->check(CLI::ExistingFile);
  pre->add_option("--seed", seed);
  pre_over.attach(pre);

  auto* fine = app.add_subcommand("finetune", "supervised fine-tuning");
  std::string fine_config, fine_init, fine_out;
  Overrides fine_over;
  fine->add_option("--config", fine_config, "flat JSON config")->check(CLI::ExistingFile);
  fine->add_option("--init", fine_init, "pretrained checkpoint (omit for scratch)")->check(CLI::ExistingFile);
  fine->add_option("--out", fine_out, "output directory")->required();
  fine->add_option("--seed", seed);
  fine_over.attach(fine);

  auto* ev = app.add_subcommand("eval", "AP of a detection checkpoint");
  std::string ev_ckpt, ev_data;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset directory with ground_truth.txt")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--seed", seed, "accepted for uniformity; evaluation is deterministic");

  auto* loc = app.add_subcommand("locate", "find query patches in an image with a pretext checkpoint");
  std::string loc_ckpt, loc_image, loc_out;
  std::vector<std::string> loc_patches;
  double threshold = kLocateThreshold;
  loc->add_option("--checkpoint", loc_ckpt)->required()->check(CLI::ExistingFile);
  loc->add_option("--image", loc_image)->required()->check(CLI::ExistingFile);
  loc->add_option("--patch", loc_patches, "query patch PPM (repeatable)")->required()->check(CLI::ExistingFile);
  loc->add_option("--out", loc_out, "report file (stdout when omitted)");
  loc->add_option("--threshold", threshold, "minimum match confidence")->check(CLI::Range(0.0, 1.0));
  loc->add_option("--seed", seed, "accepted for uniformity; locate is deterministic");

  auto* abl = app.add_subcommand("ablate", "frozen × reconstruction matrix with scratch baseline");
  std::string abl_config, abl_fine_config, abl_out;
  Overrides abl_over;
  abl->add_option("--config", abl_config, "pre-training config")->check(CLI::ExistingFile);
  abl->add_option("--finetune-config", abl_fine_config, "fine-tuning config")->check(CLI::ExistingFile);
  abl->add_option("--out", abl_out)->required();
  abl->add_option("--seed", seed);
  abl_over.attach(abl);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) {
      spec.height = spec.width;
      write_dataset(synth_out, generate_dataset(synth_n, seed.value_or(1), spec));
      std::printf("wrote %zu images to %s\n", synth_n, synth_out.c_str());
    } else if (*pre) {
      const TrainConfig cfg = build_config(TrainMode::Pretrain, pre_config, pre_over, seed);
      const auto images = pretrain_images(cfg);
      const auto resume = pre_resume.empty() ? std::vector<CheckpointRecord>{} : read_checkpoint(pre_resume);
      const TrainResult run = pretrain(cfg, images, resume);
      save_run(pre_out, "pretrain", run);
      for (const auto& r : run.curves)
        if (r.metric == "loss_total") std::printf("epoch %zu loss %.4f\n", r.epoch, r.value);
    } else if (*fine) {
      TrainConfig cfg = build_config(TrainMode::Finetune, fine_config, fine_over, seed);
      if (!fine_init.empty()) cfg.init_checkpoint = fine_init;
      const TrainResult run = finetune(cfg, finetune_train_set(cfg), finetune_val_set(cfg));
      save_run(fine_out, "finetune", run);
      for (const auto& r : run.curves)
        if (r.metric == "AP50") std::printf("epoch %zu AP50 %.4f\n", r.epoch, r.value);
      if (const auto e = epochs_to_ap50(run.curves, cfg.target_ap50))
        std::printf("reached AP50 %.2f at epoch %zu\n", cfg.target_ap50, *e);
    } else if (*ev) {
      const Model model = model_from_records(read_checkpoint(ev_ckpt));
      print_report(evaluate_model(model, read_dataset(ev_data)));
    } else if (*loc) {
      const Model model = model_from_records(read_checkpoint(loc_ckpt));
      std::vector<ImageRaster> patches;
      for (const auto& p : loc_patches) patches.push_back(read_ppm(p));
      const auto hits = locate(model, read_ppm(loc_image), patches, threshold);
      if (loc_out.empty()) {
        for (const auto& h : hits)
          std::printf("%zu %.6f %.6f %.6f %.6f %.6f\n", h.patch_index, h.confidence, h.box.cx, h.box.cy,
                      h.box.w, h.box.h);
      } else {
        write_locate_report(loc_out, hits);
      }
    } else if (*abl) {
      const TrainConfig pcfg = build_config(TrainMode::Pretrain, abl_config, abl_over, seed);
      TrainConfig fcfg = abl_fine_config.empty() ? default_config(TrainMode::Finetune)
                                                 : load_config(abl_fine_config, TrainMode::Finetune);
      if (seed) fcfg.seed = *seed;
      fcfg.validate();
      const auto rows = ablation_matrix(pcfg, fcfg, abl_out);
      for (const auto& r : rows)
        std::printf("%-16s frozen=%d rec=%d final_AP50=%.4f best_AP50=%.4f\n", r.name.c_str(), r.frozen,
                    r.reconstruction, r.final_ap50, r.best_ap50);
    } else if (*grad) {
      bool ok = true;
      auto results = gradcheck_suite(seed.value_or(0));
      results.push_back(end_to_end_gradcheck(seed.value_or(0)));
      for (const auto& r : results) {
        std::printf("%-4s %-28s %.3e (tol %.0e)\n", r.passed() ? "ok" : "FAIL", r.op.c_str(), r.max_rel_error,
                    r.tolerance);
        ok = ok && r.passed();
      }
      return ok ? 0 : kExitRuntime;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
