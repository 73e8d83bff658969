#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "updetr/eval.hpp"
#include "updetr/model.hpp"
#include "updetr/pretext.hpp"

namespace updetr {

enum class TrainMode { Pretrain, Finetune };

struct TrainConfig {
  TrainMode mode = TrainMode::Pretrain;
  std::size_t epochs = 30;
  std::size_t lr_drop_epoch = 20;
  // 10x the usual detector rates: a desk run is ~4k optimizer steps, not ~1M
  double lr_transformer = 1e-3;
  double lr_backbone = 5e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  double grad_clip = 0.1;
  std::uint64_t seed = 0;
  std::string init_checkpoint;

  ModelConfig model;
  PretextConfig pretext;
  bool keep_dropped_targets = true;

  // Data: a dataset directory, or synthetic scenes when empty.
  std::string data_dir;
  std::string val_dir;
  SynthSpec synth;
  std::size_t train_images = 1024;
  std::size_t val_images = 50;
  std::uint64_t data_seed = 1;

  // Supervised shape-classification warm-up of the backbone, run before
  // pre-training or scratch fine-tuning.
  std::size_t backbone_warmup_steps = 300;
  double backbone_warmup_lr = 1e-3;
  std::uint64_t backbone_seed = 7;

  double no_object_weight = 0.1;
  double target_ap50 = 0.5;

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// Desk-scale defaults for each mode.
TrainConfig default_config(TrainMode mode);

/// Sets one flat key from a JSON value; ConfigError names unknown keys and
/// type mismatches.
void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& json_value);
/// Flat JSON object; unknown keys are rejected.
void apply_config_json(TrainConfig& cfg, const std::string& text);
TrainConfig load_config(const std::filesystem::path& path, std::optional<TrainMode> mode = std::nullopt);
std::vector<std::string> config_keys();

/// 1.0 before lr_drop_epoch (0-based), 0.1 from it on.
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update of a single tensor; `step` is the
/// 1-based step count used for bias correction.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, double lr, double weight_decay,
                  const AdamWHyper& hyper = {});

/// Moment buffers for every trainable parameter (and none for frozen ones).
class Optimizer {
 public:
  explicit Optimizer(const ParameterStore& params);

  /// Clips the global gradient norm (when max_norm > 0), applies AdamW with
  /// the backbone or transformer rate per parameter, then clears gradients.
  /// Returns the pre-clip gradient norm.
  double step(ParameterStore& params, double lr_transformer, double lr_backbone, double weight_decay,
              double max_norm);

  std::uint64_t steps() const { return step_; }
  bool has_slot(const std::string& name) const;
  std::size_t slot_count() const { return slots_.size(); }

  std::vector<CheckpointRecord> records() const;
  void load(std::span<const CheckpointRecord> records);

 private:
  struct Slot {
    std::string name;
    std::vector<double> m, v;
  };
  std::uint64_t step_ = 0;
  std::vector<Slot> slots_;
};

struct EpochLoss {
  double total = 0.0, cls = 0.0, box = 0.0, rec = 0.0;
};

struct TrainHooks {
  /// Called once training is about to start (after warm-up and loading).
  std::function<void(const Model&)> on_start;
  /// Called after every optimizer step with the batch loss.
  std::function<void(std::uint64_t step, double loss)> on_step;
  /// Stop after this many optimizer steps in total.
  std::optional<std::uint64_t> max_steps;
  /// Checked after every epoch's records are in; true ends the run early.
  std::function<bool(std::span<const CurveRecord>)> stop_after_epoch;
};

struct TrainResult {
  Model model;
  Optimizer optimizer;
  std::size_t epochs_done = 0;
  std::vector<CurveRecord> curves;
};

/// Model, optimizer and progress records of a training run.
std::vector<CheckpointRecord> training_records(const TrainResult& result);

/// Runs the shape-classification warm-up on the backbone. Returns the
/// accuracy over the last 100 crops.
double warmup_backbone(Model& model, const TrainConfig& cfg);

std::vector<ImageRaster> pretrain_images(const TrainConfig& cfg);
std::vector<DetectionSample> finetune_train_set(const TrainConfig& cfg);
std::vector<DetectionSample> finetune_val_set(const TrainConfig& cfg);

/// Pretext training. `resume` continues a run from its checkpoint records.
TrainResult pretrain(const TrainConfig& cfg, std::span<const ImageRaster> images,
                     std::span<const CheckpointRecord> resume = {}, const TrainHooks& hooks = {});

/// Supervised fine-tuning with per-epoch validation AP.
TrainResult finetune(const TrainConfig& cfg, std::span<const DetectionSample> train,
                     std::span<const DetectionSample> val, std::span<const CheckpointRecord> resume = {},
                     const TrainHooks& hooks = {});

/// First 1-based epoch whose val AP50 reaches the target, if any.
std::optional<std::size_t> epochs_to_ap50(std::span<const CurveRecord> curves, double target);

struct AblationRow {
  std::string name;
  bool pretrained = false;
  bool frozen = false;
  bool reconstruction = false;
  double final_ap50 = 0.0;
  double best_ap50 = 0.0;
  std::optional<std::size_t> epochs_to_target;
  std::optional<bool> freeze_held;  // frozen rows only
};

/// The frozen × reconstruction pre-training matrix plus a scratch baseline,
/// each fine-tuned, with mask and shuffle pre-training comparisons. Writes
/// per-run curves and checkpoints under `out`.
std::vector<AblationRow> ablation_matrix(const TrainConfig& pretrain_cfg, const TrainConfig& finetune_cfg,
                                         const std::filesystem::path& out);

}  // namespace updetr
