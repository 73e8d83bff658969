#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "updetr/dataset.hpp"
#include "updetr/error.hpp"
#include "updetr/train.hpp"

using namespace updetr;

namespace {

// Small enough that a few epochs run in seconds.
TrainConfig small_config(TrainMode mode) {
  TrainConfig cfg = default_config(mode);
  cfg.model.d_model = 32;
  cfg.model.heads = 2;
  cfg.model.enc_layers = cfg.model.dec_layers = 1;
  cfg.model.ffn_dim = 64;
  cfg.model.queries = 8;
  cfg.model.max_patches = 2;
  cfg.model.backbone_channels = 32;
  cfg.pretext.patches = 2;
  cfg.epochs = 2;
  cfg.lr_drop_epoch = 1;
  cfg.lr_transformer = 5e-4;
  cfg.lr_backbone = 1e-4;
  cfg.batch_size = 4;
  cfg.train_images = 16;
  cfg.val_images = 8;
  cfg.backbone_warmup_steps = 5;
  return cfg;
}

bool same_records(const std::vector<CheckpointRecord>& a, const std::vector<CheckpointRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
    const auto x = a[i].value.data(), y = b[i].value.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  std::vector<double> p{1.0, -2.0, 0.5}, g(3, 0.0), m(3, 0.0), v(3, 0.0);
  adamw_update(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  std::vector<double> p{1.0}, g{1.0}, m{0.0}, v{0.0};
  adamw_update(p, g, m, v, 1, 0.1, 0.0);
  // m = 0.1, v = 0.001; bias-corrected both are 1.
  const double mhat = 0.1 / (1 - 0.9), vhat = 0.001 / (1 - 0.999);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-15);
  EXPECT_NEAR(p[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  std::vector<double> p{2.0, -4.0}, g(2, 0.0), m(2, 0.0), v(2, 0.0);
  adamw_update(p, g, m, v, 1, 0.01, 0.5);
  EXPECT_EQ(p[0], 2.0 * (1 - 0.01 * 0.5));
  EXPECT_EQ(p[1], -4.0 * (1 - 0.01 * 0.5));
}

TEST(Optimizer, ParameterGroupsAndFrozenSlots) {
  ParameterStore store;
  store.add("backbone.w", Tensor({1}, {1.0}, true));
  store.add("encoder.w", Tensor({1}, {1.0}, true));
  store.add("frozen.w", Tensor({1}, {1.0}, false));
  Optimizer opt(store);
  EXPECT_EQ(opt.slot_count(), 2u);
  EXPECT_FALSE(opt.has_slot("frozen.w"));
  for (const char* n : {"backbone.w", "encoder.w"}) store.get(n).grad_buffer()[0] = 1.0;
  opt.step(store, 1e-4, 5e-5, 0.0, 0.0);
  EXPECT_NEAR(store.get("encoder.w")[0], 1.0 - 1e-4, 1e-12);
  EXPECT_NEAR(store.get("backbone.w")[0], 1.0 - 5e-5, 1e-12);
  EXPECT_EQ(store.get("frozen.w")[0], 1.0);
  EXPECT_FALSE(store.get("encoder.w").has_grad());
}

TEST(Optimizer, ClipsGlobalNorm) {
  ParameterStore store;
  store.add("a", Tensor({2}, {0.0, 0.0}, true));
  Optimizer opt(store);
  store.get("a").grad_buffer()[0] = 3.0;
  store.get("a").grad_buffer()[1] = 4.0;
  EXPECT_DOUBLE_EQ(opt.step(store, 0.1, 0.1, 0.0, 0.1), 5.0);
}

TEST(Schedule, StepDrop) {
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr_drop_epoch = 40;
  EXPECT_EQ(lr_schedule(0, cfg), 1.0);
  EXPECT_EQ(lr_schedule(39, cfg), 1.0);
  EXPECT_EQ(lr_schedule(40, cfg), 0.1);
  cfg.epochs = 150;
  cfg.lr_drop_epoch = 100;
  EXPECT_EQ(lr_schedule(99, cfg), 1.0);
  EXPECT_EQ(lr_schedule(100, cfg), 0.1);
}

TEST(Config, FlatJsonAndOverrides) {
  TrainConfig cfg = default_config(TrainMode::Pretrain);
  apply_config_json(cfg, R"({"epochs": 150, "lr_drop_epoch": 100, "lr_transformer": 1e-4,
                             "lr_backbone": 5e-5, "mode": "finetune", "use_query_shuffle": true})");
  EXPECT_EQ(cfg.epochs, 150u);
  EXPECT_EQ(cfg.mode, TrainMode::Finetune);
  EXPECT_DOUBLE_EQ(cfg.lr_backbone, 5e-5);
  EXPECT_TRUE(cfg.model.use_query_shuffle);
  cfg.validate();
  set_config_key(cfg, "seed", "17");
  set_config_key(cfg, "mode", "pretrain");
  EXPECT_EQ(cfg.seed, 17u);
  EXPECT_EQ(cfg.mode, TrainMode::Pretrain);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  TrainConfig cfg;
  try {
    apply_config_json(cfg, R"({"epochs": 3, "learning_rate": 0.1})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(apply_config_json(cfg, R"({"epochs": "many"})"), ConfigError);
  EXPECT_THROW(apply_config_json(cfg, R"({"epochs": -1})"), ConfigError);
  EXPECT_THROW(apply_config_json(cfg, R"({"nested": {"a": 1}})"), ConfigError);
  EXPECT_THROW(apply_config_json(cfg, "[1, 2]"), ConfigError);
  EXPECT_THROW(apply_config_json(cfg, "{oops"), ConfigError);
  EXPECT_THROW(set_config_key(cfg, "mode", "sideways"), ConfigError);

  TrainConfig bad = default_config(TrainMode::Pretrain);
  bad.lr_drop_epoch = bad.epochs;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = default_config(TrainMode::Pretrain);
  bad.pretext.patches = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = default_config(TrainMode::Pretrain);
  bad.lr_transformer = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Config, FullScaleValuesAccepted) {
  TrainConfig cfg = default_config(TrainMode::Pretrain);
  apply_config_json(cfg, R"({"d_model": 256, "heads": 8, "enc_layers": 6, "dec_layers": 6, "ffn_dim": 2048,
                             "queries": 100, "max_patches": 10, "patches": 10, "patch_side": 128,
                             "short_lo": 320, "short_hi": 480, "long_max": 600, "epochs": 60,
                             "lr_drop_epoch": 40, "backbone_channels": 256})");
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Pretrain, FreezeContractHoldsAndUnfrozenMoves) {
  for (const bool frozen : {true, false}) {
    TrainConfig cfg = small_config(TrainMode::Pretrain);
    cfg.model.freeze_backbone = frozen;
    cfg.epochs = 10;
    cfg.lr_drop_epoch = 9;
    std::vector<Tensor> before;
    TrainHooks hooks;
    hooks.on_start = [&](const Model& m) {
      for (const auto& e : m.parameters().entries())
        if (e.name.starts_with(kBackbonePrefix)) before.push_back(e.value.detach());
    };
    hooks.max_steps = 12;
    const TrainResult run = pretrain(cfg, pretrain_images(cfg), {}, hooks);
    EXPECT_EQ(run.optimizer.steps(), 12u);
    std::size_t i = 0;
    bool identical = true;
    for (const auto& e : run.model.parameters().entries()) {
      if (!e.name.starts_with(kBackbonePrefix)) continue;
      EXPECT_EQ(run.optimizer.has_slot(e.name), !frozen) << e.name;
      const auto a = before[i++].data(), b = e.value.data();
      identical = identical && std::equal(a.begin(), a.end(), b.begin());
    }
    EXPECT_EQ(identical, frozen);
  }
}

TEST(Pretrain, SmokeRunLossDecreases) {
  TrainConfig cfg = default_config(TrainMode::Pretrain);
  cfg.epochs = 2;
  cfg.lr_drop_epoch = 1;
  cfg.train_images = 64;
  cfg.backbone_warmup_steps = 20;
  const TrainResult run = pretrain(cfg, pretrain_images(cfg));
  std::vector<double> totals;
  for (const auto& r : run.curves)
    if (r.metric == "loss_total") totals.push_back(r.value);
  ASSERT_EQ(totals.size(), 2u);
  EXPECT_LT(totals[1], totals[0]);
  // every epoch carries the full decomposition
  for (const char* m : {"loss_cls", "loss_box", "loss_rec"})
    EXPECT_EQ(std::count_if(run.curves.begin(), run.curves.end(), [&](const CurveRecord& r) { return r.metric == m; }),
              2);
}

TEST(Pretrain, DeterministicAndResumable) {
  TrainConfig cfg = small_config(TrainMode::Pretrain);
  cfg.model.use_query_shuffle = true;
  const auto images = pretrain_images(cfg);
  std::vector<double> straight_losses;
  TrainHooks log;
  log.on_step = [&](std::uint64_t, double l) { straight_losses.push_back(l); };
  const TrainResult a = pretrain(cfg, images, {}, log);
  const TrainResult b = pretrain(cfg, images);
  EXPECT_TRUE(same_records(training_records(a), training_records(b)));
  EXPECT_EQ(a.curves, b.curves);

  TrainHooks one_epoch;
  one_epoch.stop_after_epoch = [](std::span<const CurveRecord>) { return true; };
  const TrainResult half = pretrain(cfg, images, {}, one_epoch);
  ASSERT_EQ(half.epochs_done, 1u);
  const auto dir = temp_dir("updetr_resume");
  write_checkpoint((dir / "half.ckpt").string(), training_records(half));
  std::vector<double> resumed_losses;
  TrainHooks log2;
  log2.on_step = [&](std::uint64_t, double l) { resumed_losses.push_back(l); };
  const TrainResult rest = pretrain(cfg, images, read_checkpoint((dir / "half.ckpt").string()), log2);
  const std::size_t steps_per_epoch = straight_losses.size() / 2;
  ASSERT_EQ(resumed_losses.size(), steps_per_epoch);
  EXPECT_EQ(resumed_losses[0], straight_losses[steps_per_epoch]);
  EXPECT_TRUE(same_records(training_records(a), training_records(rest)));
  std::filesystem::remove_all(dir);
}

TEST(Finetune, ScratchAndPretrainedInit) {
  TrainConfig pcfg = small_config(TrainMode::Pretrain);
  pcfg.epochs = 1;
  pcfg.lr_drop_epoch = 0;
  const TrainResult pre = pretrain(pcfg, pretrain_images(pcfg));
  const auto dir = temp_dir("updetr_finetune");
  const auto ckpt = (dir / "pre.ckpt").string();
  write_checkpoint(ckpt, training_records(pre));

  TrainConfig fcfg = small_config(TrainMode::Finetune);
  const auto train = finetune_train_set(fcfg), val = finetune_val_set(fcfg);
  const TrainResult scratch = finetune(fcfg, train, val);
  EXPECT_EQ(std::count_if(scratch.curves.begin(), scratch.curves.end(),
                          [](const CurveRecord& r) { return r.split == "val" && r.metric == "AP50"; }),
            2);
  EXPECT_FALSE(scratch.model.backbone_frozen());

  fcfg.init_checkpoint = ckpt;
  bool checked = false;
  TrainHooks hooks;
  hooks.on_start = [&](const Model& m) {
    for (const auto& e : m.parameters().entries()) {
      if (e.name.starts_with(kClassHeadPrefix)) {
        EXPECT_EQ(e.value.extent(0), fcfg.model.classes + 1);
        continue;
      }
      const Tensor& src = pre.model.parameters().get(e.name);
      ASSERT_TRUE(std::equal(src.data().begin(), src.data().end(), e.value.data().begin())) << e.name;
    }
    checked = true;
  };
  const TrainResult tuned = finetune(fcfg, train, val, {}, hooks);
  EXPECT_TRUE(checked);

  TrainConfig wrong = fcfg;
  wrong.model.d_model = 16;
  try {
    finetune(wrong, train, val);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("query_embed"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Finetune, EpochsToTarget) {
  const std::vector<CurveRecord> c{{1, "val", "AP50", 0.2}, {1, "train", "loss_total", 3},
                                   {2, "val", "AP50", 0.55}, {3, "val", "AP50", 0.7}};
  EXPECT_EQ(epochs_to_ap50(c, 0.5), 2u);
  EXPECT_FALSE(epochs_to_ap50(c, 0.9).has_value());
}

TEST(Dataset, WriteReadRoundTrip) {
  const auto dir = temp_dir("updetr_dataset");
  const auto samples = generate_dataset(5, 3, {});
  write_dataset(dir, samples);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].image, samples[i].image);
    ASSERT_EQ(back[i].objects.size(), samples[i].objects.size());
    for (std::size_t k = 0; k < samples[i].objects.size(); ++k) {
      EXPECT_EQ(back[i].objects[k].cls, samples[i].objects[k].cls);
      EXPECT_NEAR(back[i].objects[k].box.cx, samples[i].objects[k].box.cx, 5e-7);
    }
  }
  // same data regardless of thread count: scene i depends only on (seed, i)
  const auto one = generate_dataset(1, 3, {});
  EXPECT_EQ(one[0].image, samples[0].image);
  std::filesystem::remove(dir / "manifest.txt");
  EXPECT_THROW(read_dataset(dir), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Ablation, EmitsMatrixAndComparisons) {
  TrainConfig pcfg = small_config(TrainMode::Pretrain);
  pcfg.epochs = 1;
  pcfg.lr_drop_epoch = 0;
  pcfg.train_images = 8;
  TrainConfig fcfg = small_config(TrainMode::Finetune);
  fcfg.train_images = 8;
  fcfg.val_images = 4;
  const auto dir = temp_dir("updetr_ablation");
  const auto rows = ablation_matrix(pcfg, fcfg, dir);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].name, "DETR (scratch)");
  for (const auto& r : rows)
    if (r.frozen) {
      ASSERT_TRUE(r.freeze_held.has_value());
      EXPECT_TRUE(*r.freeze_held) << r.name;
    }
  for (const char* f : {"ablation_table.csv", "mask_comparison.csv", "shuffle_pretext_comparison.csv",
                        "shuffle_finetune_comparison.csv", "scratch/finetune_curves.csv", "a/pretrain_curves.csv",
                        "d/finetune_curves.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream table(dir / "ablation_table.csv");
  std::string line;
  int lines = 0;
  while (std::getline(table, line)) ++lines;
  EXPECT_EQ(lines, 6);
  std::filesystem::remove_all(dir);
}
