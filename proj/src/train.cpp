#include "updetr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "updetr/dataset.hpp"
#include "updetr/error.hpp"
#include "updetr/losses.hpp"
#include "updetr/matcher.hpp"
#include "updetr/ops.hpp"

namespace updetr {

// ---- configuration ----

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (lr_drop_epoch >= epochs) throw ConfigError("lr_drop_epoch must be smaller than epochs");
  if (!(lr_transformer > 0) || !(lr_backbone > 0)) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (pretext.patches == 0) throw ConfigError("patches must be at least 1");
  model.validate(pretext.patches);
  if (pretext.dropout_rate < 0 || pretext.dropout_rate >= 1) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (data_dir.empty() && train_images == 0) throw ConfigError("train_images must be positive");
}

TrainConfig default_config(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  if (mode == TrainMode::Finetune) {
    cfg.epochs = 60;
    cfg.lr_drop_epoch = 40;
    cfg.model.freeze_backbone = false;
  }
  return cfg;
}

namespace {

using json = nlohmann::json;
using Setter = std::function<void(TrainConfig&, const json&, const std::string&)>;

std::size_t as_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError("config key '" + key + "' expects a non-negative integer");
  return v.get<std::size_t>();
}
double as_real(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' expects a number");
  return v.get<double>();
}
bool as_flag(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "' expects true or false");
  return v.get<bool>();
}
std::string as_text(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' expects a string");
  return v.get<std::string>();
}

template <typename T>
Setter count(T TrainConfig::*outer, std::size_t T::*field) {
  return [=](TrainConfig& c, const json& v, const std::string& k) { (c.*outer).*field = as_count(v, k); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["mode"] = [](TrainConfig& c, const json& v, const std::string& k) {
      const std::string s = as_text(v, k);
      if (s == "pretrain") c.mode = TrainMode::Pretrain;
      else if (s == "finetune") c.mode = TrainMode::Finetune;
      else throw ConfigError("config key 'mode' expects pretrain or finetune, got '" + s + "'");
    };
    t["epochs"] = [](TrainConfig& c, const json& v, const std::string& k) { c.epochs = as_count(v, k); };
    t["lr_drop_epoch"] = [](TrainConfig& c, const json& v, const std::string& k) { c.lr_drop_epoch = as_count(v, k); };
    t["lr_transformer"] = [](TrainConfig& c, const json& v, const std::string& k) { c.lr_transformer = as_real(v, k); };
    t["lr_backbone"] = [](TrainConfig& c, const json& v, const std::string& k) { c.lr_backbone = as_real(v, k); };
    t["weight_decay"] = [](TrainConfig& c, const json& v, const std::string& k) { c.weight_decay = as_real(v, k); };
    t["batch_size"] = [](TrainConfig& c, const json& v, const std::string& k) { c.batch_size = as_count(v, k); };
    t["grad_clip"] = [](TrainConfig& c, const json& v, const std::string& k) { c.grad_clip = as_real(v, k); };
    t["seed"] = [](TrainConfig& c, const json& v, const std::string& k) { c.seed = as_count(v, k); };
    t["init_checkpoint"] = [](TrainConfig& c, const json& v, const std::string& k) { c.init_checkpoint = as_text(v, k); };

    t["d_model"] = count(&TrainConfig::model, &ModelConfig::d_model);
    t["heads"] = count(&TrainConfig::model, &ModelConfig::heads);
    t["enc_layers"] = count(&TrainConfig::model, &ModelConfig::enc_layers);
    t["dec_layers"] = count(&TrainConfig::model, &ModelConfig::dec_layers);
    t["ffn_dim"] = count(&TrainConfig::model, &ModelConfig::ffn_dim);
    t["queries"] = count(&TrainConfig::model, &ModelConfig::queries);
    t["max_patches"] = count(&TrainConfig::model, &ModelConfig::max_patches);
    t["backbone_channels"] = count(&TrainConfig::model, &ModelConfig::backbone_channels);
    t["classes"] = count(&TrainConfig::model, &ModelConfig::classes);
    t["freeze_backbone"] = [](TrainConfig& c, const json& v, const std::string& k) { c.model.freeze_backbone = as_flag(v, k); };
    t["use_attention_mask"] = [](TrainConfig& c, const json& v, const std::string& k) { c.model.use_attention_mask = as_flag(v, k); };
    t["use_query_shuffle"] = [](TrainConfig& c, const json& v, const std::string& k) { c.model.use_query_shuffle = as_flag(v, k); };
    t["use_reconstruction"] = [](TrainConfig& c, const json& v, const std::string& k) { c.model.use_reconstruction = as_flag(v, k); };
    t["aux_losses"] = [](TrainConfig& c, const json& v, const std::string& k) { c.model.aux_losses = as_flag(v, k); };

    t["patches"] = count(&TrainConfig::pretext, &PretextConfig::patches);
    t["patch_side"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.crop.patch_side = as_count(v, k); };
    t["min_crop_fraction"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.crop.min_side_fraction = as_real(v, k); };
    t["short_lo"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.resize.short_lo = as_count(v, k); };
    t["short_hi"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.resize.short_hi = as_count(v, k); };
    t["long_max"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.resize.long_max = as_count(v, k); };
    t["use_augment"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.use_augment = as_flag(v, k); };
    t["brightness"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.augment.brightness = as_real(v, k); };
    t["contrast"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.augment.contrast = as_real(v, k); };
    t["saturation"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.augment.saturation = as_real(v, k); };
    t["grayscale_probability"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.augment.grayscale_probability = as_real(v, k); };
    t["dropout_rate"] = [](TrainConfig& c, const json& v, const std::string& k) { c.pretext.dropout_rate = as_real(v, k); };
    t["keep_dropped_targets"] = [](TrainConfig& c, const json& v, const std::string& k) { c.keep_dropped_targets = as_flag(v, k); };

    t["data_dir"] = [](TrainConfig& c, const json& v, const std::string& k) { c.data_dir = as_text(v, k); };
    t["val_dir"] = [](TrainConfig& c, const json& v, const std::string& k) { c.val_dir = as_text(v, k); };
    t["canvas"] = [](TrainConfig& c, const json& v, const std::string& k) { c.synth.width = c.synth.height = as_count(v, k); };
    t["min_shapes"] = [](TrainConfig& c, const json& v, const std::string& k) { c.synth.min_shapes = as_count(v, k); };
    t["max_shapes"] = [](TrainConfig& c, const json& v, const std::string& k) { c.synth.max_shapes = as_count(v, k); };
    t["min_shape_size"] = [](TrainConfig& c, const json& v, const std::string& k) { c.synth.min_size = as_real(v, k); };
    t["max_shape_size"] = [](TrainConfig& c, const json& v, const std::string& k) { c.synth.max_size = as_real(v, k); };
    t["train_images"] = [](TrainConfig& c, const json& v, const std::string& k) { c.train_images = as_count(v, k); };
    t["val_images"] = [](TrainConfig& c, const json& v, const std::string& k) { c.val_images = as_count(v, k); };
    t["data_seed"] = [](TrainConfig& c, const json& v, const std::string& k) { c.data_seed = as_count(v, k); };

    t["backbone_warmup_steps"] = [](TrainConfig& c, const json& v, const std::string& k) { c.backbone_warmup_steps = as_count(v, k); };
    t["backbone_warmup_lr"] = [](TrainConfig& c, const json& v, const std::string& k) { c.backbone_warmup_lr = as_real(v, k); };
    t["backbone_seed"] = [](TrainConfig& c, const json& v, const std::string& k) { c.backbone_seed = as_count(v, k); };
    t["no_object_weight"] = [](TrainConfig& c, const json& v, const std::string& k) { c.no_object_weight = as_real(v, k); };
    t["target_ap50"] = [](TrainConfig& c, const json& v, const std::string& k) { c.target_ap50 = as_real(v, k); };
    return t;
  }();
  return table;
}

void set_key(TrainConfig& cfg, const std::string& key, const json& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, value, key);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& json_value) {
  json value = json::parse(json_value, nullptr, false);
  if (value.is_discarded()) value = json_value;  // bare word, e.g. --mode finetune
  set_key(cfg, key, value);
}

void apply_config_json(TrainConfig& cfg, const std::string& text) {
  const json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config is not valid JSON");
  if (!doc.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (value.is_object() || value.is_array()) throw ConfigError("config key '" + key + "' must be a scalar");
    set_key(cfg, key, value);
  }
}

TrainConfig load_config(const std::filesystem::path& path, std::optional<TrainMode> mode) {
  std::ifstream is(path);
  if (!is) throw IoError(path.string() + ": cannot open config");
  std::stringstream ss;
  ss << is.rdbuf();
  TrainConfig cfg = default_config(mode.value_or(TrainMode::Pretrain));
  try {
    apply_config_json(cfg, ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return cfg;
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) { return epoch < cfg.lr_drop_epoch ? 1.0 : 0.1; }

// ---- optimizer ----

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, double lr, double weight_decay,
                  const AdamWHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw DimensionError("adamw_update: buffer sizes differ");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    param[i] = param[i] * decay - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
  }
}

Optimizer::Optimizer(const ParameterStore& params) {
  for (const auto& e : params.entries())
    if (e.value.requires_grad())
      slots_.push_back({e.name, std::vector<double>(e.value.numel(), 0.0), std::vector<double>(e.value.numel(), 0.0)});
}

bool Optimizer::has_slot(const std::string& name) const {
  return std::any_of(slots_.begin(), slots_.end(), [&](const Slot& s) { return s.name == name; });
}

double Optimizer::step(ParameterStore& params, double lr_transformer, double lr_backbone, double weight_decay,
                       double max_norm) {
  double sq = 0.0;
  for (const auto& s : slots_) {
    const Tensor& p = params.get(s.name);
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = (max_norm > 0 && norm > max_norm) ? max_norm / (norm + 1e-6) : 1.0;
  ++step_;
  std::vector<double> g;
  for (auto& s : slots_) {
    Tensor& p = params.get(s.name);
    g.assign(p.numel(), 0.0);
    if (p.has_grad())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = p.grad()[i] * factor;
    const double lr = s.name.starts_with(kBackbonePrefix) ? lr_backbone : lr_transformer;
    adamw_update(p.mutable_data(), g, s.m, s.v, step_, lr, weight_decay);
    p.zero_grad();
  }
  return norm;
}

std::vector<CheckpointRecord> Optimizer::records() const {
  std::vector<CheckpointRecord> out;
  out.push_back({"optim.step", Tensor({1}, {static_cast<double>(step_)})});
  for (const auto& s : slots_) {
    out.push_back({"optim.m." + s.name, Tensor({s.m.size()}, s.m)});
    out.push_back({"optim.v." + s.name, Tensor({s.v.size()}, s.v)});
  }
  return out;
}

void Optimizer::load(std::span<const CheckpointRecord> records) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.value;
  const auto need = [&](const std::string& name, std::size_t n) -> const Tensor& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw LoadError("checkpoint lacks optimizer record " + name);
    if (it->second->numel() != n) throw LoadError("optimizer record " + name + " has the wrong size");
    return *it->second;
  };
  step_ = static_cast<std::uint64_t>(need("optim.step", 1)[0]);
  for (auto& s : slots_) {
    const Tensor& m = need("optim.m." + s.name, s.m.size());
    const Tensor& v = need("optim.v." + s.name, s.v.size());
    std::copy(m.data().begin(), m.data().end(), s.m.begin());
    std::copy(v.data().begin(), v.data().end(), s.v.begin());
  }
}

std::vector<CheckpointRecord> training_records(const TrainResult& result) {
  auto out = model_records(result.model);
  for (auto& r : result.optimizer.records()) out.push_back(std::move(r));
  out.push_back({"train.epoch", Tensor({1}, {static_cast<double>(result.epochs_done)})});
  return out;
}

// ---- data ----

namespace {

// Independent random streams, one per purpose.
enum Stream : std::uint64_t { kInit = 11, kOrder = 12, kSample = 13, kValData = 14, kPretextData = 15 };

std::uint64_t stream(std::uint64_t seed, Stream s) { return derive_seed(seed, s); }

std::vector<DetectionSample> dataset_or_synthetic(const std::string& dir, std::size_t count, std::uint64_t seed,
                                                  const SynthSpec& spec) {
  if (!dir.empty()) return read_dataset(dir);
  return generate_dataset(count, seed, spec);
}

}  // namespace

std::vector<ImageRaster> pretrain_images(const TrainConfig& cfg) {
  auto samples = dataset_or_synthetic(cfg.data_dir, cfg.train_images, stream(cfg.data_seed, kPretextData), cfg.synth);
  std::vector<ImageRaster> out;
  out.reserve(samples.size());
  for (auto& s : samples) out.push_back(std::move(s.image));
  return out;
}

std::vector<DetectionSample> finetune_train_set(const TrainConfig& cfg) {
  return dataset_or_synthetic(cfg.data_dir, cfg.train_images, cfg.data_seed, cfg.synth);
}

std::vector<DetectionSample> finetune_val_set(const TrainConfig& cfg) {
  return dataset_or_synthetic(cfg.val_dir, cfg.val_images, stream(cfg.data_seed, kValData), cfg.synth);
}

// ---- training ----

double warmup_backbone(Model& model, const TrainConfig& cfg) {
  // Start from a backbone that depends only on backbone_seed, so pre-trained
  // and scratch runs share it.
  {
    Model fresh(model.config(), model.mode(), cfg.backbone_seed);
    for (auto& e : model.parameters().entries())
      if (e.name.starts_with(kBackbonePrefix)) {
        const Tensor& src = fresh.parameters().get(e.name);
        std::copy(src.data().begin(), src.data().end(), e.value.mutable_data().begin());
      }
  }
  if (cfg.backbone_warmup_steps == 0) return 0.0;
  const bool was_frozen = model.backbone_frozen();
  // Only backbone tensors train here; hide the rest from the optimizer.
  std::vector<std::pair<Tensor*, bool>> saved;
  for (auto& e : model.parameters().entries()) {
    saved.emplace_back(&e.value, e.value.requires_grad());
    e.value.set_requires_grad(e.name.starts_with(kBackbonePrefix));
  }
  Optimizer opt(model.parameters());
  constexpr std::size_t kBatch = 16;
  std::size_t correct = 0, seen = 0;
  const std::size_t side = cfg.pretext.crop.patch_side;
  for (std::size_t step = 0; step < cfg.backbone_warmup_steps; ++step) {
    for (std::size_t j = 0; j < kBatch; ++j) {
      const std::uint64_t seed = derive_seed(cfg.backbone_seed, step * kBatch + j);
      const DetectionSample scene = synth_image(seed, cfg.synth);
      Rng rng(derive_seed(seed, 1));
      const auto& obj = scene.objects[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(scene.objects.size()) - 1))];
      BoxCxCyWh box = obj.box;
      const double grow = rng.uniform(1.0, 1.4);
      box.w = std::min(1.0, box.w * grow);
      box.h = std::min(1.0, box.h * grow);
      box.cx = std::clamp(box.cx, box.w / 2, 1 - box.w / 2);
      box.cy = std::clamp(box.cy, box.h / 2, 1 - box.h / 2);
      ImageRaster patch = crop_patch(scene.image, box, side);
      if (cfg.pretext.use_augment) patch = augment(patch, cfg.pretext.augment, rng);
      Tape tape;
      TapeScope scope(tape);
      const Tensor logits = model.classify_patch(image_to_tensor(patch));
      backward(scale(cross_entropy(logits, obj.cls), 1.0 / kBatch), tape);
      if (step + 100 / kBatch + 1 > cfg.backbone_warmup_steps) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits.numel(); ++c)
          if (logits[c] > logits[arg]) arg = c;
        correct += arg == obj.cls;
        ++seen;
      }
    }
    opt.step(model.parameters(), cfg.backbone_warmup_lr, cfg.backbone_warmup_lr, 0.0, 0.0);
  }
  for (auto [t, flag] : saved) t->set_requires_grad(flag);
  model.set_backbone_frozen(was_frozen);
  return seen == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(seen);
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  Rng rng(derive_seed(stream(seed, kOrder), epoch));
  return shuffle_permutation(n, rng);
}

void add_loss_records(std::vector<CurveRecord>& curves, std::size_t epoch, const EpochLoss& l) {
  curves.push_back({epoch, "train", "loss_total", l.total});
  curves.push_back({epoch, "train", "loss_cls", l.cls});
  curves.push_back({epoch, "train", "loss_box", l.box});
  curves.push_back({epoch, "train", "loss_rec", l.rec});
}

std::size_t resumed_epoch(std::span<const CheckpointRecord> records) {
  for (const auto& r : records)
    if (r.name == "train.epoch") return static_cast<std::size_t>(r.value[0]);
  throw LoadError("checkpoint has no training progress record");
}

ModelConfig model_config_of(const TrainConfig& cfg) { return cfg.model; }

struct Accumulated {
  Tensor total, cls, box, rec;
  void add_breakdown(const LossBreakdown& b) {
    const auto acc = [](Tensor& into, const Tensor& x) { into = into.defined() ? add(into, x) : x; };
    acc(total, b.total);
    acc(cls, b.cls);
    acc(box, b.box);
    acc(rec, b.rec);
  }
};

}  // namespace

TrainResult pretrain(const TrainConfig& cfg, std::span<const ImageRaster> images,
                     std::span<const CheckpointRecord> resume, const TrainHooks& hooks) {
  cfg.validate();
  if (images.empty()) throw InputError("pretrain: no training images");
  const auto build = [&]() -> TrainResult {
    if (!resume.empty()) {
      Model model = model_from_records(resume);
      if (model.mode() != HeadMode::Pretext) throw LoadError("resume checkpoint is not a pretext model");
      Optimizer opt(model.parameters());
      opt.load(resume);
      return {std::move(model), std::move(opt), resumed_epoch(resume), {}};
    }
    Model model(model_config_of(cfg), HeadMode::Pretext, stream(cfg.seed, kInit));
    warmup_backbone(model, cfg);
    model.set_backbone_frozen(cfg.model.freeze_backbone);
    Optimizer opt(model.parameters());
    return {std::move(model), std::move(opt), 0, {}};
  };
  TrainResult run = build();
  Model& model = run.model;
  if (hooks.on_start) hooks.on_start(model);

  PretextConfig pc = cfg.pretext;
  pc.max_queries = cfg.model.queries;
  const std::size_t n = images.size();
  const PretextLossOptions loss_opts{pc.patches, cfg.model.use_reconstruction};
  // patch k's target may only be matched inside query group k
  const std::size_t group_size = cfg.model.queries / pc.patches;

  for (std::size_t epoch = run.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    const double sched = lr_schedule(epoch, cfg);
    EpochLoss sum;
    std::size_t count = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      if (hooks.max_steps && run.optimizer.steps() >= *hooks.max_steps) return run;
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<PretextSample> batch(end - start);
#pragma omp parallel for schedule(dynamic)
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t idx = order[start + b];
        batch[b] = make_pretext_sample(images[idx], pc, derive_seed(derive_seed(stream(cfg.seed, kSample), epoch), idx));
      }
      double batch_loss = 0.0;
      for (const auto& s : batch) {
        std::vector<BoxCxCyWh> boxes;
        std::vector<std::size_t> keep;
        for (std::size_t k = 0; k < s.gt_boxes.size(); ++k)
          if (cfg.keep_dropped_targets || !s.dropped[k]) {
            boxes.push_back(s.gt_boxes[k]);
            keep.push_back(k);
          }
        Tape tape;
        TapeScope scope(tape);
        const auto fwd = model.forward_pretrain(s.image, s.patches, derive_seed(s.seed, 1));
        const Tensor targets = keep.empty() ? Tensor() : gather_rows(fwd.patch_features, keep);
        Accumulated acc;
        for (const auto& layer : fwd.per_layer) {
          const Assignment a = group_match(build_cost(layer, boxes), keep, group_size);
          acc.add_breakdown(hungarian_loss(layer, boxes, targets, a, loss_opts));
        }
        backward(scale(acc.total, 1.0 / static_cast<double>(batch.size())), tape);
        sum.total += acc.total.item();
        sum.cls += acc.cls.item();
        sum.box += acc.box.item();
        sum.rec += acc.rec.item();
        batch_loss += acc.total.item() / static_cast<double>(batch.size());
        ++count;
      }
      run.optimizer.step(model.parameters(), cfg.lr_transformer * sched, cfg.lr_backbone * sched,
                         cfg.weight_decay, cfg.grad_clip);
      if (hooks.on_step) hooks.on_step(run.optimizer.steps(), batch_loss);
    }
    const double c = static_cast<double>(count);
    add_loss_records(run.curves, epoch + 1, {sum.total / c, sum.cls / c, sum.box / c, sum.rec / c});
    run.epochs_done = epoch + 1;
    if (hooks.stop_after_epoch && hooks.stop_after_epoch(run.curves)) break;
  }
  return run;
}

TrainResult finetune(const TrainConfig& cfg, std::span<const DetectionSample> train,
                     std::span<const DetectionSample> val, std::span<const CheckpointRecord> resume,
                     const TrainHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw InputError("finetune: no training images");
  for (const auto& s : train)
    for (const auto& o : s.objects)
      if (o.cls >= cfg.model.classes)
        throw InputError("finetune: class " + std::to_string(o.cls) + " exceeds classes=" +
                         std::to_string(cfg.model.classes));
  const auto build = [&]() -> TrainResult {
    if (!resume.empty()) {
      Model model = model_from_records(resume);
      if (model.mode() != HeadMode::Detect) throw LoadError("resume checkpoint is not a detection model");
      Optimizer opt(model.parameters());
      opt.load(resume);
      return {std::move(model), std::move(opt), resumed_epoch(resume), {}};
    }
    ModelConfig mc = model_config_of(cfg);
    mc.freeze_backbone = false;
    Model model(mc, HeadMode::Detect, stream(cfg.seed, kInit));
    if (!cfg.init_checkpoint.empty()) {
      load_parameters(model, read_checkpoint(cfg.init_checkpoint), kClassHeadPrefix);
    } else {
      warmup_backbone(model, cfg);
    }
    model.set_backbone_frozen(false);
    Optimizer opt(model.parameters());
    return {std::move(model), std::move(opt), 0, {}};
  };
  TrainResult run = build();
  Model& model = run.model;
  if (hooks.on_start) hooks.on_start(model);
  const std::size_t n = train.size();

  for (std::size_t epoch = run.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    const double sched = lr_schedule(epoch, cfg);
    EpochLoss sum;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      if (hooks.max_steps && run.optimizer.steps() >= *hooks.max_steps) return run;
      const std::size_t end = std::min(n, start + cfg.batch_size);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const DetectionSample& s = train[order[b]];
        std::vector<BoxCxCyWh> boxes;
        std::vector<std::size_t> classes;
        for (const auto& o : s.objects) {
          boxes.push_back(o.box);
          classes.push_back(o.cls);
        }
        Tape tape;
        TapeScope scope(tape);
        const auto layers = model.forward_detect(s.image);
        Accumulated acc;
        for (const auto& layer : layers) {
          const Assignment a = hungarian(build_cost(layer, boxes, classes));
          acc.add_breakdown(detection_loss(layer, boxes, classes, a, cfg.no_object_weight));
        }
        backward(scale(acc.total, 1.0 / static_cast<double>(end - start)), tape);
        sum.total += acc.total.item();
        sum.cls += acc.cls.item();
        sum.box += acc.box.item();
        batch_loss += acc.total.item() / static_cast<double>(end - start);
      }
      run.optimizer.step(model.parameters(), cfg.lr_transformer * sched, cfg.lr_backbone * sched,
                         cfg.weight_decay, cfg.grad_clip);
      if (hooks.on_step) hooks.on_step(run.optimizer.steps(), batch_loss);
    }
    const double c = static_cast<double>(n);
    add_loss_records(run.curves, epoch + 1, {sum.total / c, sum.cls / c, sum.box / c, 0.0});
    if (!val.empty()) {
      const ApReport r = evaluate_model(model, val);
      run.curves.push_back({epoch + 1, "val", "AP", r.mean_ap});
      run.curves.push_back({epoch + 1, "val", "AP50", r.mean_ap50});
      run.curves.push_back({epoch + 1, "val", "AP75", r.mean_ap75});
    }
    run.epochs_done = epoch + 1;
    if (hooks.stop_after_epoch && hooks.stop_after_epoch(run.curves)) break;
  }
  return run;
}

std::optional<std::size_t> epochs_to_ap50(std::span<const CurveRecord> curves, double target) {
  for (const auto& r : curves)
    if (r.split == "val" && r.metric == "AP50" && r.value >= target) return r.epoch;
  return std::nullopt;
}

namespace {

std::vector<Tensor> backbone_snapshot(const Model& model) {
  std::vector<Tensor> out;
  for (const auto& e : model.parameters().entries())
    if (e.name.starts_with(kBackbonePrefix)) out.push_back(e.value.detach());
  return out;
}

bool same_backbone(const std::vector<Tensor>& before, const Model& model) {
  std::size_t i = 0;
  for (const auto& e : model.parameters().entries()) {
    if (!e.name.starts_with(kBackbonePrefix)) continue;
    const auto a = before.at(i++).data(), b = e.value.data();
    if (!std::equal(a.begin(), a.end(), b.begin())) return false;
  }
  return true;
}

void write_run(const std::filesystem::path& dir, const std::string& stem, const TrainResult& run) {
  std::filesystem::create_directories(dir);
  write_curves(dir / (stem + "_curves.csv"), run.curves);
  write_checkpoint((dir / (stem + ".ckpt")).string(), training_records(run));
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<AblationRow> ablation_matrix(const TrainConfig& pretrain_cfg, const TrainConfig& finetune_cfg,
                                         const std::filesystem::path& out) {
  pretrain_cfg.validate();
  finetune_cfg.validate();
  std::filesystem::create_directories(out);
  const auto images = pretrain_images(pretrain_cfg);
  const auto train = finetune_train_set(finetune_cfg);
  const auto val = finetune_val_set(finetune_cfg);

  const auto run_pretrain = [&](const TrainConfig& cfg, const std::string& name, std::optional<bool>* freeze_held) {
    std::vector<Tensor> before;
    TrainHooks hooks;
    hooks.on_start = [&](const Model& m) { before = backbone_snapshot(m); };
    TrainResult run = pretrain(cfg, images, {}, hooks);
    if (freeze_held) *freeze_held = same_backbone(before, run.model);
    write_run(out / name, "pretrain", run);
    return run;
  };
  const auto run_finetune = [&](const std::string& name, const std::string& init) {
    TrainConfig cfg = finetune_cfg;
    cfg.init_checkpoint = init;
    TrainResult run = finetune(cfg, train, val);
    write_run(out / name, "finetune", run);
    return run;
  };
  const auto summarize = [&](AblationRow row, const TrainResult& ft) {
    for (const auto& r : ft.curves)
      if (r.split == "val" && r.metric == "AP50") {
        row.final_ap50 = r.value;
        row.best_ap50 = std::max(row.best_ap50, r.value);
      }
    row.epochs_to_target = epochs_to_ap50(ft.curves, finetune_cfg.target_ap50);
    return row;
  };

  std::vector<AblationRow> rows;
  rows.push_back(summarize({"DETR (scratch)", false, false, false, 0, 0, std::nullopt, std::nullopt},
                           run_finetune("scratch", "")));

  struct Case {
    const char* name;
    bool frozen, rec;
  };
  std::vector<CurveRecord> case_d_curves;
  for (const Case c : {Case{"a", false, false}, Case{"b", true, false}, Case{"c", false, true}, Case{"d", true, true}}) {
    TrainConfig cfg = pretrain_cfg;
    cfg.model.freeze_backbone = c.frozen;
    cfg.model.use_reconstruction = c.rec;
    std::optional<bool> held;
    const TrainResult pre = run_pretrain(cfg, c.name, &held);
    if (std::string(c.name) == "d") case_d_curves = pre.curves;
    AblationRow row{c.name, true, c.frozen, c.rec, 0, 0, std::nullopt, std::nullopt};
    if (c.frozen) row.freeze_held = held;
    rows.push_back(summarize(row, run_finetune(c.name, (out / c.name / "pretrain.ckpt").string())));
  }

  // Attention mask on/off: pretext loss curves.
  {
    TrainConfig cfg = pretrain_cfg;
    cfg.model.freeze_backbone = cfg.model.use_reconstruction = true;
    cfg.model.use_attention_mask = !pretrain_cfg.model.use_attention_mask;
    const TrainResult other = run_pretrain(cfg, "mask_toggled", nullptr);
    const bool base_on = pretrain_cfg.model.use_attention_mask;
    write_comparison(out / "mask_comparison.csv", base_on ? "mask_on" : "mask_off",
                     base_on ? case_d_curves : other.curves, base_on ? "mask_off" : "mask_on",
                     base_on ? other.curves : case_d_curves, "train", "loss_total");
  }
  // Query shuffle on/off: pretext loss and fine-tuning AP50.
  {
    TrainConfig cfg = pretrain_cfg;
    cfg.model.freeze_backbone = cfg.model.use_reconstruction = true;
    cfg.model.use_query_shuffle = !pretrain_cfg.model.use_query_shuffle;
    const TrainResult other = run_pretrain(cfg, "shuffle_toggled", nullptr);
    const TrainResult other_ft = run_finetune("shuffle_toggled", (out / "shuffle_toggled" / "pretrain.ckpt").string());
    const auto d_ft = read_curves(out / "d" / "finetune_curves.csv");
    const bool base_on = pretrain_cfg.model.use_query_shuffle;
    const std::string base_label = base_on ? "shuffle_on" : "shuffle_off";
    const std::string other_label = base_on ? "shuffle_off" : "shuffle_on";
    write_comparison(out / "shuffle_pretext_comparison.csv", base_label, case_d_curves, other_label, other.curves,
                     "train", "loss_total");
    write_comparison(out / "shuffle_finetune_comparison.csv", base_label, d_ft, other_label, other_ft.curves, "val",
                     "AP50");
  }

  std::ofstream table(out / "ablation_table.csv");
  if (!table) throw IoError((out / "ablation_table.csv").string() + ": cannot open for writing");
  table << "case,frozen_cnn,feature_reconstruction,final_AP50,best_AP50,epochs_to_target,freeze_held\n";
  for (const auto& r : rows) {
    table << r.name << ',' << (r.pretrained ? (r.frozen ? "yes" : "no") : "-") << ','
          << (r.pretrained ? (r.reconstruction ? "yes" : "no") : "-") << ',' << fixed(r.final_ap50) << ','
          << fixed(r.best_ap50) << ',' << (r.epochs_to_target ? std::to_string(*r.epochs_to_target) : "none") << ','
          << (r.freeze_held ? (*r.freeze_held ? "yes" : "no") : "-") << '\n';
  }
  return rows;
}

}  // namespace updetr
