#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "updetr/image.hpp"
#include "updetr/prediction.hpp"
#include "updetr/random.hpp"
#include "updetr/tensor.hpp"

namespace updetr {

enum class HeadMode { Pretext, Detect };

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t queries = 16;      // N
  std::size_t max_patches = 4;   // M_max
  std::size_t backbone_channels = 64;
  std::size_t classes = 3;       // K, detection only
  bool freeze_backbone = true;
  bool use_attention_mask = true;
  bool use_query_shuffle = false;
  bool use_reconstruction = true;
  bool aux_losses = true;

  /// Throws ConfigError on violated invariants (divisibility of heads and groups).
  void validate(std::size_t patches) const;
};

/// Named parameters in registration order (checkpoint order).
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  Tensor& add(std::string name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Prefix shared by every backbone parameter name.
inline constexpr const char* kBackbonePrefix = "backbone.";
/// Smallest image side the backbone accepts (three stride-2 stages).
inline constexpr std::size_t kMinBackboneSide = 8;
/// Classes of the linear probe used to pre-train the backbone on shape crops.
inline constexpr std::size_t kShapeProbeClasses = 3;

/// Prefix of the classification head, re-initialised when switching modes.
inline constexpr const char* kClassHeadPrefix = "head.class.";

/// Additive N×N group mask: 0 inside a group of N/M consecutive queries,
/// kMaskedLogit across groups.
Tensor build_attention_mask(std::size_t queries, std::size_t patches);

/// Uniformly random permutation of [0, n).
std::vector<std::size_t> shuffle_permutation(std::size_t n, Rng& rng);

/// Fixed 2-D sine positional encoding, [H·W × d] (y in the first half of the
/// channels, x in the second).
Tensor sine_position_encoding(std::size_t height, std::size_t width, std::size_t d_model);

struct DecoderOutput {
  std::vector<Tensor> layers;          // each [N×d], after the final decoder norm
  std::vector<Tensor> self_attention;  // each [heads×N×N]
};

struct PretextForward {
  std::vector<PredictionSet> per_layer;  // last entry is the final prediction
  Tensor patch_features;                 // [M×C] backbone GAP features, detached
  std::vector<std::size_t> permutation;  // query embedding permutation π
};

class Model {
 public:
  Model(const ModelConfig& config, HeadMode mode, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  HeadMode mode() const { return mode_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Applies the freeze flag: backbone parameters stop requiring gradients.
  void set_backbone_frozen(bool frozen);
  bool backbone_frozen() const;

  Tensor backbone_forward(const Tensor& image) const;  // [3×H×W] -> [C×H/8×W/8]
  Tensor patch_feature(const Tensor& patch) const;     // -> [C]
  Tensor encode(const Tensor& feature_map) const;      // -> [HW×d]
  /// The encoder layer stack alone, on tokens that already carry positions.
  Tensor encoder_layers(const Tensor& tokens) const;
  Tensor assign_groups(const Tensor& patch_features, std::span<const std::size_t> permutation) const;
  DecoderOutput decode(const Tensor& memory, const Tensor& decoder_inputs,
                       const std::optional<Tensor>& mask) const;
  PredictionSet heads(const Tensor& decoder_out) const;

  /// Patch-conditioned forward. `shuffle_seed` feeds the query shuffle when enabled.
  PretextForward forward_pretrain(const ImageRaster& image, std::span<const ImageRaster> patches,
                                  std::uint64_t shuffle_seed = 0) const;
  /// Plain detection forward (no patches, mask or shuffle); one set per decoder layer.
  std::vector<PredictionSet> forward_detect(const ImageRaster& image) const;

  /// Backbone + GAP + linear classifier used to pre-train the backbone.
  Tensor classify_patch(const Tensor& patch) const;

 private:
  Tensor attention(const std::string& prefix, const Tensor& queries, const Tensor& keys,
                   const std::optional<Tensor>& mask, Tensor* weights_out) const;
  Tensor feed_forward(const std::string& prefix, const Tensor& x) const;
  Tensor norm(const std::string& prefix, const Tensor& x) const;
  Tensor p(const std::string& name) const { return params_.get(name); }

  ModelConfig config_;
  HeadMode mode_;
  ParameterStore params_;
};

/// Checkpoint: "UPDT", u32 version, u32 record count, then per record
/// u32 name length, name, u32 rank, u64 dims, little-endian f64 payload.
struct CheckpointRecord {
  std::string name;
  Tensor value;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, std::span<const CheckpointRecord> records);
std::vector<CheckpointRecord> read_checkpoint(const std::string& path);

/// Model parameters plus "meta.*" records describing the configuration.
std::vector<CheckpointRecord> model_records(const Model& model);
/// Rebuilds a model (config, mode and weights) from a checkpoint.
Model model_from_records(std::span<const CheckpointRecord> records);

/// Copies matching tensors into `model`. Every model tensor must be present
/// with an identical shape, except those under `skip_prefix`; otherwise a
/// LoadError lists the offending tensors.
void load_parameters(Model& model, std::span<const CheckpointRecord> records,
                     const std::string& skip_prefix = "");

}  // namespace updetr
