#include "updetr/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "updetr/error.hpp"
#include "updetr/ops.hpp"

namespace updetr {

void ModelConfig::validate(std::size_t patches) const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw ConfigError("model: d_model must be a positive multiple of heads");
  if (d_model % 2 != 0) throw ConfigError("model: d_model must be even for the sine encoding");
  if (queries == 0 || backbone_channels == 0 || ffn_dim == 0)
    throw ConfigError("model: queries, backbone_channels and ffn_dim must be positive");
  if (patches > max_patches)
    throw CapacityError("model: " + std::to_string(patches) + " patches exceed max_patches " +
                        std::to_string(max_patches));
  if (patches > 0 && queries % patches != 0)
    throw ConfigError("model: queries (" + std::to_string(queries) + ") not divisible by patches (" +
                      std::to_string(patches) + ")");
}

Tensor& ParameterStore::add(std::string name, Tensor value) {
  if (find(name)) throw ContractError("duplicate parameter " + name);
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.back().value;
}

const Tensor* ParameterStore::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.value;
  return nullptr;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw ContractError("unknown parameter " + name);
}

Tensor& ParameterStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).get(name));
}

Tensor build_attention_mask(std::size_t queries, std::size_t patches) {
  if (patches == 0 || queries % patches != 0)
    throw ConfigError("attention mask: " + std::to_string(patches) + " groups do not divide " +
                      std::to_string(queries) + " queries");
  const std::size_t group = queries / patches;
  Tensor mask = Tensor::zeros({queries, queries});
  auto m = mask.mutable_data();
  for (std::size_t i = 0; i < queries; ++i)
    for (std::size_t j = 0; j < queries; ++j)
      if (i / group != j / group) m[i * queries + j] = kMaskedLogit;
  return mask;
}

std::vector<std::size_t> shuffle_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
  return perm;
}

Tensor sine_position_encoding(std::size_t height, std::size_t width, std::size_t d_model) {
  const std::size_t feats = d_model / 2;
  Tensor pe = Tensor::zeros({height * width, d_model});
  auto out = pe.mutable_data();
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double ey = (static_cast<double>(y) + 1.0) / static_cast<double>(height) * two_pi;
      const double ex = (static_cast<double>(x) + 1.0) / static_cast<double>(width) * two_pi;
      double* row = &out[(y * width + x) * d_model];
      for (std::size_t i = 0; i < feats; ++i) {
        const double dim_t = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(feats));
        row[i] = i % 2 == 0 ? std::sin(ey / dim_t) : std::cos(ey / dim_t);
        row[feats + i] = i % 2 == 0 ? std::sin(ex / dim_t) : std::cos(ex / dim_t);
      }
    }
  }
  return pe;
}

namespace {

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = rng.uniform(-limit, limit);
  return t;
}

constexpr std::size_t kBackboneWidths[] = {16, 32};

}  // namespace

Model::Model(const ModelConfig& config, HeadMode mode, std::uint64_t seed)
    : config_(config), mode_(mode) {
  config_.validate(0);
  Rng rng(seed);
  const std::size_t d = config_.d_model, c = config_.backbone_channels;

  const auto add_linear = [&](const std::string& name, std::size_t out, std::size_t in, bool bias = true) {
    params_.add(name + ".weight", uniform_tensor({out, in}, std::sqrt(6.0 / static_cast<double>(in + out)), rng));
    if (bias) params_.add(name + ".bias", Tensor::zeros({out}, true));
  };
  const auto add_conv = [&](const std::string& name, std::size_t out, std::size_t in) {
    params_.add(name + ".weight", uniform_tensor({out, in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9)), rng));
    params_.add(name + ".bias", Tensor::zeros({out}, true));
  };
  const auto add_norm = [&](const std::string& name) {
    params_.add(name + ".gain", Tensor::full({d}, 1.0, true));
    params_.add(name + ".bias", Tensor::zeros({d}, true));
  };
  const auto add_attention = [&](const std::string& name) {
    for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(name + part, d, d);
  };
  const auto add_ffn = [&](const std::string& name) {
    add_linear(name + ".1", config_.ffn_dim, d);
    add_linear(name + ".2", d, config_.ffn_dim);
  };

  add_conv("backbone.conv1", kBackboneWidths[0], 3);
  add_conv("backbone.conv2", kBackboneWidths[1], kBackboneWidths[0]);
  add_conv("backbone.conv3", c, kBackboneWidths[1]);
  add_linear("backbone.probe", kShapeProbeClasses, c);

  add_linear("input_proj", d, c);
  for (std::size_t l = 0; l < config_.enc_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    add_attention(p + ".attn");
    add_norm(p + ".norm1");
    add_ffn(p + ".ffn");
    add_norm(p + ".norm2");
  }
  if (config_.enc_layers > 0) add_norm("encoder.norm");
  for (std::size_t l = 0; l < config_.dec_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    add_attention(p + ".self");
    add_norm(p + ".norm1");
    add_attention(p + ".cross");
    add_norm(p + ".norm2");
    add_ffn(p + ".ffn");
    add_norm(p + ".norm3");
  }
  add_norm("decoder.norm");
  {
    Tensor q = Tensor::zeros({config_.queries, d}, true);
    for (auto& v : q.mutable_data()) v = rng.normal();
    params_.add("query_embed", q);
  }
  if (mode_ == HeadMode::Pretext) add_linear("patch_proj", d, c, false);
  add_linear("head.class", mode_ == HeadMode::Pretext ? 2 : config_.classes + 1, d);
  add_linear("head.box.1", d, d);
  add_linear("head.box.2", d, d);
  add_linear("head.box.3", 4, d);
  if (mode_ == HeadMode::Pretext) add_linear("head.rec", c, d);

  set_backbone_frozen(config_.freeze_backbone);
}

void Model::set_backbone_frozen(bool frozen) {
  for (auto& e : params_.entries())
    if (e.name.starts_with(kBackbonePrefix)) e.value.set_requires_grad(!frozen);
}

bool Model::backbone_frozen() const { return !params_.get("backbone.conv1.weight").requires_grad(); }

Tensor Model::backbone_forward(const Tensor& image) const {
  if (image.rank() != 3 || image.extent(0) != 3)
    throw InputError("backbone: expected a [3×H×W] image, got " + shape_str(image.shape()));
  if (image.extent(1) < kMinBackboneSide || image.extent(2) < kMinBackboneSide)
    throw InputError("backbone: image " + shape_str(image.shape()) + " smaller than " +
                     std::to_string(kMinBackboneSide) + " pixels");
  Tensor x = relu(conv2d(image, p("backbone.conv1.weight"), p("backbone.conv1.bias"), 2, 1));
  x = relu(conv2d(x, p("backbone.conv2.weight"), p("backbone.conv2.bias"), 2, 1));
  return relu(conv2d(x, p("backbone.conv3.weight"), p("backbone.conv3.bias"), 2, 1));
}

Tensor Model::patch_feature(const Tensor& patch) const {
  return global_average_pool(backbone_forward(patch));
}

Tensor Model::classify_patch(const Tensor& patch) const {
  const Tensor f = reshape(patch_feature(patch), {1, config_.backbone_channels});
  return reshape(linear(f, p("backbone.probe.weight"), p("backbone.probe.bias")), {kShapeProbeClasses});
}

Tensor Model::norm(const std::string& prefix, const Tensor& x) const {
  return layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"));
}

Tensor Model::feed_forward(const std::string& prefix, const Tensor& x) const {
  const Tensor h = relu(linear(x, p(prefix + ".1.weight"), p(prefix + ".1.bias")));
  return linear(h, p(prefix + ".2.weight"), p(prefix + ".2.bias"));
}

Tensor Model::attention(const std::string& prefix, const Tensor& queries, const Tensor& keys,
                        const std::optional<Tensor>& mask, Tensor* weights_out) const {
  const std::size_t h = config_.heads;
  const auto proj = [&](const char* part, const Tensor& x) {
    return split_heads(linear(x, p(prefix + part + ".weight"), p(prefix + part + ".bias")), h);
  };
  const Tensor q = proj(".q", queries), k = proj(".k", keys), v = proj(".v", keys);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config_.d_model / h));
  const Tensor weights = softmax_masked(scale(batched_matmul(q, k, true), inv_sqrt), mask);
  if (weights_out) *weights_out = weights;
  const Tensor merged = merge_heads(batched_matmul(weights, v));
  return linear(merged, p(prefix + ".o.weight"), p(prefix + ".o.bias"));
}

Tensor Model::encode(const Tensor& feature_map) const {
  if (feature_map.rank() != 3 || feature_map.extent(0) != config_.backbone_channels)
    throw DimensionError("encode: expected [" + std::to_string(config_.backbone_channels) +
                         "×H×W], got " + shape_str(feature_map.shape()));
  const std::size_t hh = feature_map.extent(1), ww = feature_map.extent(2);
  const Tensor tokens = transpose(reshape(feature_map, {config_.backbone_channels, hh * ww}));
  Tensor x = add(linear(tokens, p("input_proj.weight"), p("input_proj.bias")),
                 sine_position_encoding(hh, ww, config_.d_model));
  return encoder_layers(x);
}

Tensor Model::encoder_layers(const Tensor& tokens) const {
  Tensor x = tokens;
  for (std::size_t l = 0; l < config_.enc_layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l);
    const Tensor h = norm(pre + ".norm1", x);
    x = add(x, attention(pre + ".attn", h, h, std::nullopt, nullptr));
    x = add(x, feed_forward(pre + ".ffn", norm(pre + ".norm2", x)));
  }
  return config_.enc_layers == 0 ? x : norm("encoder.norm", x);
}

Tensor Model::assign_groups(const Tensor& patch_features, std::span<const std::size_t> permutation) const {
  const std::size_t n = config_.queries;
  if (permutation.size() != n) throw DimensionError("assign_groups: permutation length must equal N");
  const Tensor embeds = gather_rows(p("query_embed"), permutation);
  if (!patch_features.defined() || patch_features.extent(0) == 0) return embeds;
  const std::size_t m = patch_features.extent(0);
  config_.validate(m);
  const Tensor projected = linear(patch_features, p("patch_proj.weight"), Tensor());
  std::vector<std::size_t> group(n);
  for (std::size_t i = 0; i < n; ++i) group[i] = i / (n / m);
  return add(embeds, gather_rows(projected, group));
}

DecoderOutput Model::decode(const Tensor& memory, const Tensor& decoder_inputs,
                            const std::optional<Tensor>& mask) const {
  DecoderOutput out;
  Tensor x = decoder_inputs;
  for (std::size_t l = 0; l < config_.dec_layers; ++l) {
    const std::string pre = "decoder." + std::to_string(l);
    Tensor weights;
    const Tensor h = norm(pre + ".norm1", x);
    x = add(x, attention(pre + ".self", h, h, mask, &weights));
    x = add(x, attention(pre + ".cross", norm(pre + ".norm2", x), memory, std::nullopt, nullptr));
    x = add(x, feed_forward(pre + ".ffn", norm(pre + ".norm3", x)));
    out.self_attention.push_back(weights);
    out.layers.push_back(norm("decoder.norm", x));
  }
  return out;
}

PredictionSet Model::heads(const Tensor& decoder_out) const {
  PredictionSet ps;
  ps.class_logits = linear(decoder_out, p("head.class.weight"), p("head.class.bias"));
  Tensor b = relu(linear(decoder_out, p("head.box.1.weight"), p("head.box.1.bias")));
  b = relu(linear(b, p("head.box.2.weight"), p("head.box.2.bias")));
  ps.boxes = sigmoid(linear(b, p("head.box.3.weight"), p("head.box.3.bias")));
  if (mode_ == HeadMode::Pretext)
    ps.rec_features = linear(decoder_out, p("head.rec.weight"), p("head.rec.bias"));
  return ps;
}

PretextForward Model::forward_pretrain(const ImageRaster& image, std::span<const ImageRaster> patches,
                                       std::uint64_t shuffle_seed) const {
  if (mode_ != HeadMode::Pretext) throw ContractError("forward_pretrain needs a pretext-mode model");
  if (patches.empty()) throw ConfigError("forward_pretrain: need at least one patch");
  config_.validate(patches.size());
  const Tensor memory = encode(backbone_forward(image_to_tensor(image)));

  std::vector<Tensor> feats;
  feats.reserve(patches.size());
  for (const auto& patch : patches) feats.push_back(patch_feature(image_to_tensor(patch)));
  const Tensor features = stack(feats);

  PretextForward out;
  out.patch_features = features.detach();
  out.permutation.resize(config_.queries);
  for (std::size_t i = 0; i < config_.queries; ++i) out.permutation[i] = i;
  if (config_.use_query_shuffle) {
    Rng rng(shuffle_seed);
    out.permutation = shuffle_permutation(config_.queries, rng);
  }
  std::optional<Tensor> mask;
  if (config_.use_attention_mask) mask = build_attention_mask(config_.queries, patches.size());
  const DecoderOutput dec = decode(memory, assign_groups(features, out.permutation), mask);
  for (std::size_t l = 0; l < dec.layers.size(); ++l)
    if (config_.aux_losses || l + 1 == dec.layers.size()) out.per_layer.push_back(heads(dec.layers[l]));
  return out;
}

std::vector<PredictionSet> Model::forward_detect(const ImageRaster& image) const {
  if (mode_ != HeadMode::Detect) throw ContractError("forward_detect needs a detection-mode model");
  const Tensor memory = encode(backbone_forward(image_to_tensor(image)));
  std::vector<std::size_t> identity(config_.queries);
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  const DecoderOutput dec = decode(memory, assign_groups(Tensor(), identity), std::nullopt);
  std::vector<PredictionSet> out;
  for (std::size_t l = 0; l < dec.layers.size(); ++l)
    if (config_.aux_losses || l + 1 == dec.layers.size()) out.push_back(heads(dec.layers[l]));
  return out;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'U', 'P', 'D', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw LoadError(path + ": truncated checkpoint");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

const char* const kMetaConfig = "meta.config";

}  // namespace

void write_checkpoint(const std::string& path, std::span<const CheckpointRecord> records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.value.rank()));
    for (std::size_t d : r.value.shape()) put<std::uint64_t>(os, d);
    for (double v : r.value.data()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError(path + ": write failed");
}

std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open checkpoint");
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw LoadError(path + ": not a checkpoint (bad magic)");
  const auto version = take<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw LoadError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = take<std::uint32_t>(is, path);
  std::vector<CheckpointRecord> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = take<std::uint32_t>(is, path);
    if (len > 4096) throw LoadError(path + ": corrupt record name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw LoadError(path + ": truncated checkpoint");
    const auto rank = take<std::uint32_t>(is, path);
    if (rank > 8) throw LoadError(path + ": corrupt rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, path);
    const std::size_t n = shape_numel(shape);
    if (n > (std::size_t{1} << 32)) throw LoadError(path + ": corrupt shape for " + name);
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(take<std::uint64_t>(is, path));
    records.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return records;
}

std::vector<CheckpointRecord> model_records(const Model& model) {
  const ModelConfig& c = model.config();
  const std::vector<double> meta{
      model.mode() == HeadMode::Pretext ? 0.0 : 1.0,
      static_cast<double>(c.d_model), static_cast<double>(c.heads),
      static_cast<double>(c.enc_layers), static_cast<double>(c.dec_layers),
      static_cast<double>(c.ffn_dim), static_cast<double>(c.queries),
      static_cast<double>(c.max_patches), static_cast<double>(c.backbone_channels),
      static_cast<double>(c.classes), c.freeze_backbone ? 1.0 : 0.0,
      c.use_attention_mask ? 1.0 : 0.0, c.use_query_shuffle ? 1.0 : 0.0,
      c.use_reconstruction ? 1.0 : 0.0, c.aux_losses ? 1.0 : 0.0};
  std::vector<CheckpointRecord> out;
  out.push_back({kMetaConfig, Tensor({meta.size()}, meta)});
  for (const auto& e : model.parameters().entries()) out.push_back({e.name, e.value.detach()});
  return out;
}

Model model_from_records(std::span<const CheckpointRecord> records) {
  const CheckpointRecord* meta = nullptr;
  for (const auto& r : records)
    if (r.name == kMetaConfig) meta = &r;
  if (!meta || meta->value.numel() != 15) throw LoadError("checkpoint has no model configuration");
  const auto m = meta->value.data();
  const auto z = [&](std::size_t i) { return static_cast<std::size_t>(m[i]); };
  ModelConfig c;
  c.d_model = z(1);
  c.heads = z(2);
  c.enc_layers = z(3);
  c.dec_layers = z(4);
  c.ffn_dim = z(5);
  c.queries = z(6);
  c.max_patches = z(7);
  c.backbone_channels = z(8);
  c.classes = z(9);
  c.freeze_backbone = m[10] != 0.0;
  c.use_attention_mask = m[11] != 0.0;
  c.use_query_shuffle = m[12] != 0.0;
  c.use_reconstruction = m[13] != 0.0;
  c.aux_losses = m[14] != 0.0;
  Model model(c, m[0] == 0.0 ? HeadMode::Pretext : HeadMode::Detect, 0);
  load_parameters(model, records);
  return model;
}

void load_parameters(Model& model, std::span<const CheckpointRecord> records, const std::string& skip_prefix) {
  std::vector<std::string> problems;
  std::vector<std::pair<Tensor*, const Tensor*>> copies;
  for (auto& e : model.parameters().entries()) {
    if (!skip_prefix.empty() && e.name.starts_with(skip_prefix)) continue;
    const CheckpointRecord* found = nullptr;
    for (const auto& r : records)
      if (r.name == e.name) found = &r;
    if (!found) {
      problems.push_back(e.name + " (missing)");
    } else if (found->value.shape() != e.value.shape()) {
      problems.push_back(e.name + " (checkpoint " + shape_str(found->value.shape()) + ", model " +
                         shape_str(e.value.shape()) + ")");
    } else {
      copies.emplace_back(&e.value, &found->value);
    }
  }
  if (!problems.empty()) {
    std::string msg = "incompatible checkpoint:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw LoadError(msg);
  }
  for (auto [dst, src] : copies) std::copy(src->data().begin(), src->data().end(), dst->mutable_data().begin());
}

}  // namespace updetr
