#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "updetr/error.hpp"
#include "updetr/gradcheck.hpp"
#include "updetr/losses.hpp"
#include "updetr/matcher.hpp"
#include "updetr/model.hpp"
#include "updetr/ops.hpp"
#include "updetr/pretext.hpp"

using namespace updetr;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn_dim = 32;
  c.queries = 4;
  c.max_patches = 2;
  c.backbone_channels = 8;
  return c;
}

ImageRaster noise_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  ImageRaster img(w, h);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

Tensor random_rows(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({r, c});
  for (auto& v : t.mutable_data()) v = rng.uniform(-1, 1);
  return t;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t c = t.extent(t.rank() - 1);
  return {t.data().begin() + static_cast<long>(r * c), t.data().begin() + static_cast<long>((r + 1) * c)};
}

}  // namespace

TEST(Mask, SixQueriesTwoGroups) {
  const Tensor m = build_attention_mask(6, 2);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      EXPECT_EQ(m[i * 6 + j], (i / 3 == j / 3) ? 0.0 : kMaskedLogit) << i << "," << j;
}

TEST(Mask, HundredQueriesTenGroups) {
  const Tensor m = build_attention_mask(100, 10);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = 0; j < 100; ++j) {
      EXPECT_EQ(m[i * 100 + j], m[j * 100 + i]);
      if (m[i * 100 + j] == 0.0) {
        ++zeros;
        EXPECT_EQ(i / 10, j / 10);
      }
    }
  EXPECT_EQ(zeros, 10u * 10u * 10u);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(m[i * 101], 0.0);
}

TEST(Mask, SingleGroupIsAllZeroAndBadSplitRejected) {
  const Tensor m = build_attention_mask(7, 1);
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(build_attention_mask(10, 3), ConfigError);
  EXPECT_THROW(build_attention_mask(10, 0), ConfigError);
}

TEST(Shuffle, BijectionAndDeterministic) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng a(s), b(s);
    const auto p = shuffle_permutation(16, a);
    EXPECT_EQ(p, shuffle_permutation(16, b));
    EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 16u);
    EXPECT_LT(*std::max_element(p.begin(), p.end()), 16u);
  }
}

TEST(Shuffle, EmbeddingLandsInEachGroupUniformly) {
  constexpr std::size_t n = 16, m = 4, seeds = 10000;
  std::vector<std::vector<int>> hits(n, std::vector<int>(m, 0));
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(3, s));
    const auto perm = shuffle_permutation(n, rng);
    for (std::size_t pos = 0; pos < n; ++pos) ++hits[perm[pos]][pos / (n / m)];
  }
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t g = 0; g < m; ++g)
      EXPECT_NEAR(hits[e][g] / static_cast<double>(seeds), 1.0 / m, 0.02) << e << "," << g;
}

TEST(Shuffle, FlagOffMeansIdentity) {
  Model model(tiny_config(), HeadMode::Pretext, 1);
  const auto img = noise_image(16, 16, 1);
  const std::vector<ImageRaster> patches{noise_image(8, 8, 2), noise_image(8, 8, 3)};
  const auto out = model.forward_pretrain(img, patches, 99);
  for (std::size_t i = 0; i < out.permutation.size(); ++i) EXPECT_EQ(out.permutation[i], i);
}

TEST(Backbone, OutputShapeIsEighthResolution) {
  Model model(ModelConfig{}, HeadMode::Pretext, 1);
  const Tensor f = model.backbone_forward(image_to_tensor(noise_image(64, 48, 1)));
  EXPECT_EQ(f.shape(), (Shape{64, 6, 8}));
  EXPECT_THROW(model.backbone_forward(Tensor::zeros({3, 4, 16})), InputError);
  EXPECT_THROW(model.backbone_forward(Tensor::zeros({1, 16, 16})), InputError);
}

TEST(Backbone, ConstantImageGivesConstantInterior) {
  Model model(ModelConfig{}, HeadMode::Pretext, 2);
  ImageRaster img(64, 64);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = i % 3 == 0 ? 200 : 40;
  const Tensor f = model.backbone_forward(image_to_tensor(img));
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  // Position 0 along each axis sees zero padding; everything else is interior.
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 1; y < h; ++y)
      for (std::size_t x = 1; x < w; ++x)
        EXPECT_NEAR(f[(ch * h + y) * w + x], f[(ch * h + 1) * w + 1], 1e-12);
}

TEST(Backbone, PatchFeatureDeterministic) {
  Model model(ModelConfig{}, HeadMode::Pretext, 3);
  const auto p = noise_image(16, 16, 4);
  const Tensor a = model.patch_feature(image_to_tensor(p)), b = model.patch_feature(image_to_tensor(p));
  EXPECT_EQ(a.shape(), (Shape{64}));
  EXPECT_EQ(row(reshape(a, {1, 64}), 0), row(reshape(b, {1, 64}), 0));
  const ImageRaster zero(16, 16);
  const Tensor z1 = model.patch_feature(image_to_tensor(zero)), z2 = model.patch_feature(image_to_tensor(zero));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(z1[i], z2[i]);
}

TEST(Backbone, FreezeFlagControlsGradients) {
  Model model(ModelConfig{}, HeadMode::Pretext, 3);
  EXPECT_TRUE(model.backbone_frozen());
  for (const auto& e : model.parameters().entries())
    EXPECT_EQ(e.value.requires_grad(), !e.name.starts_with(kBackbonePrefix)) << e.name;
  model.set_backbone_frozen(false);
  for (const auto& e : model.parameters().entries()) EXPECT_TRUE(e.value.requires_grad()) << e.name;
}

TEST(Groups, OrderedAssignment) {
  ModelConfig c = tiny_config();
  c.queries = 6;
  Model model(c, HeadMode::Pretext, 4);
  const std::vector<std::size_t> id{0, 1, 2, 3, 4, 5};
  const Tensor feats = random_rows(2, c.backbone_channels, 1);
  const Tensor in = model.assign_groups(feats, id);
  const Tensor embeds = model.parameters().get("query_embed");
  const Tensor proj = linear(feats, model.parameters().get("patch_proj.weight"), Tensor());
  for (std::size_t i = 0; i < 6; ++i) {
    const auto r = row(in, i), e = row(embeds, i), pr = row(proj, i / 3);
    for (std::size_t k = 0; k < c.d_model; ++k) EXPECT_NEAR(r[k], e[k] + pr[k], 1e-14);
  }
}

TEST(Groups, SinglePatchReachesEveryQueryAndZeroFeatureIsEmbedding) {
  Model model(tiny_config(), HeadMode::Pretext, 5);
  const std::vector<std::size_t> id{0, 1, 2, 3};
  const Tensor feats = random_rows(1, 8, 2);
  const Tensor in = model.assign_groups(feats, id);
  const Tensor embeds = model.parameters().get("query_embed");
  const auto delta0 = row(sub(in, embeds), 0);
  for (std::size_t i = 1; i < 4; ++i) {
    const auto d = row(sub(in, embeds), i);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(d[k], delta0[k], 1e-14);
  }
  const Tensor zero_in = model.assign_groups(Tensor::zeros({2, 8}), id);
  for (std::size_t i = 0; i < zero_in.numel(); ++i) EXPECT_EQ(zero_in[i], embeds[i]);
}

TEST(Encoder, OutputLengthAndZeroLayers) {
  ModelConfig c = tiny_config();
  c.enc_layers = 0;
  Model model(c, HeadMode::Pretext, 6);
  Rng rng(1);
  Tensor f = Tensor::zeros({8, 3, 5});
  for (auto& v : f.mutable_data()) v = rng.uniform(-1, 1);
  const Tensor mem = model.encode(f);
  EXPECT_EQ(mem.shape(), (Shape{15, 16}));
  const Tensor tokens = transpose(reshape(f, {8, 15}));
  const Tensor expect = add(linear(tokens, model.parameters().get("input_proj.weight"),
                                   model.parameters().get("input_proj.bias")),
                            sine_position_encoding(3, 5, 16));
  for (std::size_t i = 0; i < mem.numel(); ++i) EXPECT_EQ(mem[i], expect[i]);
}

TEST(Encoder, PermutationEquivariant) {
  ModelConfig c = tiny_config();
  c.enc_layers = 2;
  Model model(c, HeadMode::Pretext, 7);
  const Tensor x = random_rows(6, 16, 3);
  const std::vector<std::size_t> swap{0, 4, 2, 3, 1, 5};
  const Tensor y = model.encoder_layers(x);
  const Tensor ys = model.encoder_layers(gather_rows(x, swap));
  for (std::size_t r = 0; r < 6; ++r) {
    const auto a = row(ys, r), b = row(y, swap[r]);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(Decoder, GroupIndependenceAtFullScale) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.queries = 100;
  c.max_patches = 10;
  c.backbone_channels = 8;
  Model model(c, HeadMode::Pretext, 8);
  const Tensor memory = random_rows(9, 16, 4);
  const Tensor mask = build_attention_mask(100, 10);
  Tensor inputs = random_rows(100, 16, 5);
  const auto base = model.decode(memory, inputs, mask);
  // Perturb group 3 (queries 30..39).
  Tensor perturbed = inputs.detach();
  for (std::size_t i = 30 * 16; i < 40 * 16; ++i) perturbed.mutable_data()[i] += 0.5;
  const auto moved = model.decode(memory, perturbed, mask);
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    const Tensor& w0 = base.self_attention[l];
    const Tensor& w1 = moved.self_attention[l];
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 100; ++i)
        for (std::size_t j = 0; j < 100; ++j) {
          const std::size_t k = (h * 100 + i) * 100 + j;
          if (i / 10 != j / 10) EXPECT_EQ(w0[k], 0.0);
          if (i / 10 != 3) EXPECT_EQ(w0[k], w1[k]);
        }
    for (std::size_t i = 0; i < 100; ++i) {
      if (i / 10 == 3) continue;
      EXPECT_EQ(row(base.layers[l], i), row(moved.layers[l], i)) << l << "," << i;
    }
  }
}

TEST(Decoder, AbsentMaskEqualsZeroMaskAndSingleQuery) {
  ModelConfig c = tiny_config();
  Model model(c, HeadMode::Pretext, 9);
  const Tensor memory = random_rows(5, 16, 6), inputs = random_rows(4, 16, 7);
  const auto a = model.decode(memory, inputs, std::nullopt);
  const auto b = model.decode(memory, inputs, Tensor::zeros({4, 4}));
  for (std::size_t i = 0; i < a.layers[0].numel(); ++i) EXPECT_EQ(a.layers[0][i], b.layers[0][i]);

  c.queries = 1;
  c.max_patches = 1;
  Model single(c, HeadMode::Pretext, 9);
  const auto s = single.decode(memory, random_rows(1, 16, 8), std::nullopt);
  for (double w : s.self_attention[0].data()) EXPECT_EQ(w, 1.0);
}

TEST(Heads, RangesAndWidths) {
  ModelConfig c = tiny_config();
  c.classes = 3;
  Model pre(c, HeadMode::Pretext, 10), det(c, HeadMode::Detect, 10);
  Tensor big = random_rows(4, 16, 9);
  for (auto& v : big.mutable_data()) v *= 50;
  const auto ps = pre.heads(big);
  EXPECT_EQ(ps.class_logits.shape(), (Shape{4, 2}));
  EXPECT_EQ(ps.rec_features.shape(), (Shape{4, 8}));
  for (double b : ps.boxes.data()) {
    EXPECT_GT(b, 0.0);
    EXPECT_LT(b, 1.0);
  }
  const auto ds = det.heads(big);
  EXPECT_EQ(ds.class_logits.shape(), (Shape{4, 4}));
  EXPECT_FALSE(ds.rec_features.defined());
}

TEST(Forward, PretrainSingleQueryPatchAndFixedSetSize) {
  ModelConfig c = tiny_config();
  c.queries = 3;
  c.max_patches = 1;
  Model single(c, HeadMode::Pretext, 11);
  const auto img = noise_image(24, 16, 5);
  const std::vector<ImageRaster> one{noise_image(8, 8, 6)};
  const auto a = single.forward_pretrain(img, one), b = single.forward_pretrain(img, one);
  ASSERT_EQ(a.per_layer.size(), 1u);
  EXPECT_EQ(a.per_layer[0].queries(), 3u);
  for (std::size_t i = 0; i < a.per_layer[0].boxes.numel(); ++i)
    EXPECT_EQ(a.per_layer[0].boxes[i], b.per_layer[0].boxes[i]);

  ModelConfig d = ModelConfig{};
  d.enc_layers = d.dec_layers = 1;
  Model model(d, HeadMode::Pretext, 12);
  for (std::size_t m : {1u, 2u, 4u}) {
    std::vector<ImageRaster> patches(m, noise_image(16, 16, m));
    const auto out = model.forward_pretrain(noise_image(64, 64, 7), patches);
    EXPECT_EQ(out.per_layer.back().queries(), 16u);
    EXPECT_EQ(out.patch_features.shape(), (Shape{m, 64}));
  }
  std::vector<ImageRaster> too_many(5, noise_image(16, 16, 1));
  EXPECT_THROW(model.forward_pretrain(noise_image(64, 64, 7), too_many), CapacityError);
  std::vector<ImageRaster> three(3, noise_image(16, 16, 1));
  d.max_patches = 8;
  Model loose(d, HeadMode::Pretext, 12);
  EXPECT_THROW(loose.forward_pretrain(noise_image(64, 64, 7), three), ConfigError);
}

TEST(Forward, DetectDeterministicWithNoObjectColumn) {
  ModelConfig c = tiny_config();
  c.classes = 3;
  Model model(c, HeadMode::Detect, 13);
  const auto img = noise_image(32, 32, 8);
  const auto a = model.forward_detect(img), b = model.forward_detect(img);
  EXPECT_EQ(a.back().class_logits.shape(), (Shape{4, 4}));
  for (std::size_t i = 0; i < a.back().class_logits.numel(); ++i)
    EXPECT_EQ(a.back().class_logits[i], b.back().class_logits[i]);
  EXPECT_THROW(model.forward_pretrain(img, {}), ContractError);
}

TEST(Checkpoint, RoundTripIsBitwiseExact) {
  Model model(tiny_config(), HeadMode::Pretext, 14);
  const auto path = (std::filesystem::temp_directory_path() / "updetr_model.ckpt").string();
  write_checkpoint(path, model_records(model));
  const auto records = read_checkpoint(path);
  const Model back = model_from_records(records);
  EXPECT_EQ(back.mode(), HeadMode::Pretext);
  ASSERT_EQ(back.parameters().entries().size(), model.parameters().entries().size());
  for (std::size_t i = 0; i < model.parameters().entries().size(); ++i) {
    const auto& x = model.parameters().entries()[i];
    const auto& y = back.parameters().entries()[i];
    EXPECT_EQ(x.name, y.name);
    EXPECT_EQ(x.value.shape(), y.value.shape());
    EXPECT_EQ(std::memcmp(x.value.data().data(), y.value.data().data(), x.value.numel() * sizeof(double)), 0);
  }
  write_checkpoint(path + ".2", model_records(back));
  std::ifstream f1(path, std::ios::binary), f2(path + ".2", std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(s1.substr(0, 4), "UPDT");
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".2");
}

TEST(Checkpoint, PretextWeightsLoadIntoDetector) {
  Model pre(tiny_config(), HeadMode::Pretext, 15);
  Model det(tiny_config(), HeadMode::Detect, 16);
  const auto records = model_records(pre);
  EXPECT_THROW(load_parameters(det, records), LoadError);
  const Tensor head_before = det.parameters().get("head.class.weight").detach();
  load_parameters(det, records, kClassHeadPrefix);
  for (const auto& e : det.parameters().entries()) {
    if (e.name.starts_with(kClassHeadPrefix)) continue;
    const Tensor& src = pre.parameters().get(e.name);
    for (std::size_t i = 0; i < src.numel(); ++i) ASSERT_EQ(e.value[i], src[i]) << e.name;
  }
  const Tensor& head = det.parameters().get("head.class.weight");
  for (std::size_t i = 0; i < head.numel(); ++i) EXPECT_EQ(head[i], head_before[i]);

  ModelConfig wide = tiny_config();
  wide.d_model = 32;
  Model other(wide, HeadMode::Detect, 1);
  try {
    load_parameters(other, records, kClassHeadPrefix);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("query_embed"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = (std::filesystem::temp_directory_path() / "updetr_bad.ckpt").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE";
  }
  EXPECT_THROW(read_checkpoint(path), LoadError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "UPDT";
  }
  EXPECT_THROW(read_checkpoint(path), LoadError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_checkpoint(path), IoError);
}

TEST(EndToEnd, PretextLossGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny_config();
  c.freeze_backbone = false;
  Model model(c, HeadMode::Pretext, 21);
  const auto src = noise_image(24, 24, 9);
  const std::vector<ImageRaster> patches{crop_patch(src, {0.3, 0.4, 0.5, 0.4}, 8),
                                         crop_patch(src, {0.7, 0.6, 0.3, 0.5}, 8)};
  const std::vector<BoxCxCyWh> boxes{{0.3, 0.4, 0.5, 0.4}, {0.7, 0.6, 0.3, 0.5}};

  const auto fwd = model.forward_pretrain(src, patches);
  std::vector<Assignment> fixed;
  for (const auto& ps : fwd.per_layer) fixed.push_back(hungarian(build_cost(ps, boxes)));
  // Reconstruction targets are stop-gradient constants; hold them fixed so
  // finite differences see the same function as the tape.
  const Tensor targets = fwd.patch_features;
  const auto loss = [&]() {
    const auto out = model.forward_pretrain(src, patches);
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < out.per_layer.size(); ++l)
      total = add(total, hungarian_loss(out.per_layer[l], boxes, targets, fixed[l],
                                        {patches.size(), true}).total);
    return total;
  };

  std::size_t total = 0;
  for (const auto& e : model.parameters().entries()) total += e.value.numel();
  Rng rng(77);
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto& e : model.parameters().entries()) {
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < e.value.numel(); ++i)
      if (rng.bernoulli(0.01)) coords.push_back(i);
    if (coords.empty()) continue;
    checked += coords.size();
    const double err = finite_diff_check_inplace(loss, e.value, coords);
    worst = std::max(worst, err);
  }
  EXPECT_GE(checked, total / 200);
  EXPECT_LT(worst, 1e-3) << "checked " << checked << " of " << total;
}
