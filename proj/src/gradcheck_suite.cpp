#include <algorithm>
#include <functional>

#include "updetr/gradcheck.hpp"
#include "updetr/geometry.hpp"
#include "updetr/losses.hpp"
#include "updetr/matcher.hpp"
#include "updetr/model.hpp"
#include "updetr/ops.hpp"
#include "updetr/pretext.hpp"
#include "updetr/random.hpp"

namespace updetr {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Fixed random weights so the scalar reduction probes every output.
Tensor weighted_sum(const Tensor& y) {
  Rng rng(99);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

struct Case {
  std::string name;
  Shape shape;
  ScalarFn fn;
  double lo = -1.0, hi = 1.0;
};

}  // namespace

std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed, int trials) {
  Rng rng(seed);
  const Tensor other = random_tensor(rng, {3, 4});
  const Tensor mat = random_tensor(rng, {4, 5});
  const Tensor bias = random_tensor(rng, {4});
  const Tensor w = random_tensor(rng, {6, 4});
  const Tensor kernel = random_tensor(rng, {3, 2, 3, 3});
  const Tensor kbias = random_tensor(rng, {3});
  const Tensor image = random_tensor(rng, {2, 7, 6});
  std::vector<double> mvals(9, 0.0);
  mvals[2] = mvals[5] = kMaskedLogit;
  const Tensor mask({3, 3}, mvals);
  const Tensor target_feats = random_tensor(rng, {2, 5});
  const std::vector<BoxCxCyWh> gt_boxes{{0.3, 0.4, 0.2, 0.3}, {0.7, 0.6, 0.4, 0.2}};
  const Tensor pred_boxes = random_tensor(rng, {4, 4}, 0.2, 0.8);
  const Tensor rec_pred = random_tensor(rng, {4, 5});
  const Tensor pred_logits = random_tensor(rng, {4, 2});

  std::vector<Case> cases{
      {"add", {3, 4}, [&](const Tensor& x) { return weighted_sum(add(x, other)); }},
      {"sub", {3, 4}, [&](const Tensor& x) { return weighted_sum(sub(other, x)); }},
      {"mul", {3, 4}, [&](const Tensor& x) { return weighted_sum(mul(x, other)); }},
      {"scale", {3, 4}, [](const Tensor& x) { return weighted_sum(scale(x, -2.5)); }},
      {"relu", {3, 4}, [](const Tensor& x) { return weighted_sum(relu(x)); }},
      {"sigmoid", {3, 4}, [](const Tensor& x) { return weighted_sum(sigmoid(x)); }},
      {"add_rowwise", {4}, [&](const Tensor& b) { return weighted_sum(add_rowwise(other, b)); }},
      {"sum", {3, 4}, [](const Tensor& x) { return sum(mul(x, x)); }},
      {"mean", {3, 4}, [](const Tensor& x) { return mean(mul(x, x)); }},
      {"matmul (lhs)", {3, 4}, [&](const Tensor& x) { return weighted_sum(matmul(x, mat)); }},
      {"matmul (rhs)", {4, 5}, [&](const Tensor& x) { return weighted_sum(matmul(other, x)); }},
      {"batched_matmul", {2, 3, 4},
       [](const Tensor& x) { return weighted_sum(batched_matmul(x, reshape(x, {2, 4, 3}))); }},
      {"batched_matmul (b transposed)", {2, 3, 4},
       [](const Tensor& x) { return weighted_sum(batched_matmul(x, reshape(x, {2, 3, 4}), true)); }},
      {"linear (x)", {3, 4}, [&](const Tensor& x) { return weighted_sum(linear(x, w, Tensor())); }},
      {"linear (w)", {4, 4}, [&](const Tensor& x) { return weighted_sum(linear(other, x, bias)); }},
      {"linear (b)", {6}, [&](const Tensor& b) { return weighted_sum(linear(other, w, b)); }},
      {"transpose", {3, 4}, [](const Tensor& x) { return weighted_sum(transpose(x)); }},
      {"reshape", {3, 4}, [](const Tensor& x) { return weighted_sum(reshape(x, {12})); }},
      {"split_heads", {3, 4}, [](const Tensor& x) { return weighted_sum(split_heads(x, 2)); }},
      {"merge_heads", {2, 3, 2}, [](const Tensor& x) { return weighted_sum(merge_heads(x)); }},
      {"concat_last", {3, 2}, [&](const Tensor& x) { return weighted_sum(concat_last(x, other)); }},
      {"stack", {2, 3},
       [](const Tensor& x) {
         const std::vector<Tensor> parts{x, scale(x, 3.0)};
         return weighted_sum(stack(parts));
       }},
      {"gather_rows", {3, 4},
       [](const Tensor& x) {
         const std::vector<std::size_t> idx{2, 0, 2};
         return weighted_sum(gather_rows(x, idx));
       }},
      {"softmax_masked", {2, 3, 3}, [&](const Tensor& x) { return weighted_sum(softmax_masked(x, mask)); }},
      {"softmax", {3, 4}, [](const Tensor& x) { return weighted_sum(softmax_masked(x)); }},
      {"layer_norm (x)", {3, 4},
       [&](const Tensor& x) { return weighted_sum(layer_norm(x, Tensor({4}, {1, 2, -1, 0.5}), bias)); }},
      {"layer_norm (gain)", {4}, [&](const Tensor& g) { return weighted_sum(layer_norm(other, g, bias)); }},
      {"layer_norm (bias)", {4},
       [&](const Tensor& b) { return weighted_sum(layer_norm(other, Tensor({4}, {1, 2, -1, 0.5}), b)); }},
      {"global_average_pool", {2, 3, 3}, [](const Tensor& x) { return weighted_sum(global_average_pool(x)); }},
      {"l2_normalize", {3, 4}, [](const Tensor& x) { return weighted_sum(l2_normalize(x)); }},
      {"cross_entropy", {4}, [](const Tensor& x) { return cross_entropy(x, 2); }},
      {"cross_entropy_rows", {3, 4},
       [](const Tensor& x) {
         const std::vector<std::size_t> t{0, 3, 1};
         const std::vector<double> wt{1.0, 0.25, 2.0};
         return cross_entropy_rows(x, t, wt);
       }},
      {"conv2d (x)", {2, 7, 6}, [&](const Tensor& x) { return weighted_sum(conv2d(x, kernel, kbias, 2, 1)); }},
      {"conv2d (w)", {3, 2, 3, 3}, [&](const Tensor& k) { return weighted_sum(conv2d(image, k, kbias, 1, 1)); }},
      {"conv2d (b)", {3}, [&](const Tensor& b) { return weighted_sum(conv2d(image, kernel, b, 2, 0)); }},
      {"box_loss", {2, 4}, [&](const Tensor& b) { return box_loss(b, gt_boxes); }, 0.2, 0.8},
      {"rec_loss", {2, 5}, [&](const Tensor& p) { return rec_loss(target_feats, p); }},
      {"hungarian_loss (logits)", {4, 2},
       [&](const Tensor& logits) {
         const PredictionSet ps{logits, pred_boxes, rec_pred};
         const Assignment a{{{0, 0}, {1, 2}}};
         return hungarian_loss(ps, gt_boxes, target_feats, a, {2, true}).total;
       }},
      {"hungarian_loss (boxes)", {4, 4},
       [&](const Tensor& b) {
         const PredictionSet ps{pred_logits, b, rec_pred};
         const Assignment a{{{0, 1}, {1, 3}}};
         return hungarian_loss(ps, gt_boxes, target_feats, a, {2, true}).total;
       },
       0.2, 0.8},
      {"hungarian_loss (rec)", {4, 5},
       [&](const Tensor& r) {
         const PredictionSet ps{pred_logits, pred_boxes, r};
         const Assignment a{{{0, 2}, {1, 0}}};
         return hungarian_loss(ps, gt_boxes, target_feats, a, {2, true}).total;
       }},
  };

  std::vector<GradcheckResult> out;
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t)
      worst = std::max(worst, finite_diff_check(c.fn, random_tensor(rng, c.shape, c.lo, c.hi)));
    out.push_back({c.name, worst, kOpGradTolerance});
  }
  return out;
}

GradcheckResult end_to_end_gradcheck(std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn_dim = 32;
  c.queries = 4;
  c.max_patches = 2;
  c.backbone_channels = 8;
  c.freeze_backbone = false;
  Model model(c, HeadMode::Pretext, seed);

  Rng rng(derive_seed(seed, 1));
  ImageRaster src(24, 24);
  for (auto& p : src.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  const std::vector<BoxCxCyWh> boxes{{0.3, 0.4, 0.5, 0.4}, {0.7, 0.6, 0.3, 0.5}};
  const std::vector<ImageRaster> patches{crop_patch(src, boxes[0], 8), crop_patch(src, boxes[1], 8)};

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
      total = add(total, hungarian_loss(out.per_layer[l], boxes, targets, fixed[l], {patches.size(), true}).total);
    return total;
  };

  double worst = 0.0;
  for (auto& e : model.parameters().entries()) {
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < e.value.numel(); ++i)
      if (rng.bernoulli(0.01)) coords.push_back(i);
    if (!coords.empty()) worst = std::max(worst, finite_diff_check_inplace(loss, e.value, coords));
  }
  return {"pretext loss end to end (tiny model)", worst, kEndToEndGradTolerance};
}

}  // namespace updetr
