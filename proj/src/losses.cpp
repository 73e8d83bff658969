#include "updetr/losses.hpp"

#include "updetr/error.hpp"
#include "updetr/ops.hpp"

namespace updetr {

Tensor rec_loss(const Tensor& target, const Tensor& predicted) {
  if (target.shape() != predicted.shape())
    throw DimensionError("rec_loss: " + shape_str(target.shape()) + " vs " +
                         shape_str(predicted.shape()));
  const Tensor diff = sub(l2_normalize(target), l2_normalize(predicted));
  return sum(mul(diff, diff));
}

Tensor cls_loss(const Tensor& logits, std::size_t target, double weight) {
  return scale(cross_entropy(logits, target), weight);
}

double unmatched_weight(std::size_t patches, std::size_t queries) {
  if (patches > queries)
    throw CapacityError("unmatched_weight: " + std::to_string(patches) + " patches exceed " +
                        std::to_string(queries) + " queries");
  return static_cast<double>(patches) / static_cast<double>(queries);
}

namespace {

std::vector<std::size_t> matched_queries(const Assignment& assignment) {
  std::vector<std::size_t> out;
  for (const auto& pair : assignment.pairs) out.push_back(pair.second);
  return out;
}

std::vector<BoxCxCyWh> matched_boxes(const Assignment& assignment,
                                     std::span<const BoxCxCyWh> gt_boxes) {
  std::vector<BoxCxCyWh> out;
  for (const auto& pair : assignment.pairs) out.push_back(gt_boxes[pair.first]);
  return out;
}

void check_assignment(const Assignment& assignment, std::size_t gts, std::size_t queries) {
  if (assignment.pairs.size() != gts)
    throw ContractError("loss: assignment has " + std::to_string(assignment.pairs.size()) +
                        " pairs for " + std::to_string(gts) + " ground truths");
  for (const auto& [gt, query] : assignment.pairs)
    if (gt >= gts || query >= queries) throw IndexError("loss: assignment index out of range");
}

}  // namespace

LossBreakdown hungarian_loss(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                             const Tensor& gt_features, const Assignment& assignment,
                             const PretextLossOptions& options) {
  const std::size_t n = preds.queries();
  const double negative_weight = unmatched_weight(options.patches, n);
  check_assignment(assignment, gt_boxes.size(), n);

  std::vector<std::size_t> targets(n, kNoMatchClass);
  std::vector<double> weights(n, negative_weight);
  for (const auto& pair : assignment.pairs) {
    targets[pair.second] = kMatchClass;
    weights[pair.second] = 1.0;
  }
  LossBreakdown out;
  out.cls = cross_entropy_rows(preds.class_logits, targets, weights);
  out.box = Tensor::scalar(0.0);
  out.rec = Tensor::scalar(0.0);
  if (!assignment.pairs.empty()) {
    const auto idx = matched_queries(assignment);
    out.box = box_loss(gather_rows(preds.boxes, idx), matched_boxes(assignment, gt_boxes));
    if (options.reconstruction) {
      if (!preds.rec_features.defined())
        throw ContractError("hungarian_loss: reconstruction enabled without a reconstruction head");
      std::vector<std::size_t> gt_idx;
      for (const auto& pair : assignment.pairs) gt_idx.push_back(pair.first);
      out.rec = rec_loss(gather_rows(gt_features, gt_idx), gather_rows(preds.rec_features, idx));
    }
  }
  out.total = add(add(out.cls, out.box), out.rec);
  return out;
}

LossBreakdown detection_loss(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                             std::span<const std::size_t> gt_classes,
                             const Assignment& assignment, double no_object_weight) {
  const std::size_t n = preds.queries();
  const std::size_t no_object = preds.class_logits.extent(1) - 1;
  check_assignment(assignment, gt_boxes.size(), n);
  std::vector<std::size_t> targets(n, no_object);
  std::vector<double> weights(n, no_object_weight);
  for (const auto& [gt, query] : assignment.pairs) {
    targets[query] = gt_classes[gt];
    weights[query] = 1.0;
  }
  LossBreakdown out;
  out.cls = cross_entropy_rows(preds.class_logits, targets, weights);
  out.box = assignment.pairs.empty()
                ? Tensor::scalar(0.0)
                : box_loss(gather_rows(preds.boxes, matched_queries(assignment)),
                           matched_boxes(assignment, gt_boxes));
  out.rec = Tensor::scalar(0.0);
  out.total = add(out.cls, out.box);
  return out;
}

}  // namespace updetr
