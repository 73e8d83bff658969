#pragma once

#include <span>
#include <vector>

#include "updetr/geometry.hpp"
#include "updetr/matcher.hpp"
#include "updetr/prediction.hpp"

namespace updetr {

struct LossBreakdown {
  Tensor total;
  Tensor cls;
  Tensor box;
  Tensor rec;
};

/// ‖p/‖p‖ − p̂/‖p̂‖‖² summed over rows; p is treated as a constant target
/// when it does not require a gradient.
Tensor rec_loss(const Tensor& target, const Tensor& predicted);

/// λ · CE(logits, target class).
Tensor cls_loss(const Tensor& logits, std::size_t target, double weight);

/// Class-balance weight of an unmatched query in the pretext loss.
double unmatched_weight(std::size_t patches, std::size_t queries);

struct PretextLossOptions {
  std::size_t patches = 0;   // M, drives the unmatched weight M/N
  bool reconstruction = true;
};

/// Pretext Hungarian loss at a fixed assignment. `gt_features` holds one
/// backbone patch feature per ground truth, [G×C].
LossBreakdown hungarian_loss(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                             const Tensor& gt_features, const Assignment& assignment,
                             const PretextLossOptions& options);

/// Supervised set loss over K+1 classes (last index is "no object").
LossBreakdown detection_loss(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                             std::span<const std::size_t> gt_classes,
                             const Assignment& assignment, double no_object_weight);

}  // namespace updetr
