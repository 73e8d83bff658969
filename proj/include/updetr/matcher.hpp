#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "updetr/geometry.hpp"
#include "updetr/prediction.hpp"

namespace updetr {

/// G×N match costs, ground truths by rows and object queries by columns.
class CostMatrix {
 public:
  CostMatrix(std::size_t gts, std::size_t queries, std::vector<double> entries);
  CostMatrix(std::size_t gts, std::size_t queries);

  std::size_t gts() const { return gts_; }
  std::size_t queries() const { return queries_; }
  double operator()(std::size_t gt, std::size_t query) const { return entries_[gt * queries_ + query]; }
  double& operator()(std::size_t gt, std::size_t query) { return entries_[gt * queries_ + query]; }

 private:
  std::size_t gts_;
  std::size_t queries_;
  std::vector<double> entries_;
};

/// Injective ground-truth -> query map, pairs ordered by ground-truth index.
struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  /// Sum of matched costs accumulated in ground-truth order.
  double total_cost(const CostMatrix& cost) const;
  /// query -> gt index, or -1 when unmatched.
  std::vector<long> query_to_gt(std::size_t queries) const;
};

/// Cost of assigning gt i to query j: −P_j(class_i) + box_loss(b̂_j, b_i).
/// Evaluated on values only; nothing is recorded on a tape.
CostMatrix build_cost(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                      std::span<const std::size_t> gt_classes);

/// Pretext variant: every ground truth carries the "match" class.
CostMatrix build_cost(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes);

/// Optimal assignment (Kuhn-Munkres with potentials, O(G²N)). Ties go to the
/// lowest query index scanning ground-truth rows in order.
Assignment hungarian(const CostMatrix& cost);

/// Pretext assignment with positional group targets: ground truth i may only
/// take a query from group `gt_groups[i]`, i.e. queries
/// [g·group_size, (g+1)·group_size). Each group is solved by hungarian() on
/// its own block.
Assignment group_match(const CostMatrix& cost, std::span<const std::size_t> gt_groups,
                       std::size_t group_size);

inline constexpr std::size_t kBruteForceMaxGts = 8;

/// Exhaustive minimum over every injection; the first lexicographic
/// minimum wins. Test oracle for hungarian().
Assignment brute_force_match(const CostMatrix& cost);

}  // namespace updetr
