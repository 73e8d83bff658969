#include "updetr/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "updetr/error.hpp"

namespace updetr {

namespace {

void check_capacity(std::size_t gts, std::size_t queries) {
  if (gts > queries)
    throw CapacityError("matcher: " + std::to_string(gts) + " ground truths exceed " +
                        std::to_string(queries) + " object queries");
}

}  // namespace

CostMatrix::CostMatrix(std::size_t gts, std::size_t queries, std::vector<double> entries)
    : gts_(gts), queries_(queries), entries_(std::move(entries)) {
  check_capacity(gts, queries);
  if (entries_.size() != gts * queries)
    throw DimensionError("cost matrix: " + std::to_string(entries_.size()) + " entries for " +
                         std::to_string(gts) + "x" + std::to_string(queries));
  for (double v : entries_)
    if (!std::isfinite(v)) throw ContractError("cost matrix: non-finite entry");
}

CostMatrix::CostMatrix(std::size_t gts, std::size_t queries)
    : CostMatrix(gts, queries, std::vector<double>(gts * queries, 0.0)) {}

double Assignment::total_cost(const CostMatrix& cost) const {
  double total = 0.0;
  for (const auto& [gt, query] : pairs) total += cost(gt, query);
  return total;
}

std::vector<long> Assignment::query_to_gt(std::size_t queries) const {
  std::vector<long> out(queries, -1);
  for (const auto& [gt, query] : pairs) out[query] = static_cast<long>(gt);
  return out;
}

CostMatrix build_cost(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes,
                      std::span<const std::size_t> gt_classes) {
  const std::size_t n = preds.queries(), g = gt_boxes.size();
  check_capacity(g, n);
  if (gt_classes.size() != g) throw DimensionError("build_cost: class/box count mismatch");
  const std::size_t k = preds.class_logits.extent(1);
  CostMatrix cost(g, n);
  std::vector<double> prob(k);
  for (std::size_t j = 0; j < n; ++j) {
    const double* z = preds.class_logits.data().data() + j * k;
    double peak = z[0];
    for (std::size_t c = 1; c < k; ++c) peak = std::max(peak, z[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) total += prob[c] = std::exp(z[c] - peak);
    const BoxCxCyWh pred = box_from_row(preds.boxes.data().subspan(j * 4, 4));
    for (std::size_t i = 0; i < g; ++i) {
      if (gt_classes[i] >= k) throw IndexError("build_cost: class index out of range");
      cost(i, j) = -prob[gt_classes[i]] / total + box_loss(pred, gt_boxes[i]);
    }
  }
  return cost;
}

CostMatrix build_cost(const PredictionSet& preds, std::span<const BoxCxCyWh> gt_boxes) {
  const std::vector<std::size_t> classes(gt_boxes.size(), kMatchClass);
  return build_cost(preds, gt_boxes, classes);
}

Assignment hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.gts(), m = cost.queries();
  Assignment result;
  if (n == 0) return result;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[col0] = true;
      const std::size_t i0 = owner[col0];
      double delta = kInf;
      std::size_t col1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (reduced < minv[j]) {
          minv[j] = reduced;
          way[j] = col0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          col1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) result.pairs.emplace_back(i, row_to_col[i]);
  return result;
}

namespace {

void search(const CostMatrix& cost, std::size_t row, std::vector<std::size_t>& cur,
            std::vector<bool>& taken, double& best, std::vector<std::size_t>& best_cols) {
  if (row == cost.gts()) {
    // Re-sum in row order so the comparison matches Assignment::total_cost.
    double total = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) total += cost(i, cur[i]);
    if (total < best) {
      best = total;
      best_cols = cur;
    }
    return;
  }
  for (std::size_t j = 0; j < cost.queries(); ++j) {
    if (taken[j]) continue;
    taken[j] = true;
    cur.push_back(j);
    search(cost, row + 1, cur, taken, best, best_cols);
    cur.pop_back();
    taken[j] = false;
  }
}

}  // namespace

Assignment group_match(const CostMatrix& cost, std::span<const std::size_t> gt_groups,
                       std::size_t group_size) {
  if (gt_groups.size() != cost.gts()) throw DimensionError("group_match: one group per ground truth");
  if (group_size == 0 || cost.queries() % group_size != 0)
    throw ConfigError("group_match: group size must divide the query count");
  const std::size_t groups = cost.queries() / group_size;
  Assignment result;
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < gt_groups.size(); ++i) {
      if (gt_groups[i] >= groups) throw IndexError("group_match: group index out of range");
      if (gt_groups[i] == g) rows.push_back(i);
    }
    if (rows.empty()) continue;
    CostMatrix block(rows.size(), group_size);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < group_size; ++j) block(r, j) = cost(rows[r], g * group_size + j);
    for (const auto& [r, j] : hungarian(block).pairs) result.pairs.emplace_back(rows[r], g * group_size + j);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  return result;
}

Assignment brute_force_match(const CostMatrix& cost) {
  if (cost.gts() > kBruteForceMaxGts)
    throw CapacityError("brute_force_match: " + std::to_string(cost.gts()) +
                        " ground truths exceed the exhaustive-search limit of " +
                        std::to_string(kBruteForceMaxGts));
  Assignment result;
  if (cost.gts() == 0) return result;
  std::vector<std::size_t> cur, best_cols;
  std::vector<bool> taken(cost.queries(), false);
  double best = std::numeric_limits<double>::infinity();
  search(cost, 0, cur, taken, best, best_cols);
  for (std::size_t i = 0; i < best_cols.size(); ++i) result.pairs.emplace_back(i, best_cols[i]);
  return result;
}

}  // namespace updetr
