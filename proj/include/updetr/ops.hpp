#pragma once

// Differentiable operations over Tensor. Every operation records a backward
// closure on the active tape when one of its inputs requires a gradient.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "updetr/tensor.hpp"

namespace updetr {

/// Additive mask entry standing in for -inf. Masked softmax outputs are
/// forced to exactly zero, so the value only has to dominate real logits.
inline constexpr double kMaskedLogit = -1e30;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kL2NormalizeEps = 1e-12;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// x[...×d] + b[d] broadcast over every row.
Tensor add_rowwise(const Tensor& x, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a[B×m×k] · b[B×k×n], or a · bᵀ with b[B×n×k] when transpose_b.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x[n×in] · wᵀ + b with w[out×in]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// [n×(h·dh)] -> [h×n×dh]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [h×n×dh] -> [n×(h·dh)]
Tensor merge_heads(const Tensor& x);
Tensor concat_last(const Tensor& a, const Tensor& b);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
/// Rows of table[V×d] selected by index (embedding lookup); output [len×d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

/// Softmax over the last axis of logits[...×r×n] plus an additive mask of
/// shape [r×n] or [n]. Masked positions come out exactly 0.
Tensor softmax_masked(const Tensor& logits, const std::optional<Tensor>& mask = std::nullopt);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);
Tensor global_average_pool(const Tensor& f);
/// Normalises every row of the last axis to unit ℓ2 norm.
Tensor l2_normalize(const Tensor& v, double eps = kL2NormalizeEps);

Tensor cross_entropy(const Tensor& logits, std::size_t target);
/// Σ_i weights[i] · CE(logits[i], targets[i]) for logits[n×K].
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets,
                          std::span<const double> weights);

/// x[C×H×W] convolved with w[O×C×k×k] (+ b[O]); output [O×oh×ow].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);

}  // namespace updetr
