#include "updetr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "updetr/error.hpp"
#include "updetr/kernels.hpp"

namespace updetr {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
}

// Null when the input does not take gradients.
NodePtr grad_target(const Tensor& t) {
  return t.defined() && t.requires_grad() ? t.node() : nullptr;
}

Tensor finish(Tensor out, Tape* tape, BackwardFn fn) {
  if (tape != nullptr) {
    out.set_requires_grad(true);
    tape->record(out, std::move(fn));
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto* tape = recording_tape({&a, &b});
  return finish(Tensor(a.shape(), std::move(out)), tape,
                [an = grad_target(a), bn = grad_target(b)](std::span<const double> g) {
                  for (auto* n : {an.get(), bn.get()}) {
                    if (!n) continue;
                    auto ga = grad_of(*n);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto* tape = recording_tape({&a, &b});
  return finish(Tensor(a.shape(), std::move(out)), tape,
                [an = grad_target(a), bn = grad_target(b)](std::span<const double> g) {
                  if (an) {
                    auto ga = grad_of(*an);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (bn) {
                    auto gb = grad_of(*bn);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto* tape = recording_tape({&a, &b});
  return finish(Tensor(a.shape(), std::move(out)), tape,
                [an = grad_target(a), bn = grad_target(b), av = a.node(),
                 bv = b.node()](std::span<const double> g) {
                  if (an) {
                    auto ga = grad_of(*an);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv->data[i];
                  }
                  if (bn) {
                    auto gb = grad_of(*bn);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av->data[i];
                  }
                });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto* tape = recording_tape({&x});
  return finish(Tensor(x.shape(), std::move(out)), tape,
                [xn = grad_target(x), factor](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto* tape = recording_tape({&x});
  return finish(Tensor(x.shape(), std::move(out)), tape,
                [xn = grad_target(x)](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (xn->data[i] > 0.0) gx[i] += g[i];
                });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  Tensor result(x.shape(), std::move(out));
  auto* tape = recording_tape({&x});
  return finish(result, tape,
                [xn = grad_target(x), yn = std::weak_ptr<TensorNode>(result.node())](
                    std::span<const double> g) {
                  auto y = yn.lock();
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    gx[i] += g[i] * y->data[i] * (1.0 - y->data[i]);
                });
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  require_rank(b, 1, "add_rowwise");
  const std::size_t d = b.numel();
  if (x.shape().back() != d)
    throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(b.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % d];
  auto* tape = recording_tape({&x, &b});
  return finish(Tensor(x.shape(), std::move(out)), tape,
                [xn = grad_target(x), bn = grad_target(b), d](std::span<const double> g) {
                  if (xn) {
                    auto gx = grad_of(*xn);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  }
                  if (bn) {
                    auto gb = grad_of(*bn);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                  }
                });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto* tape = recording_tape({&x});
  return finish(Tensor::scalar(s), tape, [xn = grad_target(x)](std::span<const double> g) {
    auto gx = grad_of(*xn);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  auto* tape = recording_tape({&x});
  return finish(Tensor::scalar(s / n), tape,
                [xn = grad_target(x), n](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (auto& v : gx) v += g[0] / n;
                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<double> out(m * n);
  kernels::gemm(false, false, m, n, k, a.data(), b.data(), out);
  auto* tape = recording_tape({&a, &b});
  return finish(Tensor({m, n}, std::move(out)), tape,
                [an = grad_target(a), bn = grad_target(b), av = a.node(), bv = b.node(), m, n,
                 k](std::span<const double> g) {
                  if (an) kernels::gemm(false, true, m, k, n, g, bv->data, grad_of(*an), true);
                  if (bn) kernels::gemm(true, false, k, n, m, av->data, g, grad_of(*bn), true);
                });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0))
    throw DimensionError("batched_matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t batch = a.extent(0), m = a.extent(1), k = a.extent(2);
  const std::size_t kb = transpose_b ? b.extent(2) : b.extent(1);
  const std::size_t n = transpose_b ? b.extent(1) : b.extent(2);
  if (kb != k)
    throw DimensionError("batched_matmul: inner extents differ for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  std::vector<double> out(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s)
    kernels::gemm(false, transpose_b, m, n, k, a.data().subspan(s * m * k, m * k),
                  b.data().subspan(s * k * n, k * n), std::span(out).subspan(s * m * n, m * n));
  auto* tape = recording_tape({&a, &b});
  return finish(
      Tensor({batch, m, n}, std::move(out)), tape,
      [an = grad_target(a), bn = grad_target(b), av = a.node(), bv = b.node(), batch, m, n, k,
       transpose_b](std::span<const double> g) {
        for (std::size_t s = 0; s < batch; ++s) {
          auto gs = g.subspan(s * m * n, m * n);
          auto as = std::span<const double>(av->data).subspan(s * m * k, m * k);
          auto bs = std::span<const double>(bv->data).subspan(s * k * n, k * n);
          if (an) {
            // dA = G·Bᵀ (B k×n) or G·B (B n×k)
            kernels::gemm(false, !transpose_b, m, k, n, gs, bs,
                          grad_of(*an).subspan(s * m * k, m * k), true);
          }
          if (bn) {
            if (transpose_b)  // dB[n×k] = Gᵀ·A
              kernels::gemm(true, false, n, k, m, gs, as, grad_of(*bn).subspan(s * k * n, k * n),
                            true);
            else  // dB[k×n] = Aᵀ·G
              kernels::gemm(true, false, k, n, m, as, gs, grad_of(*bn).subspan(s * k * n, k * n),
                            true);
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                         shape_str(w.shape()));
  const std::size_t n = x.extent(0), in = x.extent(1), out_dim = w.extent(0);
  if (b.defined() && (b.rank() != 1 || b.numel() != out_dim))
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " for weight " +
                         shape_str(w.shape()));
  std::vector<double> out(n * out_dim);
  kernels::gemm(false, true, n, out_dim, in, x.data(), w.data(), out);
  if (b.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b[j];
  auto* tape = recording_tape({&x, &w, &b});
  return finish(Tensor({n, out_dim}, std::move(out)), tape,
                [xn = grad_target(x), wn = grad_target(w), bn = grad_target(b), xv = x.node(),
                 wv = w.node(), n, in, out_dim](std::span<const double> g) {
                  if (xn) kernels::gemm(false, false, n, in, out_dim, g, wv->data, grad_of(*xn), true);
                  if (wn) kernels::gemm(true, false, out_dim, in, n, g, xv->data, grad_of(*wn), true);
                  if (bn) {
                    auto gb = grad_of(*bn);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                  }
                });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.extent(0), c = x.extent(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  auto* tape = recording_tape({&x});
  return finish(Tensor({c, r}, std::move(out)), tape,
                [xn = grad_target(x), r, c](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto* tape = recording_tape({&x});
  return finish(Tensor(std::move(shape), std::vector<double>(x.data().begin(), x.data().end())),
                tape, [xn = grad_target(x)](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 2, "split_heads");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (heads == 0 || d % heads != 0)
    throw DimensionError("split_heads: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  std::vector<double> out(x.numel());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) out[(h * n + i) * dh + j] = x[i * d + h * dh + j];
  auto* tape = recording_tape({&x});
  return finish(Tensor({heads, n, dh}, std::move(out)), tape,
                [xn = grad_target(x), heads, n, d, dh](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < dh; ++j)
                        gx[i * d + h * dh + j] += g[(h * n + i) * dh + j];
                });
}

Tensor merge_heads(const Tensor& x) {
  require_rank(x, 3, "merge_heads");
  const std::size_t heads = x.extent(0), n = x.extent(1), dh = x.extent(2), d = heads * dh;
  std::vector<double> out(x.numel());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) out[i * d + h * dh + j] = x[(h * n + i) * dh + j];
  auto* tape = recording_tape({&x});
  return finish(Tensor({n, d}, std::move(out)), tape,
                [xn = grad_target(x), heads, n, d, dh](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < dh; ++j)
                        gx[(h * n + i) * dh + j] += g[i * d + h * dh + j];
                });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()))
    throw DimensionError("concat_last: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t p = a.shape().back(), q = b.shape().back(), rows = a.numel() / p;
  std::vector<double> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * p, p, out.begin() + r * (p + q));
    std::copy_n(b.data().begin() + r * q, q, out.begin() + r * (p + q) + p);
  }
  Shape shape = a.shape();
  shape.back() = p + q;
  auto* tape = recording_tape({&a, &b});
  return finish(Tensor(std::move(shape), std::move(out)), tape,
                [an = grad_target(a), bn = grad_target(b), rows, p, q](std::span<const double> g) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (an) {
                      auto ga = grad_of(*an);
                      for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
                    }
                    if (bn) {
                      auto gb = grad_of(*bn);
                      for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
                    }
                  }
                });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack: no tensors");
  const Shape& inner = parts[0].shape();
  const std::size_t len = parts[0].numel();
  std::vector<double> out;
  out.reserve(len * parts.size());
  std::vector<NodePtr> targets;
  Tape* tape = nullptr;
  for (const auto& t : parts) {
    if (t.shape() != inner)
      throw DimensionError("stack: " + shape_str(t.shape()) + " vs " + shape_str(inner));
    out.insert(out.end(), t.data().begin(), t.data().end());
    targets.push_back(grad_target(t));
    if (!tape) tape = recording_tape({&t});
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return finish(Tensor(std::move(shape), std::move(out)), tape,
                [targets, len](std::span<const double> g) {
                  for (std::size_t s = 0; s < targets.size(); ++s) {
                    if (!targets[s]) continue;
                    auto gs = grad_of(*targets[s]);
                    for (std::size_t i = 0; i < len; ++i) gs[i] += g[s * len + i];
                  }
                });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank(table, 2, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = table.extent(0), d = table.extent(1);
  std::vector<double> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows)
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " outside " +
                       std::to_string(rows) + " rows");
    std::copy_n(table.data().begin() + indices[i] * d, d, out.begin() + i * d);
  }
  auto* tape = recording_tape({&table});
  return finish(Tensor({indices.size(), d}, std::move(out)), tape,
                [tn = grad_target(table), idx = std::vector<std::size_t>(indices.begin(),
                                                                         indices.end()),
                 d](std::span<const double> g) {
                  auto gt = grad_of(*tn);
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
                });
}

Tensor softmax_masked(const Tensor& logits, const std::optional<Tensor>& mask) {
  const std::size_t n = logits.shape().back();
  const std::size_t rows = logits.numel() / n;
  std::size_t mask_rows = 0;
  if (mask) {
    if (mask->rank() == 1 && mask->numel() == n) {
      mask_rows = 1;
    } else if (mask->rank() == 2 && logits.rank() >= 2 && mask->extent(1) == n &&
               mask->extent(0) == logits.extent(logits.rank() - 2)) {
      mask_rows = mask->extent(0);
    } else {
      throw DimensionError("softmax_masked: mask " + shape_str(mask->shape()) +
                           " does not fit logits " + shape_str(logits.shape()));
    }
  }
  constexpr double kMaskedThreshold = kMaskedLogit / 2;
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* m = mask ? mask->data().data() + (r % mask_rows) * n : nullptr;
    const double* z = logits.data().data() + r * n;
    double* y = out.data() + r * n;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!m || m[j] > kMaskedThreshold) peak = std::max(peak, z[j] + (m ? m[j] : 0.0));
    if (!std::isfinite(peak))
      throw DegenerateRowError("softmax_masked: row " + std::to_string(r) +
                               " has every entry masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool masked = m && m[j] <= kMaskedThreshold;
      y[j] = masked ? 0.0 : std::exp(z[j] + (m ? m[j] : 0.0) - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  Tensor result(logits.shape(), std::move(out));
  auto* tape = recording_tape({&logits});
  return finish(result, tape,
                [xn = grad_target(logits), yn = std::weak_ptr<TensorNode>(result.node()), rows,
                 n](std::span<const double> g) {
                  auto y = yn.lock();
                  auto gx = grad_of(*xn);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += y->data[r * n + j] * g[r * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      gx[r * n + j] += y->data[r * n + j] * (g[r * n + j] - dot);
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: affine " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      out[r * d + j] = gain[j] * xhat[r * d + j] + bias[j];
    }
  }
  auto* tape = recording_tape({&x, &gain, &bias});
  return finish(Tensor(x.shape(), std::move(out)), tape,
                [xn = grad_target(x), gn = grad_target(gain), bn = grad_target(bias),
                 gv = gain.node(), xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 d](std::span<const double> g) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * d;
                    const double* hr = xhat.data() + r * d;
                    if (gn) {
                      auto gg = grad_of(*gn);
                      for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
                    }
                    if (bn) {
                      auto gb = grad_of(*bn);
                      for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
                    }
                    if (xn) {
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gv->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                      }
                      mean_dh /= static_cast<double>(d);
                      mean_dh_h /= static_cast<double>(d);
                      auto gx = grad_of(*xn);
                      for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] +=
                            inv_std[r] * (gr[j] * gv->data[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                  }
                });
}

Tensor global_average_pool(const Tensor& f) {
  require_rank(f, 3, "global_average_pool");
  const std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[ch] += f[ch * hw + i];
    out[ch] /= static_cast<double>(hw);
  }
  auto* tape = recording_tape({&f});
  return finish(Tensor({c}, std::move(out)), tape,
                [fn = grad_target(f), c, hw](std::span<const double> g) {
                  auto gf = grad_of(*fn);
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i)
                      gf[ch * hw + i] += g[ch] / static_cast<double>(hw);
                });
}

Tensor l2_normalize(const Tensor& v, double eps) {
  const std::size_t d = v.shape().back(), rows = v.numel() / d;
  std::vector<double> out(v.numel()), denom(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[r * d + j] * v[r * d + j];
    denom[r] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = v[r * d + j] / denom[r];
  }
  Tensor result(v.shape(), std::move(out));
  auto* tape = recording_tape({&v});
  return finish(result, tape,
                [vn = grad_target(v), yn = std::weak_ptr<TensorNode>(result.node()),
                 denom = std::move(denom), eps, rows, d](std::span<const double> g) {
                  auto y = yn.lock();
                  auto gv = grad_of(*vn);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y->data.data() + r * d;
                    const double* gr = g.data() + r * d;
                    // Inside the eps floor the map is linear.
                    const double dot =
                        denom[r] > eps ? std::inner_product(yr, yr + d, gr, 0.0) : 0.0;
                    for (std::size_t j = 0; j < d; ++j)
                      gv[r * d + j] += (gr[j] - yr[j] * dot) / denom[r];
                  }
                });
}

namespace {

// Writes softmax(z) into p and returns -log p[target].
double softmax_ce(const double* z, std::size_t k, std::size_t target, double* p) {
  double peak = *std::max_element(z, z + k);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = std::exp(z[j] - peak);
    total += p[j];
  }
  for (std::size_t j = 0; j < k; ++j) p[j] /= total;
  return -(z[target] - peak - std::log(total));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t k = logits.numel();
  if (target >= k)
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside " +
                     std::to_string(k) + " classes");
  std::vector<double> p(k);
  const double loss = softmax_ce(logits.data().data(), k, target, p.data());
  auto* tape = recording_tape({&logits});
  return finish(Tensor::scalar(loss), tape,
                [xn = grad_target(logits), p = std::move(p), target](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t j = 0; j < p.size(); ++j)
                    gx[j] += g[0] * (p[j] - (j == target ? 1.0 : 0.0));
                });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets,
                          std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy_rows");
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (targets.size() != n || weights.size() != n)
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets, " +
                         std::to_string(weights.size()) + " weights for " +
                         shape_str(logits.shape()));
  std::vector<double> p(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k)
      throw IndexError("cross_entropy_rows: target " + std::to_string(targets[i]) + " outside " +
                       std::to_string(k) + " classes");
    loss += weights[i] * softmax_ce(logits.data().data() + i * k, k, targets[i], p.data() + i * k);
  }
  auto* tape = recording_tape({&logits});
  return finish(Tensor::scalar(loss), tape,
                [xn = grad_target(logits), p = std::move(p),
                 t = std::vector<std::size_t>(targets.begin(), targets.end()),
                 w = std::vector<double>(weights.begin(), weights.end()), n,
                 k](std::span<const double> g) {
                  auto gx = grad_of(*xn);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j)
                      gx[i * k + j] +=
                          g[0] * w[i] * (p[i * k + j] - (j == t[i] ? 1.0 : 0.0));
                });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t c = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const std::size_t o = w.extent(0), kernel = w.extent(2);
  if (w.extent(1) != c || w.extent(3) != kernel)
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " for input " +
                         shape_str(x.shape()));
  if (h + 2 * pad < kernel || wd + 2 * pad < kernel || stride == 0)
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  const std::size_t oh = kernels::conv_out_extent(h, kernel, stride, pad);
  const std::size_t ow = kernels::conv_out_extent(wd, kernel, stride, pad);
  const std::size_t ck = c * kernel * kernel, spatial = oh * ow;
  std::vector<double> cols(ck * spatial);
  kernels::im2col(x.data(), c, h, wd, kernel, stride, pad, cols);
  std::vector<double> out(o * spatial);
  kernels::gemm(false, false, o, spatial, ck, w.data(), cols, out);
  if (b.defined())
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < spatial; ++i) out[oc * spatial + i] += b[oc];
  auto* tape = recording_tape({&x, &w, &b});
  if (!tape) return Tensor({o, oh, ow}, std::move(out));
  return finish(Tensor({o, oh, ow}, std::move(out)), tape,
                [xn = grad_target(x), wn = grad_target(w), bn = grad_target(b), wv = w.node(),
                 cols = std::move(cols), c, h, wd, o, kernel, stride, pad, ck,
                 spatial](std::span<const double> g) {
                  if (wn) kernels::gemm(false, true, o, ck, spatial, g, cols, grad_of(*wn), true);
                  if (bn) {
                    auto gb = grad_of(*bn);
                    for (std::size_t oc = 0; oc < o; ++oc)
                      for (std::size_t i = 0; i < spatial; ++i) gb[oc] += g[oc * spatial + i];
                  }
                  if (xn) {
                    std::vector<double> dcols(ck * spatial);
                    kernels::gemm(true, false, ck, spatial, o, wv->data, g, dcols);
                    kernels::col2im(dcols, c, h, wd, kernel, stride, pad, grad_of(*xn));
                  }
                });
}

}  // namespace updetr
