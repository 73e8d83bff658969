#pragma once

// Dense numeric kernels. Each kernel has a serial reference under
// `kernels::reference` that the tests and the benchmark compare against.
// The OpenMP variants partition output rows/channels only, so every output
// element is reduced in the same order as the reference and results are
// bitwise identical regardless of thread count.

#include <cstddef>
#include <span>

namespace updetr::kernels {

/// C[m×n] = A·B (+ C if accumulate). A is m×k (or k×m when trans_a),
/// B is k×n (or n×k when trans_b). Row-major, contiguous.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

/// Unfolds x[C×H×W] into columns[(C·kh·kw) × (oh·ow)].
void im2col(std::span<const double> x, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> columns);

/// Adjoint of im2col: scatters columns back into dx[C×H×W] (accumulating).
void col2im(std::span<const double> columns, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> dx);

constexpr std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

void im2col(std::span<const double> x, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> columns);

void col2im(std::span<const double> columns, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> dx);

}  // namespace reference

}  // namespace updetr::kernels
