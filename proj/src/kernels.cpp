#include "updetr/kernels.hpp"

#include <algorithm>
#include <vector>

namespace updetr::kernels {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

inline double load_a(std::span<const double> a, bool trans, std::size_t m, std::size_t k,
                     std::size_t i, std::size_t p) {
  return trans ? a[p * m + i] : a[i * k + p];
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  // Pack B as k×n so the inner loop is a unit-stride axpy over four rows at
  // once. Each output still sums over p in ascending order, same as the
  // reference.
  std::vector<double> packed;
  const double* bp = b.data();
  if (trans_b) {
    packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) packed[p * n + j] = b[j * k + p];
    bp = packed.data();
  }
  constexpr std::size_t kRows = 4;
  const bool parallel = m * n * k >= kParallelWork && m > kRows;
  const auto blocks = static_cast<long>((m + kRows - 1) / kRows);
#pragma omp parallel for schedule(static) if (parallel)
  for (long bb = 0; bb < blocks; ++bb) {
    const std::size_t i0 = static_cast<std::size_t>(bb) * kRows;
    const std::size_t rows = std::min(kRows, m - i0);
    std::vector<double> acc(kRows * n, 0.0);
    double* r0 = acc.data();
    double* r1 = r0 + n;
    double* r2 = r1 + n;
    double* r3 = r2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = bp + p * n;
      if (rows == kRows) {
        const double a0 = load_a(a, trans_a, m, k, i0, p), a1 = load_a(a, trans_a, m, k, i0 + 1, p);
        const double a2 = load_a(a, trans_a, m, k, i0 + 2, p), a3 = load_a(a, trans_a, m, k, i0 + 3, p);
        for (std::size_t j = 0; j < n; ++j) {
          const double bv = brow[j];
          r0[j] += a0 * bv;
          r1[j] += a1 * bv;
          r2[j] += a2 * bv;
          r3[j] += a3 * bv;
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) {
          const double av = load_a(a, trans_a, m, k, i0 + r, p);
          double* row = acc.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double* crow = c.data() + (i0 + r) * n;
      const double* row = acc.data() + r * n;
      if (accumulate) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += row[j];
      } else {
        std::copy(row, row + n, crow);
      }
    }
  }
}

void im2col(std::span<const double> x, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> columns) {
  const std::size_t oh = conv_out_extent(height, kernel, stride, pad);
  const std::size_t ow = conv_out_extent(width, kernel, stride, pad);
  const auto chans = static_cast<long>(channels);
#pragma omp parallel for schedule(static) if (channels * oh * ow * kernel * kernel >= kParallelWork)
  for (long cc = 0; cc < chans; ++cc) {
    const auto ch = static_cast<std::size_t>(cc);
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        double* out = columns.data() + ((ch * kernel + ky) * kernel + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(height) &&
                                ix < static_cast<long>(width);
            out[oy * ow + ox] =
                inside ? x[(ch * height + static_cast<std::size_t>(iy)) * width +
                           static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(std::span<const double> columns, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> dx) {
  const std::size_t oh = conv_out_extent(height, kernel, stride, pad);
  const std::size_t ow = conv_out_extent(width, kernel, stride, pad);
  const auto chans = static_cast<long>(channels);
  // Channels write disjoint slices of dx; within a channel the scatter order
  // matches the reference.
#pragma omp parallel for schedule(static) if (channels * oh * ow * kernel * kernel >= kParallelWork)
  for (long cc = 0; cc < chans; ++cc) {
    const auto ch = static_cast<std::size_t>(cc);
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* in = columns.data() + ((ch * kernel + ky) * kernel + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(width)) continue;
            dx[(ch * height + static_cast<std::size_t>(iy)) * width +
               static_cast<std::size_t>(ix)] += in[oy * ow + ox];
          }
        }
      }
    }
  }
}

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

void im2col(std::span<const double> x, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> columns) {
  const std::size_t oh = conv_out_extent(height, kernel, stride, pad);
  const std::size_t ow = conv_out_extent(width, kernel, stride, pad);
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t ky = 0; ky < kernel; ++ky)
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            double v = 0.0;
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(height) &&
                ix < static_cast<long>(width))
              v = x[(ch * height + static_cast<std::size_t>(iy)) * width +
                    static_cast<std::size_t>(ix)];
            columns[row * oh * ow + oy * ow + ox] = v;
          }
}

void col2im(std::span<const double> columns, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kernel, std::size_t stride, std::size_t pad,
            std::span<double> dx) {
  const std::size_t oh = conv_out_extent(height, kernel, stride, pad);
  const std::size_t ow = conv_out_extent(width, kernel, stride, pad);
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t ky = 0; ky < kernel; ++ky)
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(height) &&
                ix < static_cast<long>(width))
              dx[(ch * height + static_cast<std::size_t>(iy)) * width +
                 static_cast<std::size_t>(ix)] += columns[row * oh * ow + oy * ow + ox];
          }
}

}  // namespace reference

}  // namespace updetr::kernels
