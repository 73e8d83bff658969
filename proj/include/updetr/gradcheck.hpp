#pragma once

#include <functional>

#include "updetr/tensor.hpp"

namespace updetr {

/// Scalar-valued function of one tensor, evaluated with or without a tape.
using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the tape gradient of `fn` at `input` with central differences.
/// Returns max over coordinates of |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8).
double finite_diff_check(const ScalarFn& fn, const Tensor& input, double h = 1e-5);

/// Same comparison, but perturbs the coordinates `coords` of an existing
/// tensor in place (typically a model parameter) instead of a fresh input.
double finite_diff_check_inplace(const std::function<Tensor()>& loss, Tensor& param,
                                 std::span<const std::size_t> coords, double h = 1e-5);

}  // namespace updetr

#include <string>
#include <vector>

namespace updetr {

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kEndToEndGradTolerance = 1e-3;

/// Every differentiable operation (with respect to each input) at `trials`
/// random inputs; worst relative error per entry.
std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed, int trials = 10);

/// Pretext loss of a tiny model (d=16, 1+1 layers, N=4, M=2) against about
/// 1% of its parameters, assignment held fixed.
GradcheckResult end_to_end_gradcheck(std::uint64_t seed);

}  // namespace updetr
