#include "updetr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "updetr/error.hpp"

namespace updetr {

namespace {

double relative_error(double tape, double fd) {
  return std::abs(tape - fd) / std::max({std::abs(tape), std::abs(fd), 1e-8});
}

}  // namespace

double finite_diff_check(const ScalarFn& fn, const Tensor& input, double h) {
  Tensor x(input.shape(), std::vector<double>(input.data().begin(), input.data().end()), true);
  std::vector<double> tape_grad(x.numel(), 0.0);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = fn(x);
    if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
    if (y.requires_grad()) {
      backward(y, tape);
      if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), tape_grad.begin());
    }
  }
  double worst = 0.0;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = fn(Tensor(x.shape(), probe)).item();
    probe[i] = saved - h;
    const double down = fn(Tensor(x.shape(), probe)).item();
    probe[i] = saved;
    worst = std::max(worst, relative_error(tape_grad[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

double finite_diff_check_inplace(const std::function<Tensor()>& loss, Tensor& param,
                                 std::span<const std::size_t> coords, double h) {
  param.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = loss();
    backward(y, tape);
  }
  std::vector<double> tape_grad(param.numel(), 0.0);
  if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), tape_grad.begin());
  param.zero_grad();
  double worst = 0.0;
  auto values = param.mutable_data();
  for (std::size_t i : coords) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss().item();
    values[i] = saved - h;
    const double down = loss().item();
    values[i] = saved;
    worst = std::max(worst, relative_error(tape_grad[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

}  // namespace updetr
