#include "updetr/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "updetr/error.hpp"

namespace updetr {

namespace {

// Value plus its derivative along the four predicted coordinates.
struct Dual {
  double v = 0.0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
  static Dual seed(double value, std::size_t axis) {
    Dual x(value);
    x.d[axis] = 1.0;
    return x;
  }

  friend Dual operator+(Dual a, const Dual& b) {
    a.v += b.v;
    for (std::size_t i = 0; i < 4; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual operator-(Dual a, const Dual& b) {
    a.v -= b.v;
    for (std::size_t i = 0; i < 4; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (std::size_t i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (std::size_t i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
  }
};

double value(double x) { return x; }
double value(const Dual& x) { return x.v; }

// Ties resolve to the first argument.
template <class T>
T max_of(const T& a, const T& b) {
  return value(a) >= value(b) ? a : b;
}
template <class T>
T min_of(const T& a, const T& b) {
  return value(a) <= value(b) ? a : b;
}
template <class T>
T abs_of(const T& a) {
  return value(a) >= 0.0 ? a : T(0.0) - a;
}

template <class T>
T giou_impl(const T& ax0, const T& ay0, const T& ax1, const T& ay1, const T& bx0, const T& by0,
            const T& bx1, const T& by1) {
  const T zero(0.0);
  const T area_a = max_of(ax1 - ax0, zero) * max_of(ay1 - ay0, zero);
  const T area_b = max_of(bx1 - bx0, zero) * max_of(by1 - by0, zero);
  const T iw = max_of(min_of(ax1, bx1) - max_of(ax0, bx0), zero);
  const T ih = max_of(min_of(ay1, by1) - max_of(ay0, by0), zero);
  const T inter = iw * ih;
  const T uni = max_of(area_a + area_b - inter, T(kAreaFloor));
  const T cw = max_of(max_of(ax1, bx1) - min_of(ax0, bx0), zero);
  const T ch = max_of(max_of(ay1, by1) - min_of(ay0, by0), zero);
  const T enclosing = max_of(cw * ch, T(kAreaFloor));
  return inter / uni - (enclosing - uni) / enclosing;
}

template <class T>
T box_loss_impl(const T& cx, const T& cy, const T& w, const T& h, const BoxCxCyWh& gt) {
  const T half(0.5);
  const T l1 = abs_of(cx - T(gt.cx)) + abs_of(cy - T(gt.cy)) + abs_of(w - T(gt.w)) +
               abs_of(h - T(gt.h));
  const BoxXyXy g = to_xyxy(gt);
  const T gi = giou_impl(cx - half * w, cy - half * h, cx + half * w, cy + half * h, T(g.x0),
                         T(g.y0), T(g.x1), T(g.y1));
  return T(kL1Weight) * l1 + T(kGiouWeight) * (T(1.0) - gi);
}

}  // namespace

BoxXyXy to_xyxy(const BoxCxCyWh& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCxCyWh to_cxcywh(const BoxXyXy& b) {
  return {0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1), b.x1 - b.x0, b.y1 - b.y0};
}

double area(const BoxXyXy& b) { return std::max(b.x1 - b.x0, 0.0) * std::max(b.y1 - b.y0, 0.0); }

double iou(const BoxXyXy& a, const BoxXyXy& b) {
  const double iw = std::max(std::min(a.x1, b.x1) - std::max(a.x0, b.x0), 0.0);
  const double ih = std::max(std::min(a.y1, b.y1) - std::max(a.y0, b.y0), 0.0);
  const double inter = iw * ih;
  return inter / std::max(area(a) + area(b) - inter, kAreaFloor);
}

double giou(const BoxXyXy& a, const BoxXyXy& b) {
  return giou_impl(a.x0, a.y0, a.x1, a.y1, b.x0, b.y0, b.x1, b.y1);
}

double box_loss(const BoxCxCyWh& pred, const BoxCxCyWh& gt) {
  return box_loss_impl(pred.cx, pred.cy, pred.w, pred.h, gt);
}

std::array<double, 4> box_loss_grad(const BoxCxCyWh& pred, const BoxCxCyWh& gt) {
  return box_loss_impl(Dual::seed(pred.cx, 0), Dual::seed(pred.cy, 1), Dual::seed(pred.w, 2),
                       Dual::seed(pred.h, 3), gt)
      .d;
}

BoxCxCyWh box_from_row(std::span<const double> row) { return {row[0], row[1], row[2], row[3]}; }

Tensor box_loss(const Tensor& pred, std::span<const BoxCxCyWh> gt) {
  if (pred.rank() != 2 || pred.extent(1) != 4 || pred.extent(0) != gt.size())
    throw DimensionError("box_loss: predictions " + shape_str(pred.shape()) + " for " +
                         std::to_string(gt.size()) + " targets");
  const std::size_t rows = gt.size();
  double total = 0.0;
  std::vector<double> grads(rows * 4);
  for (std::size_t i = 0; i < rows; ++i) {
    const BoxCxCyWh p = box_from_row(pred.data().subspan(i * 4, 4));
    total += box_loss(p, gt[i]);
    const auto g = box_loss_grad(p, gt[i]);
    std::copy(g.begin(), g.end(), grads.begin() + static_cast<std::ptrdiff_t>(i * 4));
  }
  Tensor out = Tensor::scalar(total);
  if (auto* tape = recording_tape({&pred})) {
    out.set_requires_grad(true);
    tape->record(out, [pn = pred.node(), grads = std::move(grads)](std::span<const double> g) {
      auto gp = grad_of(*pn);
      for (std::size_t i = 0; i < grads.size(); ++i) gp[i] += g[0] * grads[i];
    });
  }
  return out;
}

}  // namespace updetr
