#pragma once

#include <array>
#include <span>

#include "updetr/tensor.hpp"

namespace updetr {

/// Normalised box: centre and size as fractions of the image extent.
struct BoxCxCyWh {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;
  friend bool operator==(const BoxCxCyWh&, const BoxCxCyWh&) = default;
};

struct BoxXyXy {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
  friend bool operator==(const BoxXyXy&, const BoxXyXy&) = default;
};

inline constexpr double kL1Weight = 5.0;
inline constexpr double kGiouWeight = 2.0;
inline constexpr double kAreaFloor = 1e-9;

BoxXyXy to_xyxy(const BoxCxCyWh& b);
BoxCxCyWh to_cxcywh(const BoxXyXy& b);

double area(const BoxXyXy& b);
double iou(const BoxXyXy& a, const BoxXyXy& b);
double giou(const BoxXyXy& a, const BoxXyXy& b);

/// λ_L1·‖pred − gt‖₁ + λ_giou·(1 − giou(pred, gt)).
double box_loss(const BoxCxCyWh& pred, const BoxCxCyWh& gt);

/// Gradient of box_loss with respect to (cx, cy, w, h) of `pred`.
std::array<double, 4> box_loss_grad(const BoxCxCyWh& pred, const BoxCxCyWh& gt);

/// Σ_rows box_loss(pred[i], gt[i]) for pred[G×4] on the tape; gt is constant.
Tensor box_loss(const Tensor& pred, std::span<const BoxCxCyWh> gt);

BoxCxCyWh box_from_row(std::span<const double> row);

}  // namespace updetr
