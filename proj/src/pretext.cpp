#include "updetr/pretext.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "updetr/error.hpp"

namespace updetr {

namespace {

using Rgb = std::array<double, 3>;

Rgb random_color(Rng& rng) {
  return {rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255)};
}

double color_distance(const Rgb& a, const Rgb& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                   (a[2] - b[2]) * (a[2] - b[2]));
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Pixel-centre inclusion test for a shape whose bounding box is `b` (pixels).
bool inside(ShapeKind kind, const BoxXyXy& b, double px, double py) {
  switch (kind) {
    case ShapeKind::Square:
      return px >= b.x0 && px < b.x1 && py >= b.y0 && py < b.y1;
    case ShapeKind::Circle: {
      const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1), r = 0.5 * (b.x1 - b.x0);
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeKind::Triangle: {
      // Apex at top centre, base along the bottom edge.
      if (py < b.y0 || py >= b.y1) return false;
      const double t = (py - b.y0) / (b.y1 - b.y0);
      const double half = 0.5 * (b.x1 - b.x0) * t, cx = 0.5 * (b.x0 + b.x1);
      return px >= cx - half && px <= cx + half;
    }
  }
  return false;
}

}  // namespace

DetectionSample synth_image(std::uint64_t seed, const SynthSpec& spec) {
  if (spec.width < kMinImageSide || spec.height < kMinImageSide)
    throw ConfigError("synth: canvas smaller than " + std::to_string(kMinImageSide) + " pixels");
  if (spec.kinds.empty() || spec.min_shapes == 0 || spec.min_shapes > spec.max_shapes ||
      spec.min_size <= 0 || spec.min_size > spec.max_size || spec.max_size > 1.0)
    throw ConfigError("synth: invalid shape count or size range");
  Rng rng(seed);
  DetectionSample sample;
  ImageRaster& img = sample.image = ImageRaster(spec.width, spec.height);
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height);

  // Four-corner bilinear gradient, so every position has a distinct colour.
  std::array<Rgb, 4> corner;
  for (auto& c : corner) c = random_color(rng);
  std::vector<Rgb> background(spec.width * spec.height);
  for (std::size_t y = 0; y < spec.height; ++y) {
    const double ty = (static_cast<double>(y) + 0.5) / h;
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double tx = (static_cast<double>(x) + 0.5) / w;
      Rgb& bg = background[y * spec.width + x];
      for (std::size_t c = 0; c < 3; ++c) {
        bg[c] = (corner[0][c] * (1 - tx) + corner[1][c] * tx) * (1 - ty) +
                (corner[2][c] * (1 - tx) + corner[3][c] * tx) * ty;
        img.at(x, y, c) = to_byte(bg[c] + static_cast<double>(rng.uniform_int(-spec.noise, spec.noise)));
      }
    }
  }

  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(spec.min_shapes), static_cast<long>(spec.max_shapes)));
  const double side = std::min(w, h);
  for (std::size_t s = 0; s < count; ++s) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const ShapeKind kind = spec.kinds[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<long>(spec.kinds.size()) - 1))];
      const double extent = rng.uniform(spec.min_size, spec.max_size) * side;
      const double x0 = rng.uniform(0.0, w - extent), y0 = rng.uniform(0.0, h - extent);
      const BoxXyXy px{x0, y0, x0 + extent, y0 + extent};
      const BoxCxCyWh box = to_cxcywh({px.x0 / w, px.y0 / h, px.x1 / w, px.y1 / h});
      bool clash = false;
      for (const auto& o : sample.objects)
        clash = clash || iou(to_xyxy(o.box), to_xyxy(box)) > spec.max_overlap_iou;
      if (clash) continue;
      const auto cx = std::min<std::size_t>(static_cast<std::size_t>(0.5 * (px.x0 + px.x1)), spec.width - 1);
      const auto cy = std::min<std::size_t>(static_cast<std::size_t>(0.5 * (px.y0 + px.y1)), spec.height - 1);
      Rgb color = random_color(rng);
      for (int k = 0; k < 20 && color_distance(color, background[cy * spec.width + cx]) < 100; ++k)
        color = random_color(rng);
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x)
          if (inside(kind, px, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
            for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = to_byte(color[c]);
      sample.objects.push_back({static_cast<std::size_t>(kind), box});
      break;
    }
  }
  return sample;
}

ImageRaster resize_policy(const ImageRaster& img, const ResizeRange& range, Rng& rng) {
  if (range.short_lo == 0 || range.short_lo > range.short_hi || range.short_hi > range.long_max)
    throw ConfigError("resize: require 0 < short_lo <= short_hi <= long_max");
  const double target = static_cast<double>(
      rng.uniform_int(static_cast<long>(range.short_lo), static_cast<long>(range.short_hi)));
  const double short_side = static_cast<double>(std::min(img.width, img.height));
  const double long_side = static_cast<double>(std::max(img.width, img.height));
  double factor = target / short_side;
  if (long_side * factor > static_cast<double>(range.long_max))
    factor = static_cast<double>(range.long_max) / long_side;
  const auto out_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(img.width * factor)));
  const auto out_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(img.height * factor)));
  return resize(img, std::min(out_w, range.long_max), std::min(out_h, range.long_max));
}

ImageRaster crop_patch(const ImageRaster& img, const BoxCxCyWh& box, std::size_t patch_side) {
  const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
  const BoxXyXy r = to_xyxy(box);
  return resample(img, r.x0 * w, r.y0 * h, (r.x1 - r.x0) * w, (r.y1 - r.y0) * h, patch_side,
                  patch_side);
}

QueryCrops crop_queries(const ImageRaster& img, std::size_t m, std::size_t max_queries,
                        const CropConfig& config, Rng& rng) {
  if (m == 0) throw ConfigError("crop_queries: need at least one patch");
  if (m > max_queries)
    throw CapacityError("crop_queries: " + std::to_string(m) + " patches exceed " +
                        std::to_string(max_queries) + " object queries");
  QueryCrops out;
  const auto sample_extent = [&](std::size_t side) {
    const auto lo = std::max<long>(1, std::lround(std::ceil(config.min_side_fraction * static_cast<double>(side))));
    const long extent = rng.uniform_int(lo, static_cast<long>(side));
    const long offset = rng.uniform_int(0, static_cast<long>(side) - extent);
    return std::pair<long, long>{offset, extent};
  };
  for (std::size_t i = 0; i < m; ++i) {
    const auto [x0, cw] = sample_extent(img.width);
    const auto [y0, ch] = sample_extent(img.height);
    const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
    const BoxCxCyWh box{(static_cast<double>(x0) + 0.5 * static_cast<double>(cw)) / w,
                        (static_cast<double>(y0) + 0.5 * static_cast<double>(ch)) / h,
                        static_cast<double>(cw) / w, static_cast<double>(ch) / h};
    out.boxes.push_back(box);
    out.patches.push_back(crop_patch(img, box, config.patch_side));
  }
  return out;
}

ImageRaster augment(const ImageRaster& patch, const AugmentConfig& config, Rng& rng) {
  ImageRaster out = patch;
  const std::size_t n = patch.width * patch.height;
  std::vector<double> v(patch.pixels.begin(), patch.pixels.end());
  const auto luma = [&](std::size_t i) {
    return 0.299 * v[i * 3] + 0.587 * v[i * 3 + 1] + 0.114 * v[i * 3 + 2];
  };
  // Random order of the three jitters, as in SimCLR-style colour jitter.
  std::array<int, 3> order{0, 1, 2};
  for (std::size_t i = 2; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i)))]);
  bool touched = false;
  for (int op : order) {
    const double strength = op == 0 ? config.brightness : op == 1 ? config.contrast : config.saturation;
    if (strength <= 0.0) continue;
    const double f = rng.uniform(1.0 - strength, 1.0 + strength);
    touched = true;
    if (op == 0) {
      for (auto& x : v) x *= f;
    } else if (op == 1) {
      double mean_luma = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean_luma += luma(i);
      mean_luma /= static_cast<double>(n);
      for (auto& x : v) x = mean_luma + f * (x - mean_luma);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = luma(i);
        for (std::size_t c = 0; c < 3; ++c) v[i * 3 + c] = g + f * (v[i * 3 + c] - g);
      }
    }
    for (auto& x : v) x = std::clamp(x, 0.0, 255.0);
  }
  if (config.grayscale_probability > 0.0 && rng.bernoulli(config.grayscale_probability)) {
    touched = true;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = luma(i);
      for (std::size_t c = 0; c < 3; ++c) v[i * 3 + c] = g;
    }
  }
  if (!touched) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out.pixels[i] = to_byte(v[i]);
  return out;
}

std::vector<bool> patch_dropout(std::vector<ImageRaster>& patches, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("patch_dropout: rate must lie in [0, 1)");
  std::vector<bool> dropped(patches.size(), false);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (rate > 0.0 && rng.bernoulli(rate)) {
      dropped[i] = true;
      std::fill(patches[i].pixels.begin(), patches[i].pixels.end(), 0);
    }
  }
  return dropped;
}

PretextSample make_pretext_sample(const ImageRaster& source, const PretextConfig& config,
                                  std::uint64_t seed) {
  Rng rng(seed);
  PretextSample sample;
  sample.seed = seed;
  sample.image = resize_policy(source, config.resize, rng);
  auto crops = crop_queries(sample.image, config.patches, config.max_queries, config.crop, rng);
  sample.gt_boxes = std::move(crops.boxes);
  sample.patches = std::move(crops.patches);
  if (config.use_augment)
    for (auto& p : sample.patches) p = augment(p, config.augment, rng);
  sample.dropped = patch_dropout(sample.patches, config.dropout_rate, rng);
  return sample;
}

}  // namespace updetr
