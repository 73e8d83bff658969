#pragma once

// Synthetic scenes and the random-query-patch sample pipeline:
// resize -> crop M query patches -> augment -> patch dropout.

#include <cstdint>
#include <vector>

#include "updetr/geometry.hpp"
#include "updetr/image.hpp"
#include "updetr/random.hpp"

namespace updetr {

enum class ShapeKind : std::size_t { Circle = 0, Square = 1, Triangle = 2 };
inline constexpr std::size_t kShapeClasses = 3;

struct SynthSpec {
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 6;
  double min_size = 0.15;  // shape extent as a fraction of the shorter canvas side
  double max_size = 0.5;
  std::vector<ShapeKind> kinds{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
  double max_overlap_iou = 0.3;
  int noise = 6;  // uniform per-pixel noise amplitude on the background
};

struct ObjectAnnotation {
  std::size_t cls = 0;
  BoxCxCyWh box;
};

struct DetectionSample {
  ImageRaster image;
  std::vector<ObjectAnnotation> objects;
};

/// Deterministic per seed.
DetectionSample synth_image(std::uint64_t seed, const SynthSpec& spec);

struct ResizeRange {
  std::size_t short_lo = 48;
  std::size_t short_hi = 64;
  std::size_t long_max = 80;
};

/// Samples the shorter side uniformly in [short_lo, short_hi], keeps the
/// aspect ratio and caps the longer side at long_max.
ImageRaster resize_policy(const ImageRaster& img, const ResizeRange& range, Rng& rng);

struct CropConfig {
  std::size_t patch_side = 16;
  double min_side_fraction = 0.125;
};

struct QueryCrops {
  std::vector<ImageRaster> patches;
  std::vector<BoxCxCyWh> boxes;  // crop rectangles normalised to the image
};

/// M independent uniform crops; each side uniform in [min_side_fraction, 1]
/// of the image side, position uniform subject to containment.
QueryCrops crop_queries(const ImageRaster& img, std::size_t m, std::size_t max_queries,
                        const CropConfig& config, Rng& rng);

/// Crops the given normalised rectangle and resizes it to the patch side.
ImageRaster crop_patch(const ImageRaster& img, const BoxCxCyWh& box, std::size_t patch_side);

struct AugmentConfig {
  double brightness = 0.4;  // factors drawn from [1 - s, 1 + s]
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_probability = 0.2;
};

/// Colour jitter and random grayscale. Never flips.
ImageRaster augment(const ImageRaster& patch, const AugmentConfig& config, Rng& rng);

/// Zeroes each patch independently with probability `rate`; returns the flags.
std::vector<bool> patch_dropout(std::vector<ImageRaster>& patches, double rate, Rng& rng);

struct PretextConfig {
  ResizeRange resize;
  CropConfig crop;
  AugmentConfig augment;
  bool use_augment = true;
  std::size_t patches = 4;       // M
  std::size_t max_queries = 16;  // N
  double dropout_rate = 0.1;
};

struct PretextSample {
  ImageRaster image;
  std::vector<ImageRaster> patches;
  std::vector<BoxCxCyWh> gt_boxes;
  std::vector<bool> dropped;
  std::uint64_t seed = 0;
};

/// Pure function of (source image, config, seed).
PretextSample make_pretext_sample(const ImageRaster& source, const PretextConfig& config,
                                  std::uint64_t seed);

}  // namespace updetr
