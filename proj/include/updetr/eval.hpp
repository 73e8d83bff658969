#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "updetr/geometry.hpp"
#include "updetr/model.hpp"
#include "updetr/pretext.hpp"

namespace updetr {

struct Detection {
  std::size_t cls = 0;
  double confidence = 0.0;
  BoxCxCyWh box;
};

/// Detections for one image.
using DetectionResult = std::vector<Detection>;

/// Per-class AP at one IoU threshold; nullopt for classes without ground
/// truth. Greedy matching by descending confidence, 101-point interpolation.
std::vector<std::optional<double>> average_precision(std::span<const DetectionResult> results,
                                                     std::span<const std::vector<ObjectAnnotation>> truths,
                                                     std::size_t classes, double iou_threshold);

/// Mean over the classes that have ground truth (0 when none do).
double mean_ap(const std::vector<std::optional<double>>& per_class);

struct ApReport {
  std::vector<std::optional<double>> ap, ap50, ap75;  // per class
  double mean_ap = 0.0;  // averaged over IoU .50:.05:.95 and classes
  double mean_ap50 = 0.0;
  double mean_ap75 = 0.0;
};

ApReport evaluate_detections(std::span<const DetectionResult> results,
                             std::span<const std::vector<ObjectAnnotation>> truths, std::size_t classes);

/// One detection per query: argmax over the object classes, confidence its
/// softmax probability (the last logit column is "no object").
DetectionResult detections_from(const PredictionSet& preds);

/// Runs a detection model over images and scores it.
ApReport evaluate_model(const Model& model, std::span<const DetectionSample> samples);

inline constexpr double kLocateThreshold = 0.9;

struct LocateHit {
  std::size_t patch_index = 0;
  double confidence = 0.0;
  BoxCxCyWh box;
};

/// Pretext-mode localisation of query patches: every query of patch k's
/// group whose match probability exceeds the threshold, best first within
/// each patch.
std::vector<LocateHit> locate(const Model& model, const ImageRaster& image,
                              std::span<const ImageRaster> patches, double threshold = kLocateThreshold);

void write_locate_report(const std::filesystem::path& path, std::span<const LocateHit> hits);

struct CurveRecord {
  std::size_t epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
  friend bool operator==(const CurveRecord&, const CurveRecord&) = default;
};

/// CSV `epoch,split,metric,value`, values with 6 decimals.
void write_curves(const std::filesystem::path& path, std::span<const CurveRecord> records);
std::vector<CurveRecord> read_curves(const std::filesystem::path& path);

struct CurveDelta {
  std::size_t epoch = 0;
  double base = 0.0;
  double other = 0.0;
  double delta = 0.0;  // other - base
};

/// Pairs `split/metric` values at matching epochs.
std::vector<CurveDelta> compare_curves(std::span<const CurveRecord> base, std::span<const CurveRecord> other,
                                       const std::string& split, const std::string& metric);

/// Writes `epoch,<base>,<other>,delta`. A missing run is named in a single
/// `absent,<label>` line instead of fabricated rows.
void write_comparison(const std::filesystem::path& path, const std::string& base_label,
                      const std::optional<std::vector<CurveRecord>>& base, const std::string& other_label,
                      const std::optional<std::vector<CurveRecord>>& other, const std::string& split,
                      const std::string& metric);

}  // namespace updetr
