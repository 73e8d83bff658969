#include "updetr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "updetr/error.hpp"
#include "updetr/ops.hpp"

namespace updetr {

std::vector<std::optional<double>> average_precision(std::span<const DetectionResult> results,
                                                     std::span<const std::vector<ObjectAnnotation>> truths,
                                                     std::size_t classes, double iou_threshold) {
  if (results.size() != truths.size())
    throw DimensionError("average_precision: results and ground truths cover different image counts");
  std::vector<std::optional<double>> out(classes);
  for (std::size_t cls = 0; cls < classes; ++cls) {
    std::size_t gt_count = 0;
    for (const auto& t : truths)
      for (const auto& o : t) gt_count += o.cls == cls;
    if (gt_count == 0) continue;

    struct Ranked {
      double confidence;
      std::size_t image, index;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < results.size(); ++i)
      for (std::size_t k = 0; k < results[i].size(); ++k)
        if (results[i][k].cls == cls) ranked.push_back({results[i][k].confidence, i, k});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.confidence > b.confidence; });

    std::vector<std::vector<bool>> taken(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) taken[i].assign(truths[i].size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto& det = results[ranked[r].image][ranked[r].index];
      const auto& gts = truths[ranked[r].image];
      double best = -1.0;
      long best_j = -1;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].cls != cls || taken[ranked[r].image][j]) continue;
        const double v = iou(to_xyxy(det.box), to_xyxy(gts[j].box));
        if (v > best) {
          best = v;
          best_j = static_cast<long>(j);
        }
      }
      if (best_j >= 0 && best >= iou_threshold) {
        taken[ranked[r].image][static_cast<std::size_t>(best_j)] = true;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
    }
    // Precision envelope, then sample at recall 0, 0.01, ..., 1.
    for (std::size_t r = precision.size(); r-- > 1;) precision[r - 1] = std::max(precision[r - 1], precision[r]);
    double total = 0.0;
    for (int s = 0; s <= 100; ++s) {
      const double level = s / 100.0;
      const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
      if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    out[cls] = total / 101.0;
  }
  return out;
}

double mean_ap(const std::vector<std::optional<double>>& per_class) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_class)
    if (v) {
      total += *v;
      ++n;
    }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

ApReport evaluate_detections(std::span<const DetectionResult> results,
                             std::span<const std::vector<ObjectAnnotation>> truths, std::size_t classes) {
  ApReport report;
  report.ap.assign(classes, std::nullopt);
  std::vector<double> sums(classes, 0.0);
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.5 + 0.05 * t;
    const auto per = average_precision(results, truths, classes, thr);
    for (std::size_t c = 0; c < classes; ++c)
      if (per[c]) sums[c] += *per[c];
    report.mean_ap += mean_ap(per) / 10.0;
    if (t == 0) {
      report.ap50 = per;
      report.mean_ap50 = mean_ap(per);
    }
    if (t == 5) {
      report.ap75 = per;
      report.mean_ap75 = mean_ap(per);
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (report.ap50[c]) report.ap[c] = sums[c] / 10.0;
  return report;
}

DetectionResult detections_from(const PredictionSet& preds) {
  const Tensor probs = softmax_masked(preds.class_logits);
  const std::size_t n = probs.extent(0), k = probs.extent(1);
  if (k < 2) throw DimensionError("detections_from: need at least one object class");
  DetectionResult out;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c + 1 < k; ++c)
      if (probs[i * k + c] > probs[i * k + best]) best = c;
    out.push_back({best, probs[i * k + best], box_from_row(preds.boxes.data().subspan(i * 4, 4))});
  }
  return out;
}

ApReport evaluate_model(const Model& model, std::span<const DetectionSample> samples) {
  std::vector<DetectionResult> results(samples.size());
  std::vector<std::vector<ObjectAnnotation>> truths(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    results[i] = detections_from(model.forward_detect(samples[i].image).back());
    truths[i] = samples[i].objects;
  }
  return evaluate_detections(results, truths, model.config().classes);
}

std::vector<LocateHit> locate(const Model& model, const ImageRaster& image,
                              std::span<const ImageRaster> patches, double threshold) {
  if (patches.empty()) return {};
  model.config().validate(patches.size());
  const auto out = model.forward_pretrain(image, patches);
  const PredictionSet& ps = out.per_layer.back();
  const Tensor probs = softmax_masked(ps.class_logits);
  const std::size_t n = ps.queries(), group = n / patches.size();
  std::vector<LocateHit> hits;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    std::vector<LocateHit> mine;
    for (std::size_t q = k * group; q < (k + 1) * group; ++q) {
      const double p = probs[q * 2 + kMatchClass];
      if (p > threshold) mine.push_back({k, p, box_from_row(ps.boxes.data().subspan(q * 4, 4))});
    }
    std::stable_sort(mine.begin(), mine.end(),
                     [](const LocateHit& a, const LocateHit& b) { return a.confidence > b.confidence; });
    hits.insert(hits.end(), mine.begin(), mine.end());
  }
  return hits;
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_locate_report(const std::filesystem::path& path, std::span<const LocateHit> hits) {
  std::ofstream os(path);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  for (const auto& h : hits)
    os << h.patch_index << ' ' << fixed6(h.confidence) << ' ' << fixed6(h.box.cx) << ' ' << fixed6(h.box.cy)
       << ' ' << fixed6(h.box.w) << ' ' << fixed6(h.box.h) << '\n';
}

void write_curves(const std::filesystem::path& path, std::span<const CurveRecord> records) {
  std::ofstream os(path);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << "epoch,split,metric,value\n";
  for (const auto& r : records) os << r.epoch << ',' << r.split << ',' << r.metric << ',' << fixed6(r.value) << '\n';
}

std::vector<CurveRecord> read_curves(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path.string() + ": cannot open curve file");
  std::string line;
  if (!std::getline(is, line) || line != "epoch,split,metric,value")
    throw InputError(path.string() + ": missing curve header");
  std::vector<CurveRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string epoch, split, metric, value;
    if (!std::getline(ss, epoch, ',') || !std::getline(ss, split, ',') || !std::getline(ss, metric, ',') ||
        !std::getline(ss, value))
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed curve record");
    try {
      out.push_back({std::stoul(epoch), split, metric, std::stod(value)});
    } catch (const std::logic_error&) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

std::vector<CurveDelta> compare_curves(std::span<const CurveRecord> base, std::span<const CurveRecord> other,
                                       const std::string& split, const std::string& metric) {
  std::vector<CurveDelta> out;
  for (const auto& b : base) {
    if (b.split != split || b.metric != metric) continue;
    for (const auto& o : other)
      if (o.split == split && o.metric == metric && o.epoch == b.epoch) {
        out.push_back({b.epoch, b.value, o.value, o.value - b.value});
        break;
      }
  }
  return out;
}

void write_comparison(const std::filesystem::path& path, const std::string& base_label,
                      const std::optional<std::vector<CurveRecord>>& base, const std::string& other_label,
                      const std::optional<std::vector<CurveRecord>>& other, const std::string& split,
                      const std::string& metric) {
  std::ofstream os(path);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << "epoch," << base_label << ',' << other_label << ",delta\n";
  if (!base) os << "absent," << base_label << '\n';
  if (!other) os << "absent," << other_label << '\n';
  if (!base || !other) return;
  for (const auto& d : compare_curves(*base, *other, split, metric))
    os << d.epoch << ',' << fixed6(d.base) << ',' << fixed6(d.other) << ',' << fixed6(d.delta) << '\n';
}

}  // namespace updetr
