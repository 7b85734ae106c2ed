#pragma once

// Flow and segmentation quality metrics: mean endpoint error, the KITTI
// outlier rate (error > 3 px and > 5% of the ground-truth magnitude), and
// mask IoU. All statistics run over valid ground-truth pixels only.

#include <optional>

#include "sof/core.hpp"

namespace sof {

struct FlowMetrics {
  struct Entry {
    double epe = 0.0;
    double fl = 0.0;       // outlier fraction in [0,1]
    size_t pixels = 0;
  };
  std::optional<Entry> all, bg, fg, nocc;
};

/// Mean endpoint error over valid ground-truth pixels.
inline double endpoint_error(const FlowField& est, const FlowField& gt) {
  if (!est.same_size(gt))
    throw std::invalid_argument("endpoint_error: dimension mismatch");
  double sum = 0;
  size_t n = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      if (!gt.valid_at(x, y)) continue;
      sum += std::hypot(double(est.u_at(x, y)) - gt.u_at(x, y),
                        double(est.v_at(x, y)) - gt.v_at(x, y));
      ++n;
    }
  if (n == 0) throw std::runtime_error("endpoint_error: no valid pixels");
  return sum / n;
}

inline bool kitti_outlier(double err, double gt_mag) {
  return err > 3.0 && err > 0.05 * gt_mag;
}

/// Per-mask EPE/Fl breakdown in the benchmark's reporting structure:
/// all pixels, background (outside fg_mask), foreground, and non-occluded.
/// Entries whose mask selects no valid pixel are absent. Masks are optional.
inline FlowMetrics fl_outlier_rate(const FlowField& est, const FlowField& gt,
                                   const Mask* fg_mask = nullptr,
                                   const Mask* nocc_mask = nullptr) {
  if (!est.same_size(gt))
    throw std::invalid_argument("fl_outlier_rate: dimension mismatch");
  if (fg_mask && (fg_mask->width != gt.width || fg_mask->height != gt.height))
    throw std::invalid_argument("fl_outlier_rate: fg mask dimension mismatch");
  if (nocc_mask &&
      (nocc_mask->width != gt.width || nocc_mask->height != gt.height))
    throw std::invalid_argument("fl_outlier_rate: nocc mask dimension mismatch");

  struct Acc {
    double epe_sum = 0;
    size_t outliers = 0;
    size_t n = 0;
    void add(double err, bool outlier) {
      epe_sum += err;
      outliers += outlier;
      ++n;
    }
    std::optional<FlowMetrics::Entry> entry() const {
      if (n == 0) return std::nullopt;
      return FlowMetrics::Entry{epe_sum / n, double(outliers) / n, n};
    }
  };
  Acc all, bg, fg, nocc;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      if (!gt.valid_at(x, y)) continue;
      const double err = std::hypot(double(est.u_at(x, y)) - gt.u_at(x, y),
                                    double(est.v_at(x, y)) - gt.v_at(x, y));
      const double mag = std::hypot(double(gt.u_at(x, y)), double(gt.v_at(x, y)));
      const bool out = kitti_outlier(err, mag);
      all.add(err, out);
      if (fg_mask) (fg_mask->at(x, y) ? fg : bg).add(err, out);
      if (nocc_mask && nocc_mask->at(x, y)) nocc.add(err, out);
    }
  FlowMetrics m;
  m.all = all.entry();
  if (fg_mask) {
    m.bg = bg.entry();
    m.fg = fg.entry();
  }
  if (nocc_mask) m.nocc = nocc.entry();
  return m;
}

/// Intersection over union; 1 when both masks are empty.
inline double segmentation_iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("segmentation_iou: dimension mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

}  // namespace sof
