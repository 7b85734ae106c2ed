#pragma once

// Thing region extraction and tracking: connected components of a Thing
// class inside a label map, the sub-200-pixel Stuff fallback, greedy
// IoU matching across a T-frame window, and the disc morphology used to
// keep boundary pixels out of the motion-model fits.

#include <cmath>
#include <optional>
#include <vector>

#include "sof/core.hpp"

namespace sof {

/// A connected pixel region of one class in one frame, with its tight box.
struct Region {
  int frame = 0;
  uint8_t cls = label::Unknown;
  Mask mask;  // frame-sized bitmap
  int area = 0;
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive tight bounds
};

/// A Thing followed through every frame of the window, plus the localized
/// box (union of the per-frame boxes with a margin) that hosts the layered
/// subproblem, and the semantic foreground masks cropped to that box.
struct ThingTrack {
  uint8_t cls = label::Unknown;
  std::vector<Region> regions;      // one per frame
  int box_x0 = 0, box_y0 = 0, box_x1 = -1, box_y1 = -1;  // inclusive
  std::vector<Mask> fg;             // per-frame semantic mask, box-local

  int box_width() const { return box_x1 - box_x0 + 1; }
  int box_height() const { return box_y1 - box_y0 + 1; }
  bool contains(int x, int y) const {
    return x >= box_x0 && x <= box_x1 && y >= box_y0 && y <= box_y1;
  }
};

/// 4-connected components of the pixels labeled `cls`.
inline std::vector<Region> connected_components(const SegMap& seg, uint8_t cls,
                                                int frame_index = 0) {
  const int w = seg.width, h = seg.height;
  std::vector<Region> out;
  std::vector<int32_t> comp(static_cast<size_t>(w) * h, -1);
  std::vector<int32_t> stack;
  for (int sy = 0; sy < h; ++sy) {
    for (int sx = 0; sx < w; ++sx) {
      const size_t si = static_cast<size_t>(sy) * w + sx;
      if (seg.labels[si] != cls || comp[si] >= 0) continue;
      Region r;
      r.frame = frame_index;
      r.cls = cls;
      r.mask = Mask(w, h, 0);
      r.x0 = r.x1 = sx;
      r.y0 = r.y1 = sy;
      const int32_t id = static_cast<int32_t>(out.size());
      stack.clear();
      stack.push_back(static_cast<int32_t>(si));
      comp[si] = id;
      while (!stack.empty()) {
        const int32_t i = stack.back();
        stack.pop_back();
        const int x = i % w, y = i / w;
        r.mask.data[i] = 1;
        ++r.area;
        r.x0 = std::min(r.x0, x);
        r.x1 = std::max(r.x1, x);
        r.y0 = std::min(r.y0, y);
        r.y1 = std::max(r.y1, y);
        const int nx[4] = {x - 1, x + 1, x, x};
        const int ny[4] = {y, y, y - 1, y + 1};
        for (int n = 0; n < 4; ++n) {
          if (nx[n] < 0 || nx[n] >= w || ny[n] < 0 || ny[n] >= h) continue;
          const size_t ni = static_cast<size_t>(ny[n]) * w + nx[n];
          if (seg.labels[ni] == cls && comp[ni] < 0) {
            comp[ni] = id;
            stack.push_back(static_cast<int32_t>(ni));
          }
        }
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

constexpr int kMinThingArea = 200;

/// Regions smaller than 200 pixels are dropped; their pixels fall back to
/// Stuff handling downstream.
inline std::vector<Region> filter_small(std::vector<Region> regions,
                                        int min_area = kMinThingArea) {
  std::vector<Region> out;
  out.reserve(regions.size());
  for (auto& r : regions)
    if (r.area >= min_area) out.push_back(std::move(r));
  return out;
}

inline double mask_iou(const Mask& a, const Mask& b) {
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Greedy association of same-class regions across the window by mask IoU
/// with the previous frame, threshold 0.1. Candidate ties break toward the
/// larger area, then the smaller list index. A Thing that cannot be followed
/// through every frame yields no track (its pixels are treated as Stuff).
/// The union box is padded by 10% of its diagonal and clamped to the frame.
inline std::vector<ThingTrack> match_things(
    const std::vector<std::vector<Region>>& per_frame, int frame_width,
    int frame_height, double iou_threshold = 0.1, double margin_frac = 0.1) {
  const int T = static_cast<int>(per_frame.size());
  std::vector<ThingTrack> tracks;
  if (T == 0) return tracks;

  std::vector<std::vector<uint8_t>> claimed(T);
  for (int t = 0; t < T; ++t) claimed[t].assign(per_frame[t].size(), 0);

  // seed order: larger first-frame regions claim their matches first
  std::vector<size_t> seeds(per_frame[0].size());
  for (size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
  std::sort(seeds.begin(), seeds.end(), [&](size_t a, size_t b) {
    if (per_frame[0][a].area != per_frame[0][b].area)
      return per_frame[0][a].area > per_frame[0][b].area;
    return a < b;
  });

  for (size_t seed : seeds) {
    if (claimed[0][seed]) continue;
    std::vector<int> chain{static_cast<int>(seed)};
    bool complete = true;
    for (int t = 1; t < T; ++t) {
      const Region& prev = per_frame[t - 1][chain.back()];
      int best = -1;
      double best_iou = 0.0;
      for (size_t j = 0; j < per_frame[t].size(); ++j) {
        if (claimed[t][j] || per_frame[t][j].cls != prev.cls) continue;
        const double iou = mask_iou(prev.mask, per_frame[t][j].mask);
        if (iou < iou_threshold) continue;
        const bool better =
            iou > best_iou ||
            (iou == best_iou && best >= 0 &&
             (per_frame[t][j].area > per_frame[t][size_t(best)].area));
        if (best < 0 || better) {
          best = static_cast<int>(j);
          best_iou = iou;
        }
      }
      if (best < 0) {
        complete = false;
        break;
      }
      chain.push_back(best);
    }
    if (!complete) continue;

    ThingTrack tr;
    tr.cls = per_frame[0][seed].cls;
    for (int t = 0; t < T; ++t) {
      claimed[t][chain[t]] = 1;
      tr.regions.push_back(per_frame[t][chain[t]]);
    }
    tr.box_x0 = tr.regions[0].x0;
    tr.box_y0 = tr.regions[0].y0;
    tr.box_x1 = tr.regions[0].x1;
    tr.box_y1 = tr.regions[0].y1;
    for (const Region& r : tr.regions) {
      tr.box_x0 = std::min(tr.box_x0, r.x0);
      tr.box_y0 = std::min(tr.box_y0, r.y0);
      tr.box_x1 = std::max(tr.box_x1, r.x1);
      tr.box_y1 = std::max(tr.box_y1, r.y1);
    }
    const double diag = std::hypot(double(tr.box_x1 - tr.box_x0 + 1),
                                   double(tr.box_y1 - tr.box_y0 + 1));
    const int margin = static_cast<int>(std::ceil(margin_frac * diag));
    tr.box_x0 = std::max(0, tr.box_x0 - margin);
    tr.box_y0 = std::max(0, tr.box_y0 - margin);
    tr.box_x1 = std::min(frame_width - 1, tr.box_x1 + margin);
    tr.box_y1 = std::min(frame_height - 1, tr.box_y1 + margin);

    const int bw = tr.box_width(), bh = tr.box_height();
    for (const Region& r : tr.regions) {
      Mask m(bw, bh, 0);
      for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x)
          m.at(x, y) = r.mask.at(tr.box_x0 + x, tr.box_y0 + y);
      tr.fg.push_back(std::move(m));
    }
    tracks.push_back(std::move(tr));
  }
  return tracks;
}

namespace detail {

inline std::vector<std::pair<int, int>> disc_offsets(double radius) {
  std::vector<std::pair<int, int>> offs;
  const int r = static_cast<int>(std::floor(radius));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dx, dy);
  return offs;
}

}  // namespace detail

/// Morphological erosion by a disc. Pixels beyond the frame count as
/// background, so the mask shrinks at the frame border too.
inline Mask erode_mask(const Mask& mask, double radius) {
  if (radius <= 0.0) return mask;
  const auto offs = detail::disc_offsets(radius);
  Mask out(mask.width, mask.height, 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      bool keep = true;
      for (const auto& [dx, dy] : offs) {
        const int nx = x + dx, ny = y + dy;
        if (nx < 0 || nx >= mask.width || ny < 0 || ny >= mask.height ||
            !mask.at(nx, ny)) {
          keep = false;
          break;
        }
      }
      out.at(x, y) = keep;
    }
  return out;
}

/// Morphological dilation by a disc (the background-side counterpart).
inline Mask dilate_mask(const Mask& mask, double radius) {
  if (radius <= 0.0) return mask;
  const auto offs = detail::disc_offsets(radius);
  Mask out(mask.width, mask.height, 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      for (const auto& [dx, dy] : offs) {
        const int nx = x + dx, ny = y + dy;
        if (nx >= 0 && nx < mask.width && ny >= 0 && ny < mask.height)
          out.at(nx, ny) = 1;
      }
    }
  return out;
}

}  // namespace sof
