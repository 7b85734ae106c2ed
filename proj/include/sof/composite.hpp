#pragma once

// Final flow assembly: the foreground layer flow is pasted onto the frame,
// the background of each localized box keeps the planar motion over Plane
// regions and blends the layer flow with the pass-through flow over Stuff,
// with a weight that is 1 at the foreground and decays linearly to 0 at the
// box boundary (Euclidean distance transform). Every output pixel carries a
// provenance tag.

#include <limits>
#include <vector>

#include "sof/core.hpp"
#include "sof/layered.hpp"
#include "sof/planar.hpp"
#include "sof/regions.hpp"

namespace sof {

enum class SourceTag : uint8_t {
  Stuff = 0,
  Plane = 1,
  ThingFg = 2,
  ThingBgOverPlane = 3,
  ThingBgOverStuff = 4,
};

/// Per-pixel provenance of the composed flow. id is the plane-region or
/// track index where applicable (-1 otherwise); alpha is the layer-flow
/// blend weight, defined only for ThingBgOverStuff pixels.
struct CompositeMap {
  int width = 0, height = 0;
  std::vector<SourceTag> tag;
  std::vector<int32_t> id;
  std::vector<float> alpha;

  CompositeMap() = default;
  CompositeMap(int w, int h)
      : width(w), height(h), tag(static_cast<size_t>(w) * h, SourceTag::Stuff),
        id(static_cast<size_t>(w) * h, -1),
        alpha(static_cast<size_t>(w) * h, 0.f) {}

  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

namespace detail {

/// 1D squared-distance transform (lower envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  d.assign(n, 0.0);
  std::vector<int> v(n, 0);
  std::vector<double> z(n + 1, 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (q - v[k]) * double(q - v[k]) + f[v[k]];
  }
}

}  // namespace detail

/// Exact Euclidean distance (in pixels) from each pixel to the mask set;
/// 0 on the set itself. Infinity when the set is empty. Two 1D passes over
/// squared distances; non-sites start from a large finite sentinel so the
/// parabola envelope stays well defined.
inline std::vector<double> distance_transform(const Mask& set) {
  const int w = set.width, h = set.height;
  constexpr double kBig = 1e18;
  std::vector<double> d2(static_cast<size_t>(w) * h);
  for (size_t i = 0; i < d2.size(); ++i) d2[i] = set.data[i] ? 0.0 : kBig;

  std::vector<double> col(h), out(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) col[y] = d2[static_cast<size_t>(y) * w + x];
    detail::edt_1d(col, out);
    for (int y = 0; y < h; ++y) d2[static_cast<size_t>(y) * w + x] = out[y];
  }
  std::vector<double> row(w), rout(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[x] = d2[static_cast<size_t>(y) * w + x];
    detail::edt_1d(row, rout);
    for (int x = 0; x < w; ++x) d2[static_cast<size_t>(y) * w + x] = rout[x];
  }
  for (double& v : d2)
    v = v < 1e17 ? std::sqrt(v) : std::numeric_limits<double>::infinity();
  return d2;
}

/// Blend weight for the layer flow over Stuff background: alpha = 1 on the
/// foreground, decaying linearly with Euclidean distance to 0 at the box
/// pixel farthest from the foreground. Empty foreground gives all zeros.
inline std::vector<float> fg_distance_weights(const Mask& fg) {
  std::vector<float> alpha(static_cast<size_t>(fg.width) * fg.height, 0.f);
  if (fg.empty_set()) return alpha;
  const auto dist = distance_transform(fg);
  double dmax = 0.0;
  for (double d : dist)
    if (std::isfinite(d)) dmax = std::max(dmax, d);
  for (size_t i = 0; i < alpha.size(); ++i) {
    if (dist[i] == 0.0) {
      alpha[i] = 1.f;
    } else if (dmax > 0.0) {
      alpha[i] = static_cast<float>(
          std::clamp(1.0 - dist[i] / dmax, 0.0, 1.0));
    } else {
      alpha[i] = 1.f;
    }
  }
  return alpha;
}

/// Planar flow for one Plane region of the frame.
struct PlaneRegionFlow {
  Mask region;      // frame-sized
  FlowField flow;   // frame-sized, valid on the region
  int id = 0;
};

struct ComposeResult {
  FlowField flow;
  CompositeMap map;
};

/// Composes the full-frame flow for frame pair `pair_index`:
///  - refined-foreground pixels take the foreground layer flow;
///  - box background over a Plane keeps the planar flow;
///  - box background over Stuff blends layer background flow with the
///    pass-through flow by the fg-distance weight;
///  - pixels outside every box keep the planar flow on Plane regions and
///    the pass-through flow elsewhere.
/// Overlapping boxes resolve to the track with the smaller distance to its
/// refined foreground. Tracks flagged unrefined fall back to the
/// pass-through/planar composition over their whole box.
inline ComposeResult compose(const FlowField& initial,
                             const std::vector<PlaneRegionFlow>& planes,
                             const std::vector<ThingResult>& things,
                             int pair_index, const SegMap& seg,
                             const ClassTaxonomy& tax) {
  const int w = initial.width, h = initial.height;
  if (seg.width != w || seg.height != h)
    throw std::invalid_argument("compose: segmentation dimension mismatch");

  ComposeResult out;
  out.flow = initial;
  out.map = CompositeMap(w, h);

  // plane lookup per pixel
  std::vector<int32_t> plane_of(static_cast<size_t>(w) * h, -1);
  for (size_t pi = 0; pi < planes.size(); ++pi) {
    const auto& pr = planes[pi];
    if (pr.region.width != w || pr.region.height != h)
      throw std::invalid_argument("compose: plane dimension mismatch");
    for (size_t i = 0; i < pr.region.data.size(); ++i)
      if (pr.region.data[i] && pr.flow.valid[i])
        plane_of[i] = static_cast<int32_t>(pi);
  }

  auto base_flow = [&](int x, int y, SourceTag& tag, int32_t& id) {
    const int32_t pid = plane_of[static_cast<size_t>(y) * w + x];
    if (pid >= 0) {
      tag = SourceTag::Plane;
      id = planes[pid].id;
      return std::make_pair(planes[pid].flow.u_at(x, y),
                            planes[pid].flow.v_at(x, y));
    }
    tag = SourceTag::Stuff;
    id = -1;
    return std::make_pair(initial.u_at(x, y), initial.v_at(x, y));
  };

  // per-track fg distance fields and blend weights at this frame
  struct TrackCtx {
    const ThingResult* r;
    int32_t track_id;
    Mask fg;                     // refined fg at frame pair_index, box-local
    std::vector<double> dist;
    std::vector<float> alpha;
  };
  std::vector<TrackCtx> ctx;
  for (size_t ti = 0; ti < things.size(); ++ti) {
    if (!things[ti].refined) continue;  // falls back to base composition
    TrackCtx c;
    c.r = &things[ti];
    c.track_id = static_cast<int32_t>(ti);
    c.fg = things[ti].seg.frame_mask(pair_index);
    c.dist = distance_transform(c.fg);
    c.alpha = fg_distance_weights(c.fg);
    ctx.push_back(std::move(c));
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      // owning track: smallest distance to a refined foreground
      const TrackCtx* owner = nullptr;
      double best = std::numeric_limits<double>::infinity();
      size_t bi = 0;
      for (const auto& c : ctx) {
        const auto& th = *c.r;
        if (x < th.box_x0 || x > th.box_x1 || y < th.box_y0 || y > th.box_y1)
          continue;
        const size_t li = static_cast<size_t>(y - th.box_y0) *
                              (th.box_x1 - th.box_x0 + 1) +
                          (x - th.box_x0);
        const double d = c.dist[li];
        if (d < best) {
          best = d;
          owner = &c;
          bi = li;
        }
      }

      SourceTag tag = SourceTag::Stuff;
      int32_t id = -1;
      if (!owner) {
        const auto [u, v] = base_flow(x, y, tag, id);
        out.flow.u_at(x, y) = u;
        out.flow.v_at(x, y) = v;
        // pass-through keeps the input validity; planar flow is defined
        out.flow.valid_at(x, y) =
            tag == SourceTag::Plane ? 1 : initial.valid_at(x, y);
        out.map.tag[i] = tag;
        out.map.id[i] = id;
        continue;
      }

      const ThingResult& th = *owner->r;
      const int lx = x - th.box_x0, ly = y - th.box_y0;
      const int32_t tid = owner->track_id;
      if (owner->fg.at(lx, ly)) {
        const FlowField& f = th.flow[pair_index][kFgLayer];
        out.flow.u_at(x, y) = f.u_at(lx, ly);
        out.flow.v_at(x, y) = f.v_at(lx, ly);
        out.flow.valid_at(x, y) = 1;
        out.map.tag[i] = SourceTag::ThingFg;
        out.map.id[i] = tid;
        continue;
      }
      if (tax.category(seg.at(x, y)) == Category::Plane &&
          plane_of[i] >= 0) {
        out.flow.u_at(x, y) = planes[plane_of[i]].flow.u_at(x, y);
        out.flow.v_at(x, y) = planes[plane_of[i]].flow.v_at(x, y);
        out.flow.valid_at(x, y) = 1;
        out.map.tag[i] = SourceTag::ThingBgOverPlane;
        out.map.id[i] = tid;
        continue;
      }
      const FlowField& fb = th.flow[pair_index][kBgLayer];
      const float a = owner->alpha[bi];
      out.flow.u_at(x, y) =
          a * fb.u_at(lx, ly) + (1.f - a) * initial.u_at(x, y);
      out.flow.v_at(x, y) =
          a * fb.v_at(lx, ly) + (1.f - a) * initial.v_at(x, y);
      out.flow.valid_at(x, y) = initial.valid_at(x, y);
      out.map.tag[i] = SourceTag::ThingBgOverStuff;
      out.map.id[i] = tid;
      out.map.alpha[i] = a;
    }
  return out;
}

}  // namespace sof
