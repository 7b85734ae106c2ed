#pragma once

// The localized two-layer model. A LayeredProblem holds the T image crops,
// the initial flow, the semantic foreground masks and the optimization
// state (per-layer flows, affine models, layer assignment) for one tracked
// Thing box. The energy is the sum over both layers of data, motion and
// time terms per frame pair plus layer-coupling and space terms per frame.
//
// Layer indexing: array index 0 is the foreground layer (Things are always
// in front), index 1 the background. The depth order never changes.
//
// The alternating optimizer guarantees that neither update_flow nor
// update_segmentation ever increases the total energy: flow steps pass a
// backtracked acceptance test against the exact energy, and segmentation
// moves are single-pixel flips (plus a few whole-mask candidates) applied
// only when their exactly-computed energy delta is negative.

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "sof/core.hpp"
#include "sof/regions.hpp"

namespace sof {

constexpr int kFgLayer = 0;
constexpr int kBgLayer = 1;

/// Six-parameter affine motion in box-local pixel coordinates:
/// u(x,y) = a[0] + a[1]*x + a[2]*y, v(x,y) = a[3] + a[4]*x + a[5]*y.
struct AffineParams {
  std::array<double, 6> a{0, 0, 0, 0, 0, 0};

  static AffineParams translation(double tu, double tv) {
    AffineParams p;
    p.a[0] = tu;
    p.a[3] = tv;
    return p;
  }
  double u_at(double x, double y) const { return a[0] + a[1] * x + a[2] * y; }
  double v_at(double x, double y) const { return a[3] + a[4] * x + a[5] * y; }
};

/// Per-frame binary foreground assignment over the localized box.
struct LayerAssignment {
  int width = 0, height = 0, frames = 0;
  std::vector<uint8_t> fg;

  LayerAssignment() = default;
  LayerAssignment(int w, int h, int T)
      : width(w), height(h), frames(T),
        fg(static_cast<size_t>(w) * h * T, 0) {}

  size_t idx(int t, int x, int y) const {
    return (static_cast<size_t>(t) * height + y) * width + x;
  }
  uint8_t& at(int t, int x, int y) { return fg[idx(t, x, y)]; }
  uint8_t at(int t, int x, int y) const { return fg[idx(t, x, y)]; }

  Mask frame_mask(int t) const {
    Mask m(width, height);
    std::copy(fg.begin() + idx(t, 0, 0), fg.begin() + idx(t, 0, 0) + width * height,
              m.data.begin());
    return m;
  }
  void set_frame(int t, const Mask& m) {
    std::copy(m.data.begin(), m.data.end(), fg.begin() + idx(t, 0, 0));
  }
};

/// Bilateral pair weights of the space term:
///   w(p,q) = mix_position * exp(-d^2 / 2*sigma_s^2)
///          + mix_bilateral * exp(-d^2 / 2*sigma_s^2 - |c_p - c_q|^2 / 2*sigma_c^2).
/// Boxes up to exact_pixel_limit pixels are evaluated with the exact
/// all-pairs loop. Larger boxes truncate the interaction to a window of
/// truncation_sigmas * sigma_s pixels; the neglected pairs carry a spatial
/// factor below exp(-truncation_sigmas^2 / 2) (about 2.2e-3 of the peak at
/// the default 3.5 sigma), which bounds the relative error well under the
/// 2% documented for this approximation.
struct SpaceWeights {
  double sigma_s = 15.0;
  double sigma_c = 0.08;
  // At sigma_s comparable to the box size the pure position kernel turns
  // into a global majority vote; most of the contiguity weight therefore
  // sits on the color-gated bilateral kernel.
  double mix_position = 0.25;
  double mix_bilateral = 1.0;
  int exact_pixel_limit = 4096;
  double truncation_sigmas = 3.5;

  int window_radius() const {
    return static_cast<int>(std::ceil(truncation_sigmas * sigma_s));
  }
};

/// One localized layered subproblem, cropped to a track's union box.
struct LayeredProblem {
  int width = 0, height = 0, frames = 0;
  std::vector<ImageBuf> color;    // T crops, as loaded (space term)
  std::vector<ImageBuf> gray;     // luminance crops (data term)
  std::vector<FlowField> init_flow;  // T-1 crops of the initial flow
  std::vector<Mask> semantic_fg;  // per-frame semantic mask g_hat
  LayerAssignment seg;            // current assignment g
  std::vector<std::array<FlowField, 2>> flow;     // per pair, fg/bg
  std::vector<std::array<AffineParams, 2>> affine;
  EnergyWeights weights = EnergyWeights::defaults();
  SpaceWeights space;
  RobustPenalty rho_data = RobustPenalty::charbonnier();
  RobustPenalty rho_smooth = RobustPenalty::charbonnier();
  RobustPenalty rho_affine = RobustPenalty::quadratic();
  uint8_t fg_class = label::Car;  // picks the lambda_aff override for layer 0

  size_t pixels() const { return static_cast<size_t>(width) * height; }
  double lambda_aff_layer(int k) const {
    return k == kFgLayer ? weights.lambda_aff_for(fg_class) : weights.lambda_aff;
  }
};

// ---------------------------------------------------------------------------
// Assignment sampling and per-pixel terms
// ---------------------------------------------------------------------------

/// Bilinear interpolation of the binary assignment, thresholded at 0.5
/// (ties count as foreground). Caller guarantees the point is in-domain.
inline bool sample_fg(const LayerAssignment& seg, int t, double x, double y) {
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  x0 = std::clamp(x0, 0, seg.width - 1);
  y0 = std::clamp(y0, 0, seg.height - 1);
  const int x1 = std::min(x0 + 1, seg.width - 1);
  const int y1 = std::min(y0 + 1, seg.height - 1);
  const double fx = x - x0, fy = y - y0;
  const double val = (1 - fy) * ((1 - fx) * seg.at(t, x0, y0) +
                                 fx * seg.at(t, x1, y0)) +
                     fy * ((1 - fx) * seg.at(t, x0, y1) +
                           fx * seg.at(t, x1, y1));
  return val >= 0.5;
}

/// Data contribution of source pixel (x,y) for frame pair t, layer k:
/// appearance constancy under the layer flow when p and its correspondence
/// share the foreground assignment, the constant occlusion penalty lambda_d
/// otherwise (including correspondences leaving the box).
inline double data_pixel_term(const LayeredProblem& P, int t, int k, int x,
                              int y) {
  const FlowField& f = P.flow[t][k];
  const double qx = x + f.u_at(x, y);
  const double qy = y + f.v_at(x, y);
  if (!in_bilinear_domain(P.width, P.height, qx, qy)) return P.weights.lambda_d;
  const bool gp = P.seg.at(t, x, y) != 0;
  const bool gq = sample_fg(P.seg, t + 1, qx, qy);
  if (gp != gq) return P.weights.lambda_d;
  const double diff =
      P.gray[t].at(x, y) - bilinear_sample(P.gray[t + 1], qx, qy);
  return P.rho_data(diff);
}

/// Time contribution of source pixel (x,y) for pair t, layer k: indicator
/// of the assignment disagreeing with its correspondence in the next frame;
/// correspondences leaving the box count as disagreement.
inline double time_pixel_term(const LayeredProblem& P, int t, int k, int x,
                              int y) {
  const FlowField& f = P.flow[t][k];
  const double qx = x + f.u_at(x, y);
  const double qy = y + f.v_at(x, y);
  if (!in_bilinear_domain(P.width, P.height, qx, qy)) return 1.0;
  const bool gp = P.seg.at(t, x, y) != 0;
  const bool gq = sample_fg(P.seg, t + 1, qx, qy);
  return gp != gq ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Energy terms
// ---------------------------------------------------------------------------

inline double data_energy(const LayeredProblem& P, int t, int k) {
  double e = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) e += data_pixel_term(P, t, k, x, y);
  return e;
}

inline double time_energy(const LayeredProblem& P, int t, int k) {
  double e = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) e += time_pixel_term(P, t, k, x, y);
  return e;
}

/// Pairwise smoothness over the 4-neighborhood gated by equal assignment,
/// plus the affine coupling lambda_aff * rho_aff per component. The caller
/// applies lambda_motion.
inline double motion_energy(const LayeredProblem& P, int t, int k) {
  const FlowField& f = P.flow[t][k];
  double smooth = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int n = 0; n < 4; ++n) {
        if (nx[n] < 0 || nx[n] >= P.width || ny[n] < 0 || ny[n] >= P.height)
          continue;
        if (P.seg.at(t, x, y) != P.seg.at(t, nx[n], ny[n])) continue;
        smooth += P.rho_smooth(f.u_at(x, y) - f.u_at(nx[n], ny[n])) +
                  P.rho_smooth(f.v_at(x, y) - f.v_at(nx[n], ny[n]));
      }
    }
  const AffineParams& th = P.affine[t][k];
  double aff = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      aff += P.rho_affine(f.u_at(x, y) - th.u_at(x, y)) +
             P.rho_affine(f.v_at(x, y) - th.v_at(x, y));
    }
  return smooth + P.lambda_aff_layer(k) * aff;
}

/// Coupling between the layer assignment and the semantic mask: mismatch count.
inline double layer_energy(const Mask& g, const Mask& g_hat) {
  if (g.width != g_hat.width || g.height != g_hat.height)
    throw std::invalid_argument("layer_energy: dimension mismatch");
  double e = 0;
  for (size_t i = 0; i < g.data.size(); ++i)
    e += (g.data[i] != 0) != (g_hat.data[i] != 0);
  return e;
}

namespace detail {

/// Pair-weight evaluator with a cached spatial-factor table.
struct SpaceKernel {
  const ImageBuf* img;
  const SpaceWeights* w;
  int width, height;
  std::vector<double> pos;  // exp(-d^2/2ss^2) indexed [dy][dx + width - 1]

  SpaceKernel(const ImageBuf& image, const SpaceWeights& sw)
      : img(&image), w(&sw), width(image.width), height(image.height),
        pos(static_cast<size_t>(2 * width - 1) * height) {
    const double ss2 = 2.0 * sw.sigma_s * sw.sigma_s;
    for (int dy = 0; dy < height; ++dy)
      for (int dx = -(width - 1); dx <= width - 1; ++dx)
        pos[static_cast<size_t>(dy) * (2 * width - 1) + dx + width - 1] =
            std::exp(-(double(dx) * dx + double(dy) * dy) / ss2);
  }

  double operator()(int px, int py, int qx, int qy) const {
    const int dy = std::abs(qy - py);
    const int dx = (qy >= py) ? (qx - px) : (px - qx);
    const double p =
        pos[static_cast<size_t>(dy) * (2 * width - 1) + dx + width - 1];
    double dc2 = 0;
    for (int c = 0; c < img->channels; ++c) {
      const double d = double(img->at(px, py, c)) - double(img->at(qx, qy, c));
      dc2 += d * d;
    }
    const double cc2 = 2.0 * w->sigma_c * w->sigma_c;
    return w->mix_position * p + w->mix_bilateral * p * std::exp(-dc2 / cc2);
  }

  bool exact() const {
    return width * height <= w->exact_pixel_limit;
  }
  int radius() const { return w->window_radius(); }

  /// Visits every unordered interacting pair once.
  template <typename Fn>
  void for_each_pair(Fn&& fn) const {
    const int R = exact() ? std::max(width, height) : radius();
    for (int py = 0; py < height; ++py)
      for (int px = 0; px < width; ++px)
        for (int dy = 0; dy <= std::min(R, height - 1 - py); ++dy) {
          const int qy = py + dy;
          const int x0 = dy == 0 ? px + 1 : std::max(0, px - R);
          const int x1 = std::min(width - 1, px + R);
          for (int qx = x0; qx <= x1; ++qx)
            fn(px, py, qx, qy, (*this)(px, py, qx, qy));
        }
  }

  /// Visits every pixel interacting with (px,py), excluding itself.
  template <typename Fn>
  void for_each_partner(int px, int py, Fn&& fn) const {
    const int R = exact() ? std::max(width, height) : radius();
    const int y0 = std::max(0, py - R), y1 = std::min(height - 1, py + R);
    const int x0 = std::max(0, px - R), x1 = std::min(width - 1, px + R);
    for (int qy = y0; qy <= y1; ++qy)
      for (int qx = x0; qx <= x1; ++qx) {
        if (qx == px && qy == py) continue;
        fn(qx, qy, (*this)(px, py, qx, qy));
      }
  }
};

}  // namespace detail

/// Fully connected contiguity term over the box: sum over ordered pixel
/// pairs of w(p,q) * [g_p != g_q]. Exact on small boxes, window-truncated
/// on large ones (see SpaceWeights).
inline double space_energy(const Mask& g, const ImageBuf& img,
                           const SpaceWeights& sw) {
  if (g.width != img.width || g.height != img.height)
    throw std::invalid_argument("space_energy: dimension mismatch");
  const detail::SpaceKernel kernel(img, sw);
  const int W = g.width, H = g.height;
  const int R = kernel.exact() ? std::max(W, H) : kernel.radius();
  double e = 0;
  // kernel evaluated only on disagreeing pairs
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const bool gp = g.at(px, py) != 0;
      for (int dy = 0; dy <= std::min(R, H - 1 - py); ++dy) {
        const int qy = py + dy;
        const int x0 = dy == 0 ? px + 1 : std::max(0, px - R);
        const int x1 = std::min(W - 1, px + R);
        for (int qx = x0; qx <= x1; ++qx)
          if ((g.at(qx, qy) != 0) != gp) e += kernel(px, py, qx, qy);
      }
    }
  return 2.0 * e;  // ordered pairs
}

/// Eq-1 bracketing: per layer, data + weighted motion and time terms over
/// the frame pairs, plus the weighted layer and space terms over the frames.
/// The g-only terms are summed once per layer unless count_shared_once.
inline double total_energy(const LayeredProblem& P) {
  double e = 0;
  for (int k = 0; k < 2; ++k)
    for (int t = 0; t < P.frames - 1; ++t)
      e += data_energy(P, t, k) +
           P.weights.lambda_motion * motion_energy(P, t, k) +
           P.weights.lambda_time * time_energy(P, t, k);
  const int mult = P.weights.count_shared_once ? 1 : 2;
  for (int t = 0; t < P.frames; ++t) {
    const Mask g = P.seg.frame_mask(t);
    e += mult * (P.weights.lambda_layer * layer_energy(g, P.semantic_fg[t]) +
                 P.weights.lambda_space * space_energy(g, P.color[t], P.space));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Affine fitting
// ---------------------------------------------------------------------------

/// Least-squares fit of the 6-parameter affine flow model to the valid flow
/// samples under the mask. Rank-deficient designs (collinear or < 3 samples)
/// fall back to pure translation by the mean flow. Empty sample sets give
/// nothing.
inline std::optional<AffineParams> fit_affine(const FlowField& flow,
                                              const Mask& mask) {
  if (flow.width != mask.width || flow.height != mask.height)
    throw std::invalid_argument("fit_affine: dimension mismatch");
  std::vector<Eigen::Vector3d> rows;
  std::vector<double> us, vs;
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x)
      if (mask.at(x, y) && flow.valid_at(x, y)) {
        rows.emplace_back(1.0, double(x), double(y));
        us.push_back(flow.u_at(x, y));
        vs.push_back(flow.v_at(x, y));
      }
  const size_t n = rows.size();
  if (n == 0) return std::nullopt;

  double mu = 0, mv = 0;
  for (size_t i = 0; i < n; ++i) {
    mu += us[i];
    mv += vs[i];
  }
  mu /= n;
  mv /= n;
  if (n < 3) return AffineParams::translation(mu, mv);

  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd bu(n), bv(n);
  for (size_t i = 0; i < n; ++i) {
    A.row(i) = rows[i];
    bu(i) = us[i];
    bv(i) = vs[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-9);
  if (qr.rank() < 3) return AffineParams::translation(mu, mv);
  const Eigen::Vector3d cu = qr.solve(bu);
  const Eigen::Vector3d cv = qr.solve(bv);
  AffineParams p;
  p.a = {cu(0), cu(1), cu(2), cv(0), cv(1), cv(2)};
  return p;
}

// ---------------------------------------------------------------------------
// Flow update (coarse-to-fine IRLS with monotone acceptance)
// ---------------------------------------------------------------------------

struct LayeredOptions {
  double erode_radius = 5.0;    // boundary exclusion for model initialization
  double dilate_radius = 5.0;
  int max_outer = 20;
  double rel_tol = 1e-4;
  int icm_max_sweeps = 10;
  int pyramid_levels = 3;
  int irls_iterations = 3;
  int gauss_seidel_sweeps = 30;
  int max_backtracks = 8;
};

namespace detail {

inline ImageBuf downsample2(const ImageBuf& in) {
  const int w = std::max(1, (in.width + 1) / 2);
  const int h = std::max(1, (in.height + 1) / 2);
  ImageBuf out(w, h, in.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < in.channels; ++c) {
        double s = 0;
        int cnt = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int sx = 2 * x + dx, sy = 2 * y + dy;
            if (sx < in.width && sy < in.height) {
              s += in.at(sx, sy, c);
              ++cnt;
            }
          }
        out.at(x, y, c) = static_cast<float>(s / cnt);
      }
  return out;
}

inline std::vector<uint8_t> downsample_binary(const std::vector<uint8_t>& in,
                                              int w, int h, int& ow, int& oh) {
  ow = std::max(1, (w + 1) / 2);
  oh = std::max(1, (h + 1) / 2);
  std::vector<uint8_t> out(static_cast<size_t>(ow) * oh, 0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      int cnt = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sx = 2 * x + dx, sy = 2 * y + dy;
          if (sx < w && sy < h) {
            s += in[static_cast<size_t>(sy) * w + sx];
            ++cnt;
          }
        }
      out[static_cast<size_t>(y) * ow + x] = (s / cnt) >= 0.5;
    }
  return out;
}

inline FlowField downsample_flow(const FlowField& in) {
  const int w = std::max(1, (in.width + 1) / 2);
  const int h = std::max(1, (in.height + 1) / 2);
  FlowField out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double su = 0, sv = 0;
      int cnt = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sx = 2 * x + dx, sy = 2 * y + dy;
          if (sx < in.width && sy < in.height) {
            su += in.u_at(sx, sy);
            sv += in.v_at(sx, sy);
            ++cnt;
          }
        }
      out.u_at(x, y) = static_cast<float>(0.5 * su / cnt);
      out.v_at(x, y) = static_cast<float>(0.5 * sv / cnt);
    }
  return out;
}

inline FlowField upsample_flow(const FlowField& in, int w, int h) {
  FlowField out(w, h);
  const double sx = w > 1 ? double(std::max(in.width - 1, 1)) / (w - 1) : 0.0;
  const double sy = h > 1 ? double(std::max(in.height - 1, 1)) / (h - 1) : 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double cx = std::min(double(in.width - 1), x * sx);
      const double cy = std::min(double(in.height - 1), y * sy);
      int x0 = static_cast<int>(std::floor(cx));
      int y0 = static_cast<int>(std::floor(cy));
      const int x1 = std::min(x0 + 1, in.width - 1);
      const int y1 = std::min(y0 + 1, in.height - 1);
      const double fx = cx - x0, fy = cy - y0;
      out.u_at(x, y) = static_cast<float>(
          2.0 * ((1 - fy) * ((1 - fx) * in.u_at(x0, y0) + fx * in.u_at(x1, y0)) +
                 fy * ((1 - fx) * in.u_at(x0, y1) + fx * in.u_at(x1, y1))));
      out.v_at(x, y) = static_cast<float>(
          2.0 * ((1 - fy) * ((1 - fx) * in.v_at(x0, y0) + fx * in.v_at(x1, y0)) +
                 fy * ((1 - fx) * in.v_at(x0, y1) + fx * in.v_at(x1, y1))));
    }
  return out;
}

inline ImageBuf gradient_x(const ImageBuf& img) {
  ImageBuf g(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int xm = std::max(0, x - 1), xp = std::min(img.width - 1, x + 1);
      g.at(x, y) = (img.at(xp, y) - img.at(xm, y)) / float(xp - xm == 0 ? 1 : xp - xm);
    }
  return g;
}

inline ImageBuf gradient_y(const ImageBuf& img) {
  ImageBuf g(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int ym = std::max(0, y - 1), yp = std::min(img.height - 1, y + 1);
      g.at(x, y) = (img.at(x, yp) - img.at(x, ym)) / float(yp - ym == 0 ? 1 : yp - ym);
    }
  return g;
}

inline bool sample_fg_bytes(const std::vector<uint8_t>& g, int w, int h,
                            double x, double y) {
  int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, w - 1);
  int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  const double val =
      (1 - fy) * ((1 - fx) * g[size_t(y0) * w + x0] + fx * g[size_t(y0) * w + x1]) +
      fy * ((1 - fx) * g[size_t(y1) * w + x0] + fx * g[size_t(y1) * w + x1]);
  return val >= 0.5;
}

/// One coarse-to-fine IRLS pass for layer k of pair t. Produces a candidate
/// flow; the caller decides acceptance against the exact energy.
inline FlowField irls_candidate(const LayeredProblem& P, int t, int k,
                                const LayeredOptions& opts) {
  struct Level {
    ImageBuf i1, i2, gx2, gy2;
    std::vector<uint8_t> g1, g2;
    int w, h;
  };
  std::vector<Level> levels;
  {
    Level l0;
    l0.i1 = P.gray[t];
    l0.i2 = P.gray[t + 1];
    l0.w = P.width;
    l0.h = P.height;
    l0.g1.assign(P.seg.fg.begin() + P.seg.idx(t, 0, 0),
                 P.seg.fg.begin() + P.seg.idx(t, 0, 0) + P.pixels());
    l0.g2.assign(P.seg.fg.begin() + P.seg.idx(t + 1, 0, 0),
                 P.seg.fg.begin() + P.seg.idx(t + 1, 0, 0) + P.pixels());
    levels.push_back(std::move(l0));
  }
  for (int l = 1; l < opts.pyramid_levels; ++l) {
    const Level& prev = levels.back();
    if (prev.w < 8 || prev.h < 8) break;
    Level nl;
    nl.i1 = downsample2(prev.i1);
    nl.i2 = downsample2(prev.i2);
    nl.g1 = downsample_binary(prev.g1, prev.w, prev.h, nl.w, nl.h);
    int dw, dh;
    nl.g2 = downsample_binary(prev.g2, prev.w, prev.h, dw, dh);
    levels.push_back(std::move(nl));
  }
  for (auto& l : levels) {
    l.gx2 = gradient_x(l.i2);
    l.gy2 = gradient_y(l.i2);
  }

  // current flow at the coarsest level
  FlowField f = P.flow[t][k];
  for (size_t l = 1; l < levels.size(); ++l) f = downsample_flow(f);

  const double lm = P.weights.lambda_motion;
  const double la = lm * P.lambda_aff_layer(k);

  for (int li = static_cast<int>(levels.size()) - 1; li >= 0; --li) {
    const Level& L = levels[li];
    const bool finest = li == 0;
    const int w = L.w, h = L.h;
    std::vector<double> du(size_t(w) * h, 0.0), dv(size_t(w) * h, 0.0);

    for (int iter = 0; iter < opts.irls_iterations; ++iter) {
      // linearization point and robust weights
      std::vector<double> wd(size_t(w) * h, 0.0), r0(size_t(w) * h, 0.0);
      std::vector<double> ix(size_t(w) * h, 0.0), iy(size_t(w) * h, 0.0);
      std::vector<double> wau(size_t(w) * h, 0.0), wav(size_t(w) * h, 0.0);
      std::vector<double> ru(size_t(w) * h, 0.0), rv(size_t(w) * h, 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const size_t i = size_t(y) * w + x;
          const double qx = x + f.u_at(x, y), qy = y + f.v_at(x, y);
          if (in_bilinear_domain(w, h, qx, qy)) {
            const bool gp = L.g1[i] != 0;
            const bool gq = sample_fg_bytes(L.g2, w, h, qx, qy);
            if (gp == gq) {
              const double res = L.i1.at(x, y) - bilinear_at(L.i2, qx, qy);
              wd[i] = P.rho_data.weight(res);
              r0[i] = res;
              ix[i] = bilinear_at(L.gx2, qx, qy);
              iy[i] = bilinear_at(L.gy2, qx, qy);
            }
          }
          if (finest) {
            const AffineParams& th = P.affine[t][k];
            const double eu = f.u_at(x, y) - th.u_at(x, y);
            const double ev = f.v_at(x, y) - th.v_at(x, y);
            wau[i] = P.rho_affine.weight(eu);
            wav[i] = P.rho_affine.weight(ev);
            ru[i] = th.u_at(x, y) - f.u_at(x, y);
            rv[i] = th.v_at(x, y) - f.v_at(x, y);
          }
        }

      auto edge_weight_u = [&](int x, int y, int qx2, int qy2) {
        if (L.g1[size_t(y) * w + x] != L.g1[size_t(qy2) * w + qx2]) return 0.0;
        return P.rho_smooth.weight(f.u_at(x, y) - f.u_at(qx2, qy2));
      };
      auto edge_weight_v = [&](int x, int y, int qx2, int qy2) {
        if (L.g1[size_t(y) * w + x] != L.g1[size_t(qy2) * w + qx2]) return 0.0;
        return P.rho_smooth.weight(f.v_at(x, y) - f.v_at(qx2, qy2));
      };

      for (int sweep = 0; sweep < opts.gauss_seidel_sweeps; ++sweep) {
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const size_t i = size_t(y) * w + x;
            double su = 0, sv = 0, cu = 0, cv = 0;  // neighbor sums
            const int nx[4] = {x - 1, x + 1, x, x};
            const int ny[4] = {y, y, y - 1, y + 1};
            for (int n = 0; n < 4; ++n) {
              if (nx[n] < 0 || nx[n] >= w || ny[n] < 0 || ny[n] >= h) continue;
              const size_t j = size_t(ny[n]) * w + nx[n];
              const double wu = edge_weight_u(x, y, nx[n], ny[n]);
              const double wv = edge_weight_v(x, y, nx[n], ny[n]);
              cu += wu;
              cv += wv;
              su += wu * (f.u_at(nx[n], ny[n]) + du[j] - f.u_at(x, y));
              sv += wv * (f.v_at(nx[n], ny[n]) + dv[j] - f.v_at(x, y));
            }
            // 2x2 system per pixel (factor 2 on smoothness: both edge directions)
            const double auu = wd[i] * ix[i] * ix[i] + 2.0 * lm * cu + la * wau[i];
            const double avv = wd[i] * iy[i] * iy[i] + 2.0 * lm * cv + la * wav[i];
            const double auv = wd[i] * ix[i] * iy[i];
            const double bu = wd[i] * ix[i] * r0[i] + 2.0 * lm * su + la * wau[i] * ru[i];
            const double bv = wd[i] * iy[i] * r0[i] + 2.0 * lm * sv + la * wav[i] * rv[i];
            const double det = auu * avv - auv * auv;
            if (std::fabs(det) > 1e-12) {
              du[i] = (bu * avv - bv * auv) / det;
              dv[i] = (bv * auu - bu * auv) / det;
            } else if (auu > 1e-12 || avv > 1e-12) {
              if (auu > 1e-12) du[i] = bu / auu;
              if (avv > 1e-12) dv[i] = bv / avv;
            }
            // clamp the local update to keep the linearization sane
            du[i] = std::clamp(du[i], -2.0, 2.0);
            dv[i] = std::clamp(dv[i], -2.0, 2.0);
          }
      }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const size_t i = size_t(y) * w + x;
          f.u_at(x, y) = static_cast<float>(f.u_at(x, y) + du[i]);
          f.v_at(x, y) = static_cast<float>(f.v_at(x, y) + dv[i]);
          du[i] = dv[i] = 0;
        }
    }
    if (li > 0) f = upsample_flow(f, levels[li - 1].w, levels[li - 1].h);
  }
  return f;
}

inline double flow_terms_energy(const LayeredProblem& P, int t, int k) {
  return data_energy(P, t, k) + P.weights.lambda_motion * motion_energy(P, t, k) +
         P.weights.lambda_time * time_energy(P, t, k);
}

}  // namespace detail

/// One optimization sweep over the continuous variables: per layer and frame
/// pair, a coarse-to-fine IRLS candidate is backtracked (step halving, at
/// most max_backtracks) against the exact energy and applied only when the
/// energy does not increase; then the affine model is refit to the updated
/// flow, again kept only if it does not increase the energy. Returns true
/// if anything changed. Never increases total_energy.
inline bool update_flow(LayeredProblem& P, const LayeredOptions& opts = {}) {
  bool changed = false;
  for (int t = 0; t < P.frames - 1; ++t)
    for (int k = 0; k < 2; ++k) {
      const double e0 = detail::flow_terms_energy(P, t, k);
      const FlowField current = P.flow[t][k];
      const FlowField cand = detail::irls_candidate(P, t, k, opts);
      double step = 1.0;
      for (int bt = 0; bt <= opts.max_backtracks; ++bt, step *= 0.5) {
        FlowField trial = current;
        for (size_t i = 0; i < trial.u.size(); ++i) {
          trial.u[i] = static_cast<float>(current.u[i] +
                                          step * (cand.u[i] - current.u[i]));
          trial.v[i] = static_cast<float>(current.v[i] +
                                          step * (cand.v[i] - current.v[i]));
        }
        P.flow[t][k] = trial;
        const double e1 = detail::flow_terms_energy(P, t, k);
        if (e1 <= e0) {  // strict: a zero-step trial reproduces e0 exactly
          if (e1 < e0) changed = true;
          break;
        }
        P.flow[t][k] = current;  // rejected; try a smaller step
      }

      // refit the global motion model to the updated layer flow
      Mask all(P.width, P.height, 1);
      if (const auto th = fit_affine(P.flow[t][k], all)) {
        const AffineParams old = P.affine[t][k];
        const double before = motion_energy(P, t, k);
        P.affine[t][k] = *th;
        const double after = motion_energy(P, t, k);
        if (after <= before) {
          if (after < before) changed = true;
        } else {
          P.affine[t][k] = old;
        }
      }
    }
  return changed;
}

// ---------------------------------------------------------------------------
// Segmentation update (exact-delta ICM plus whole-mask candidate moves)
// ---------------------------------------------------------------------------

namespace detail {

struct SpaceAccum {
  std::vector<double> W;  // sum of pair weights per pixel
  std::vector<double> A;  // weighted count of foreground partners
};

inline SpaceAccum build_space_accum(const SpaceKernel& kernel,
                                    const LayerAssignment& seg, int t) {
  SpaceAccum acc;
  const size_t n = static_cast<size_t>(kernel.width) * kernel.height;
  acc.W.assign(n, 0.0);
  acc.A.assign(n, 0.0);
  kernel.for_each_pair([&](int px, int py, int qx, int qy, double w) {
    const size_t pi = static_cast<size_t>(py) * kernel.width + px;
    const size_t qi = static_cast<size_t>(qy) * kernel.width + qx;
    acc.W[pi] += w;
    acc.W[qi] += w;
    if (seg.at(t, qx, qy)) acc.A[pi] += w;
    if (seg.at(t, px, py)) acc.A[qi] += w;
  });
  return acc;
}

/// Locally recomputable part of the energy affected by flipping g at
/// (x,y,t): layer coupling, motion gates of pair t, forward data/time of
/// pair t, and the data/time contributions of pair t-1 sources whose
/// bilinear stencil covers this pixel. The space term is handled separately
/// through the accumulators.
inline double icm_local_terms(
    const LayeredProblem& P, int t, int x, int y,
    const std::vector<std::vector<std::pair<uint8_t, int32_t>>>& back_sources) {
  const int mult = P.weights.count_shared_once ? 1 : 2;
  double s = 0;
  s += mult * P.weights.lambda_layer *
       ((P.seg.at(t, x, y) != 0) != (P.semantic_fg[t].at(x, y) != 0));
  if (t < P.frames - 1) {
    for (int k = 0; k < 2; ++k) {
      const FlowField& f = P.flow[t][k];
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int n = 0; n < 4; ++n) {
        if (nx[n] < 0 || nx[n] >= P.width || ny[n] < 0 || ny[n] >= P.height)
          continue;
        if (P.seg.at(t, x, y) != P.seg.at(t, nx[n], ny[n])) continue;
        // both edge directions carry the gate
        s += 2.0 * P.weights.lambda_motion *
             (P.rho_smooth(f.u_at(x, y) - f.u_at(nx[n], ny[n])) +
              P.rho_smooth(f.v_at(x, y) - f.v_at(nx[n], ny[n])));
      }
      s += data_pixel_term(P, t, k, x, y) +
           P.weights.lambda_time * time_pixel_term(P, t, k, x, y);
    }
  }
  if (t > 0) {
    const size_t pi = static_cast<size_t>(y) * P.width + x;
    for (const auto& [k, src] : back_sources[pi]) {
      const int sx = static_cast<int>(src % P.width);
      const int sy = static_cast<int>(src / P.width);
      s += data_pixel_term(P, t - 1, k, sx, sy) +
           P.weights.lambda_time * time_pixel_term(P, t - 1, k, sx, sy);
    }
  }
  return s;
}

}  // namespace detail

/// Discrete relabeling with flows fixed: iterated-conditional-modes sweeps
/// accepting a pixel flip only when the exactly evaluated energy delta is
/// negative, preceded and followed by whole-mask candidate moves (semantic
/// mask, all-background, all-foreground) that are likewise accepted only
/// when they lower the energy. Monotone non-increase of total_energy by
/// construction. Returns true if the assignment changed.
inline bool update_segmentation(LayeredProblem& P,
                                const LayeredOptions& opts = {}) {
  const int T = P.frames;
  const size_t n = P.pixels();
  bool changed = false;

  // Whole-mask candidates, evaluated on the exact energy. They carry ICM
  // past poor local minima on tiny instances; on larger boxes the full
  // evaluations are not worth it and plain ICM from the semantic mask does
  // the work.
  const bool use_candidates = n <= 1024;
  auto try_candidates = [&]() {
    if (!use_candidates) return false;
    double best = total_energy(P);
    const LayerAssignment current = P.seg;
    LayerAssignment best_seg = current;
    bool adopted = false;
    for (int c = 0; c < 3; ++c) {
      LayerAssignment cand = current;
      for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < n; ++i) {
          const size_t o = static_cast<size_t>(t) * n + i;
          cand.fg[o] = c == 0 ? (P.semantic_fg[t].data[i] != 0)
                              : (c == 1 ? 0 : 1);
        }
      P.seg = cand;
      const double e = total_energy(P);
      if (e < best - 1e-12 * std::max(1.0, std::fabs(best))) {
        best = e;
        best_seg = cand;
        adopted = true;
      }
    }
    P.seg = best_seg;
    return adopted;
  };

  if (try_candidates()) changed = true;

  // per-frame bilinear stencil sources for the backward data/time deltas
  std::vector<std::vector<std::vector<std::pair<uint8_t, int32_t>>>> back(T);
  for (int t = 1; t < T; ++t) back[t].assign(n, {});
  for (int t = 0; t < T - 1; ++t)
    for (int k = 0; k < 2; ++k) {
      const FlowField& f = P.flow[t][k];
      for (int y = 0; y < P.height; ++y)
        for (int x = 0; x < P.width; ++x) {
          const double qx = x + f.u_at(x, y), qy = y + f.v_at(x, y);
          if (!in_bilinear_domain(P.width, P.height, qx, qy)) continue;
          int x0 = std::clamp(static_cast<int>(std::floor(qx)), 0, P.width - 1);
          int y0 = std::clamp(static_cast<int>(std::floor(qy)), 0, P.height - 1);
          const int x1 = std::min(x0 + 1, P.width - 1);
          const int y1 = std::min(y0 + 1, P.height - 1);
          const int32_t src = static_cast<int32_t>(y) * P.width + x;
          for (int sy : {y0, y1})
            for (int sx : {x0, x1}) {
              auto& lst = back[t + 1][static_cast<size_t>(sy) * P.width + sx];
              if (lst.empty() || lst.back() != std::make_pair(uint8_t(k), src))
                lst.emplace_back(uint8_t(k), src);
            }
        }
    }

  const int mult = P.weights.count_shared_once ? 1 : 2;
  std::vector<detail::SpaceKernel> kernels;
  std::vector<detail::SpaceAccum> accum;
  kernels.reserve(T);
  for (int t = 0; t < T; ++t) {
    kernels.emplace_back(P.color[t], P.space);
    accum.push_back(detail::build_space_accum(kernels[t], P.seg, t));
  }

  for (int round = 0; round < 2; ++round) {
    bool any_flip = false;
    for (int sweep = 0; sweep < opts.icm_max_sweeps; ++sweep) {
      size_t flips = 0;
      for (int t = 0; t < T; ++t) {
        for (int y = 0; y < P.height; ++y)
          for (int x = 0; x < P.width; ++x) {
            const size_t pi = static_cast<size_t>(y) * P.width + x;
            const bool gp = P.seg.at(t, x, y) != 0;
            const double Wp = accum[t].W[pi];
            const double Ap = accum[t].A[pi];
            const double Dp = gp ? (Wp - Ap) : Ap;
            const double d_space =
                mult * P.weights.lambda_space * 2.0 * (Wp - 2.0 * Dp);
            const double before = detail::icm_local_terms(P, t, x, y, back[t]);
            P.seg.at(t, x, y) = !gp;
            const double after = detail::icm_local_terms(P, t, x, y, back[t]);
            const double delta = after - before + d_space;
            if (delta < -1e-12) {
              ++flips;
              const double dg = gp ? -1.0 : 1.0;
              kernels[t].for_each_partner(x, y, [&](int qx, int qy, double w) {
                accum[t].A[static_cast<size_t>(qy) * kernels[t].width + qx] +=
                    dg * w;
              });
            } else {
              P.seg.at(t, x, y) = gp;  // revert
            }
          }
      }
      if (flips == 0) break;
      any_flip = true;
    }
    changed |= any_flip;
    if (round == 0) {
      if (!try_candidates()) break;
      changed = true;
      for (int t = 0; t < T; ++t)
        accum[t] = detail::build_space_accum(kernels[t], P.seg, t);
    }
  }

  // On very small boxes, follow up with exact per-frame coordinate descent:
  // each frame's assignment is exhaustively minimized given the others.
  // Strictly monotone; lets tiny instances reach the joint minimum ICM can
  // miss.
  if (n <= 16) {
    bool improved = true;
    for (int rounds = 0; improved && rounds < 4; ++rounds) {
      improved = false;
      for (int t = 0; t < T; ++t) {
        double best = total_energy(P);
        std::vector<uint8_t> best_frame(
            P.seg.fg.begin() + P.seg.idx(t, 0, 0),
            P.seg.fg.begin() + P.seg.idx(t, 0, 0) + n);
        const uint32_t states = 1u << n;
        for (uint32_t bits = 0; bits < states; ++bits) {
          for (size_t i = 0; i < n; ++i)
            P.seg.fg[P.seg.idx(t, 0, 0) + i] = (bits >> i) & 1;
          const double e = total_energy(P);
          if (e < best - 1e-12) {
            best = e;
            std::copy(P.seg.fg.begin() + P.seg.idx(t, 0, 0),
                      P.seg.fg.begin() + P.seg.idx(t, 0, 0) + n,
                      best_frame.begin());
            improved = true;
            changed = true;
          }
        }
        std::copy(best_frame.begin(), best_frame.end(),
                  P.seg.fg.begin() + P.seg.idx(t, 0, 0));
      }
    }
  }
  return changed;
}

// ---------------------------------------------------------------------------
// Whole-track optimization
// ---------------------------------------------------------------------------

struct ThingResult {
  uint8_t cls = label::Unknown;
  int box_x0 = 0, box_y0 = 0, box_x1 = -1, box_y1 = -1;
  std::vector<std::array<FlowField, 2>> flow;  // per pair, box-local
  LayerAssignment seg;                         // refined assignment
  std::vector<double> energy_trace;
  bool refined = false;
};

namespace detail {

inline ImageBuf crop_image(const ImageBuf& img, int x0, int y0, int w, int h) {
  ImageBuf out(w, h, img.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

inline FlowField crop_flow(const FlowField& f, int x0, int y0, int w, int h) {
  FlowField out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.u_at(x, y) = f.u_at(x0 + x, y0 + y);
      out.v_at(x, y) = f.v_at(x0 + x, y0 + y);
      out.valid_at(x, y) = f.valid_at(x0 + x, y0 + y);
    }
  return out;
}

}  // namespace detail

/// Builds the LayeredProblem for one track and alternates update_flow /
/// update_segmentation until the relative energy decrease drops below
/// rel_tol or max_outer iterations. The assignment starts at the semantic
/// mask; each layer flow starts from the initial flow restricted to the
/// eroded (fg) or anti-dilated (bg) side, filled in with its affine fit
/// elsewhere. Degenerate initializations (either side empty) return the
/// inputs unchanged and are flagged unrefined.
inline ThingResult optimize_thing(const ThingTrack& track,
                                  const std::vector<ImageBuf>& frames,
                                  const std::vector<FlowField>& init_flow,
                                  const EnergyWeights& weights,
                                  const LayeredOptions& opts = {},
                                  const SpaceWeights& space = {}) {
  const int T = static_cast<int>(track.regions.size());
  if (static_cast<int>(frames.size()) < T ||
      static_cast<int>(init_flow.size()) < T - 1)
    throw std::invalid_argument("optimize_thing: window shorter than track");

  const int bw = track.box_width(), bh = track.box_height();
  LayeredProblem P;
  P.width = bw;
  P.height = bh;
  P.frames = T;
  P.weights = weights;
  P.space = space;
  P.fg_class = track.cls;
  P.seg = LayerAssignment(bw, bh, T);
  for (int t = 0; t < T; ++t) {
    P.color.push_back(
        detail::crop_image(frames[t], track.box_x0, track.box_y0, bw, bh));
    P.gray.push_back(luminance(P.color.back()));
    P.semantic_fg.push_back(track.fg[t]);
    P.seg.set_frame(t, track.fg[t]);
  }
  for (int t = 0; t < T - 1; ++t)
    P.init_flow.push_back(
        detail::crop_flow(init_flow[t], track.box_x0, track.box_y0, bw, bh));

  ThingResult res;
  res.cls = track.cls;
  res.box_x0 = track.box_x0;
  res.box_y0 = track.box_y0;
  res.box_x1 = track.box_x1;
  res.box_y1 = track.box_y1;

  // initial motion models, ignoring pixels close to the object boundary
  P.flow.resize(T - 1);
  P.affine.resize(T - 1);
  bool degenerate = false;
  for (int t = 0; t < T - 1 && !degenerate; ++t) {
    Mask fg_core = erode_mask(track.fg[t], opts.erode_radius);
    Mask bg_core = dilate_mask(track.fg[t], opts.dilate_radius);
    for (auto& v : bg_core.data) v = !v;
    const auto th_fg = fit_affine(P.init_flow[t], fg_core);
    const auto th_bg = fit_affine(P.init_flow[t], bg_core);
    if (!th_fg || !th_bg) {
      degenerate = true;
      break;
    }
    P.affine[t][kFgLayer] = *th_fg;
    P.affine[t][kBgLayer] = *th_bg;
    for (int k = 0; k < 2; ++k) {
      const Mask& keep = k == kFgLayer ? fg_core : bg_core;
      const AffineParams& th = P.affine[t][k];
      FlowField f(bw, bh);
      for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x) {
          if (keep.at(x, y) && P.init_flow[t].valid_at(x, y)) {
            f.u_at(x, y) = P.init_flow[t].u_at(x, y);
            f.v_at(x, y) = P.init_flow[t].v_at(x, y);
          } else {
            f.u_at(x, y) = static_cast<float>(th.u_at(x, y));
            f.v_at(x, y) = static_cast<float>(th.v_at(x, y));
          }
        }
      P.flow[t][k] = std::move(f);
    }
  }

  if (degenerate) {
    res.flow.resize(T - 1);
    for (int t = 0; t < T - 1; ++t)
      res.flow[t] = {P.init_flow[t], P.init_flow[t]};
    res.seg = P.seg;
    res.energy_trace.clear();
    res.refined = false;
    return res;
  }

  double prev = total_energy(P);
  res.energy_trace.push_back(prev);
  for (int it = 0; it < opts.max_outer; ++it) {
    update_flow(P, opts);
    update_segmentation(P, opts);
    const double e = total_energy(P);
    res.energy_trace.push_back(e);
    if (prev - e <= opts.rel_tol * std::max(1.0, std::fabs(prev))) {
      prev = e;
      break;
    }
    prev = e;
  }

  res.flow = P.flow;
  res.seg = P.seg;
  res.refined = true;
  return res;
}

}  // namespace sof
