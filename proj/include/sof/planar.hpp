#pragma once

// Planar motion: robust homography estimation from the initial flow inside
// a Plane region (RANSAC over 4-point DLT samples, normalized DLT refit on
// the inliers) and synthesis of the planar flow field.

#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "sof/core.hpp"

namespace sof {

/// 3x3 projective transform, row-major, scaled so h[8] = 1 when possible.
struct Homography {
  std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty) {
    Homography m;
    m.h[2] = tx;
    m.h[5] = ty;
    return m;
  }

  double operator()(int r, int c) const { return h[r * 3 + c]; }

  /// Maps (x,y); empty when the point lands on the plane at infinity.
  std::optional<std::pair<double, double>> apply(double x, double y) const {
    const double w = h[6] * x + h[7] * y + h[8];
    if (std::fabs(w) < 1e-12) return std::nullopt;
    return std::make_pair((h[0] * x + h[1] * y + h[2]) / w,
                          (h[3] * x + h[4] * y + h[5]) / w);
  }

  void normalize() {
    if (std::fabs(h[8]) > 1e-12)
      for (double& v : h) v /= h[8];
  }
};

struct RansacConfig {
  double inlier_threshold = 3.0;  // px flow residual
  int max_iterations = 2000;
  double confidence = 0.995;
  static constexpr int kMinSample = 4;
};

struct PlanarFit {
  Homography h;
  Mask inliers;
  size_t inlier_count = 0;
};

namespace detail {

struct Correspondence {
  double x, y, xp, yp;
};

/// Direct linear transform with Hartley normalization. Needs >= 4
/// correspondences; returns empty on degenerate configurations.
inline std::optional<Homography> dlt_homography(
    const std::vector<Correspondence>& pts) {
  const size_t n = pts.size();
  if (n < 4) return std::nullopt;

  auto normalizer = [&](bool primed) {
    double cx = 0, cy = 0;
    for (const auto& p : pts) {
      cx += primed ? p.xp : p.x;
      cy += primed ? p.yp : p.y;
    }
    cx /= n;
    cy /= n;
    double dist = 0;
    for (const auto& p : pts)
      dist += std::hypot((primed ? p.xp : p.x) - cx, (primed ? p.yp : p.y) - cy);
    dist /= n;
    const double s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
    Eigen::Matrix3d T;
    T << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return T;
  };
  const Eigen::Matrix3d T = normalizer(false);
  const Eigen::Matrix3d Tp = normalizer(true);

  Eigen::MatrixXd A(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    const double x = T(0, 0) * pts[i].x + T(0, 2);
    const double y = T(1, 1) * pts[i].y + T(1, 2);
    const double xp = Tp(0, 0) * pts[i].xp + Tp(0, 2);
    const double yp = Tp(1, 1) * pts[i].yp + Tp(1, 2);
    A.row(2 * i) << -x, -y, -1, 0, 0, 0, xp * x, xp * y, xp;
    A.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, yp * x, yp * y, yp;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // rank must be 8 for a unique (up to scale) solution
  if (sv(7) < 1e-9 * sv(0)) return std::nullopt;
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  const Eigen::Matrix3d H = Tp.inverse() * Hn * T;
  if (!H.allFinite() || std::fabs(H.determinant()) < 1e-15) return std::nullopt;

  Homography out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.h[r * 3 + c] = H(r, c);
  out.normalize();
  return out;
}

inline double flow_residual(const Homography& h, const Correspondence& p) {
  const auto m = h.apply(p.x, p.y);
  if (!m) return std::numeric_limits<double>::infinity();
  return std::hypot(m->first - p.xp, m->second - p.yp);
}

}  // namespace detail

/// RANSAC homography fit to the correspondences (x,y) -> (x+u, y+v) taken
/// from the valid flow pixels under `region`. Deterministic for a fixed
/// seed and independent of mask construction order (pixels are enumerated
/// row-major). Returns empty when fewer than 4 valid pixels exist or every
/// sampled configuration is degenerate.
inline std::optional<PlanarFit> fit_homography_ransac(const FlowField& flow,
                                                      const Mask& region,
                                                      const RansacConfig& cfg,
                                                      uint64_t seed) {
  if (flow.width != region.width || flow.height != region.height)
    throw std::invalid_argument("fit_homography_ransac: dimension mismatch");

  std::vector<detail::Correspondence> pts;
  std::vector<size_t> flat;  // pixel index per correspondence
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x)
      if (region.at(x, y) && flow.valid_at(x, y)) {
        pts.push_back({double(x), double(y), x + double(flow.u_at(x, y)),
                       y + double(flow.v_at(x, y))});
        flat.push_back(flow.idx(x, y));
      }
  const size_t n = pts.size();
  if (n < RansacConfig::kMinSample) return std::nullopt;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, n - 1);

  std::optional<Homography> best;
  size_t best_inliers = 0;
  double best_residual_sum = std::numeric_limits<double>::infinity();
  int iterations = cfg.max_iterations;

  std::vector<detail::Correspondence> sample(4);
  for (int it = 0; it < iterations; ++it) {
    size_t idx[4];
    idx[0] = pick(rng);
    for (int k = 1; k < 4; ++k) {
      bool fresh;
      do {
        idx[k] = pick(rng);
        fresh = true;
        for (int j = 0; j < k; ++j) fresh &= idx[k] != idx[j];
      } while (!fresh);
    }
    for (int k = 0; k < 4; ++k) sample[k] = pts[idx[k]];

    // reject samples with (near-)collinear triples
    bool degenerate = false;
    for (int a = 0; a < 4 && !degenerate; ++a)
      for (int b = a + 1; b < 4 && !degenerate; ++b)
        for (int c = b + 1; c < 4 && !degenerate; ++c) {
          const double area =
              (sample[b].x - sample[a].x) * (sample[c].y - sample[a].y) -
              (sample[c].x - sample[a].x) * (sample[b].y - sample[a].y);
          degenerate = std::fabs(area) < 1e-9;
        }
    if (degenerate) continue;

    const auto h = detail::dlt_homography(sample);
    if (!h) continue;

    size_t inliers = 0;
    double residual_sum = 0;
    for (const auto& p : pts) {
      const double r = detail::flow_residual(*h, p);
      if (r <= cfg.inlier_threshold) {
        ++inliers;
        residual_sum += r;
      }
    }
    if (inliers > best_inliers ||
        (inliers == best_inliers && residual_sum < best_residual_sum)) {
      best = h;
      best_inliers = inliers;
      best_residual_sum = residual_sum;
      // adaptive early exit
      const double w = static_cast<double>(inliers) / static_cast<double>(n);
      const double denom = std::log(std::max(1e-12, 1.0 - w * w * w * w));
      if (denom < 0) {
        const double need = std::log(1.0 - cfg.confidence) / denom;
        iterations = std::min(iterations,
                              it + 1 + static_cast<int>(std::ceil(need)));
      }
    }
  }
  if (!best || best_inliers < RansacConfig::kMinSample) return std::nullopt;

  // refit on all inliers with normalized DLT, then refresh the inlier set
  // from the final model so residuals <= threshold holds exactly
  std::vector<detail::Correspondence> in_pts;
  for (const auto& p : pts)
    if (detail::flow_residual(*best, p) <= cfg.inlier_threshold)
      in_pts.push_back(p);
  if (const auto refit = detail::dlt_homography(in_pts)) {
    size_t refit_inliers = 0;
    for (const auto& p : pts)
      refit_inliers += detail::flow_residual(*refit, p) <= cfg.inlier_threshold;
    if (refit_inliers >= best_inliers) best = refit;
  }

  PlanarFit fit;
  fit.h = *best;
  fit.inliers = Mask(flow.width, flow.height, 0);
  for (size_t i = 0; i < n; ++i)
    if (detail::flow_residual(fit.h, pts[i]) <= cfg.inlier_threshold) {
      fit.inliers.data[flat[i]] = 1;
      ++fit.inlier_count;
    }
  if (fit.inlier_count < RansacConfig::kMinSample) return std::nullopt;
  return fit;
}

/// Flow synthesized from a homography on the masked pixels: (x,y) maps to
/// the dehomogenized h*(x,y,1), flow is the difference. Pixels outside the
/// mask, or mapping to the plane at infinity, are invalid.
inline FlowField homography_flow(const Homography& h, const Mask& region,
                                 int width, int height) {
  FlowField f(width, height);
  std::fill(f.valid.begin(), f.valid.end(), 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!region.at(x, y)) continue;
      const auto m = h.apply(x, y);
      if (!m) continue;
      f.u_at(x, y) = static_cast<float>(m->first - x);
      f.v_at(x, y) = static_cast<float>(m->second - y);
      f.valid_at(x, y) = 1;
    }
  return f;
}

}  // namespace sof
