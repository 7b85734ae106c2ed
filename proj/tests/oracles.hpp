#pragma once

// Straight-loop reference evaluators for the layered energy, written
// independently of the optimized implementations (own interpolation, own
// loops, no shared helpers beyond the value types), plus a randomized
// LayeredProblem generator. Test-only code.

#include <random>

#include "sof/layered.hpp"

namespace oracle {

using sof::ImageBuf;
using sof::LayeredProblem;
using sof::Mask;

inline double bilin(const ImageBuf& img, double x, double y) {
  int x0 = (int)std::floor(x);
  int y0 = (int)std::floor(y);
  if (x0 < 0) x0 = 0;
  if (x0 > img.width - 1) x0 = img.width - 1;
  if (y0 < 0) y0 = 0;
  if (y0 > img.height - 1) y0 = img.height - 1;
  int x1 = x0 + 1 < img.width ? x0 + 1 : img.width - 1;
  int y1 = y0 + 1 < img.height ? y0 + 1 : img.height - 1;
  double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * img.at(x0, y0) + fx * img.at(x1, y0)) +
         fy * ((1 - fx) * img.at(x0, y1) + fx * img.at(x1, y1));
}

inline bool sample_assignment(const sof::LayerAssignment& g, int t, double x,
                              double y) {
  int x0 = (int)std::floor(x);
  int y0 = (int)std::floor(y);
  if (x0 < 0) x0 = 0;
  if (x0 > g.width - 1) x0 = g.width - 1;
  if (y0 < 0) y0 = 0;
  if (y0 > g.height - 1) y0 = g.height - 1;
  int x1 = x0 + 1 < g.width ? x0 + 1 : g.width - 1;
  int y1 = y0 + 1 < g.height ? y0 + 1 : g.height - 1;
  double fx = x - x0, fy = y - y0;
  double v = (1 - fy) * ((1 - fx) * g.at(t, x0, y0) + fx * g.at(t, x1, y0)) +
             fy * ((1 - fx) * g.at(t, x0, y1) + fx * g.at(t, x1, y1));
  return v >= 0.5;
}

inline double charbonnier(double x, const sof::RobustPenalty& p) {
  return std::pow(x * x + p.epsilon * p.epsilon, p.exponent) -
         std::pow(p.epsilon * p.epsilon, p.exponent);
}

inline bool in_box(const LayeredProblem& P, double x, double y) {
  return x >= 0.0 && y >= 0.0 && x <= P.width - 1.0 && y <= P.height - 1.0;
}

inline double data_term(const LayeredProblem& P, int t, int k) {
  double e = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      double qx = x + P.flow[t][k].u_at(x, y);
      double qy = y + P.flow[t][k].v_at(x, y);
      if (!in_box(P, qx, qy)) {
        e += P.weights.lambda_d;
        continue;
      }
      bool gp = P.seg.at(t, x, y) != 0;
      bool gq = sample_assignment(P.seg, t + 1, qx, qy);
      if (gp == gq)
        e += charbonnier(P.gray[t].at(x, y) - bilin(P.gray[t + 1], qx, qy),
                         P.rho_data);
      else
        e += P.weights.lambda_d;
    }
  return e;
}

inline double motion_term(const LayeredProblem& P, int t, int k) {
  double e = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      const int dx[4] = {-1, 1, 0, 0};
      const int dy[4] = {0, 0, -1, 1};
      for (int n = 0; n < 4; ++n) {
        int qx = x + dx[n], qy = y + dy[n];
        if (qx < 0 || qx >= P.width || qy < 0 || qy >= P.height) continue;
        if ((P.seg.at(t, x, y) != 0) != (P.seg.at(t, qx, qy) != 0)) continue;
        e += charbonnier(P.flow[t][k].u_at(x, y) - P.flow[t][k].u_at(qx, qy),
                         P.rho_smooth) +
             charbonnier(P.flow[t][k].v_at(x, y) - P.flow[t][k].v_at(qx, qy),
                         P.rho_smooth);
      }
    }
  double laff = k == sof::kFgLayer ? P.weights.lambda_aff_for(P.fg_class)
                                   : P.weights.lambda_aff;
  double aff = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      const auto& a = P.affine[t][k].a;
      aff += charbonnier(P.flow[t][k].u_at(x, y) - (a[0] + a[1] * x + a[2] * y),
                         P.rho_affine) +
             charbonnier(P.flow[t][k].v_at(x, y) - (a[3] + a[4] * x + a[5] * y),
                         P.rho_affine);
    }
  return e + laff * aff;
}

inline double time_term(const LayeredProblem& P, int t, int k) {
  double e = 0;
  for (int y = 0; y < P.height; ++y)
    for (int x = 0; x < P.width; ++x) {
      double qx = x + P.flow[t][k].u_at(x, y);
      double qy = y + P.flow[t][k].v_at(x, y);
      if (!in_box(P, qx, qy)) {
        e += 1.0;
        continue;
      }
      bool gp = P.seg.at(t, x, y) != 0;
      bool gq = sample_assignment(P.seg, t + 1, qx, qy);
      e += gp != gq ? 1.0 : 0.0;
    }
  return e;
}

inline double space_term(const Mask& g, const ImageBuf& img,
                         const sof::SpaceWeights& w) {
  double e = 0;
  const int W = g.width, H = g.height;
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px)
      for (int qy = 0; qy < H; ++qy)
        for (int qx = 0; qx < W; ++qx) {
          if (px == qx && py == qy) continue;
          if ((g.at(px, py) != 0) == (g.at(qx, qy) != 0)) continue;
          double d2 = double(px - qx) * (px - qx) + double(py - qy) * (py - qy);
          double dc2 = 0;
          for (int c = 0; c < img.channels; ++c) {
            double d = double(img.at(px, py, c)) - double(img.at(qx, qy, c));
            dc2 += d * d;
          }
          double pos = std::exp(-d2 / (2.0 * w.sigma_s * w.sigma_s));
          e += w.mix_position * pos +
               w.mix_bilateral * pos *
                   std::exp(-dc2 / (2.0 * w.sigma_c * w.sigma_c));
        }
  return e;
}

inline double layer_term(const Mask& g, const Mask& ghat) {
  double e = 0;
  for (size_t i = 0; i < g.data.size(); ++i)
    e += (g.data[i] != 0) != (ghat.data[i] != 0);
  return e;
}

/// Eq. 1 exactly as printed: everything inside the sum over the two layers.
inline double total(const LayeredProblem& P) {
  double e = 0;
  for (int k = 0; k < 2; ++k) {
    for (int t = 0; t < P.frames - 1; ++t)
      e += data_term(P, t, k) + P.weights.lambda_motion * motion_term(P, t, k) +
           P.weights.lambda_time * time_term(P, t, k);
    if (P.weights.count_shared_once && k == 1) continue;
    for (int t = 0; t < P.frames; ++t) {
      Mask g = P.seg.frame_mask(t);
      e += P.weights.lambda_layer * layer_term(g, P.semantic_fg[t]) +
           P.weights.lambda_space * space_term(g, P.color[t], P.space);
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Randomized problem generator
// ---------------------------------------------------------------------------

struct ProblemConfig {
  int width = 8, height = 8, frames = 2;
  bool color_images = false;
  bool randomize_weights = true;
  bool random_assignment = true;
  double max_flow = 2.5;
};

inline LayeredProblem random_problem(std::mt19937_64& rng,
                                     const ProblemConfig& cfg) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  LayeredProblem P;
  P.width = cfg.width;
  P.height = cfg.height;
  P.frames = cfg.frames;
  const int ch = cfg.color_images ? 3 : 1;
  for (int t = 0; t < cfg.frames; ++t) {
    ImageBuf img(cfg.width, cfg.height, ch);
    for (auto& v : img.data) v = static_cast<float>(uni(rng));
    P.color.push_back(img);
    P.gray.push_back(sof::luminance(img));
  }
  // blob-ish semantic masks: a random rectangle per frame
  std::uniform_int_distribution<int> px(0, cfg.width - 1), py(0, cfg.height - 1);
  for (int t = 0; t < cfg.frames; ++t) {
    Mask m(cfg.width, cfg.height, 0);
    int x0 = px(rng), x1 = px(rng), y0 = py(rng), y1 = py(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) m.at(x, y) = 1;
    P.semantic_fg.push_back(m);
  }
  P.seg = sof::LayerAssignment(cfg.width, cfg.height, cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) {
    if (cfg.random_assignment) {
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x)
          P.seg.at(t, x, y) = uni(rng) < 0.5;
    } else {
      P.seg.set_frame(t, P.semantic_fg[t]);
    }
  }
  std::uniform_real_distribution<double> fl(-cfg.max_flow, cfg.max_flow);
  for (int t = 0; t < cfg.frames - 1; ++t) {
    sof::FlowField init(cfg.width, cfg.height);
    for (size_t i = 0; i < init.u.size(); ++i) {
      init.u[i] = static_cast<float>(fl(rng));
      init.v[i] = static_cast<float>(fl(rng));
    }
    P.init_flow.push_back(init);
    std::array<sof::FlowField, 2> layer_flows;
    std::array<sof::AffineParams, 2> thetas;
    for (int k = 0; k < 2; ++k) {
      sof::FlowField f(cfg.width, cfg.height);
      for (size_t i = 0; i < f.u.size(); ++i) {
        f.u[i] = static_cast<float>(fl(rng));
        f.v[i] = static_cast<float>(fl(rng));
      }
      layer_flows[k] = f;
      sof::AffineParams th;
      th.a = {fl(rng), 0.1 * uni(rng), 0.1 * uni(rng),
              fl(rng), 0.1 * uni(rng), 0.1 * uni(rng)};
      thetas[k] = th;
    }
    P.flow.push_back(layer_flows);
    P.affine.push_back(thetas);
  }
  P.weights = sof::EnergyWeights::defaults();
  if (cfg.randomize_weights) {
    P.weights.lambda_d = 0.1 + uni(rng);
    P.weights.lambda_motion = 0.1 + uni(rng);
    P.weights.lambda_time = 0.1 + uni(rng);
    P.weights.lambda_layer = 0.1 + uni(rng);
    P.weights.lambda_space = 0.01 + 0.1 * uni(rng);
    P.weights.lambda_aff = 0.1 + uni(rng);
    P.weights.lambda_aff_class.clear();
  }
  P.space.sigma_s = 2.0 + 4.0 * uni(rng);
  P.space.sigma_c = 0.05 + 0.1 * uni(rng);
  P.rho_data = sof::RobustPenalty::charbonnier();
  P.rho_smooth = sof::RobustPenalty::charbonnier();
  P.rho_affine = uni(rng) < 0.5 ? sof::RobustPenalty::quadratic()
                                : sof::RobustPenalty{0.7, 1e-3};
  return P;
}

}  // namespace oracle
