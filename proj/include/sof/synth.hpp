#pragma once

// Deterministic synthetic scenes with exact ground truth: a value-noise
// textured background moved by a homography chain, one foreground shape
// with its own affine motion (optionally a second, unlabeled mover for the
// failure-mode scene), plus the corrupted observations the pipeline
// consumes (noisy initial flow, dilated semantic masks, noisy images).
//
// Frames are rendered back to front in time: the last frame analytically,
// every earlier frame by sampling its successor through the ground-truth
// flow. Brightness constancy therefore holds by construction on
// non-occluded pixels, which is what the photometric self-consistency
// oracle checks.

#include <filesystem>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "sof/core.hpp"
#include "sof/io.hpp"
#include "sof/planar.hpp"
#include "sof/regions.hpp"

namespace sof {

/// Multi-octave value noise on a jittered integer lattice; analytic at any
/// real coordinate, deterministic in the seed.
struct ValueNoise {
  uint64_t seed = 1;
  double cell = 8.0;
  int octaves = 3;

  static double hash01(int64_t ix, int64_t iy, uint64_t seed) {
    uint64_t h = seed;
    h ^= static_cast<uint64_t>(ix) * 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h ^= static_cast<uint64_t>(iy) * 0x94d049bb133111ebull;
    h = (h ^ (h >> 27)) * 0x2545f4914f6cdd1dull;
    h ^= h >> 31;
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
  }

  double at(double x, double y) const {
    double value = 0.0, amplitude = 1.0, norm = 0.0, freq = 1.0;
    for (int o = 0; o < octaves; ++o) {
      const double sx = x * freq / cell, sy = y * freq / cell;
      const int64_t ix = static_cast<int64_t>(std::floor(sx));
      const int64_t iy = static_cast<int64_t>(std::floor(sy));
      const double fx = sx - ix, fy = sy - iy;
      const double wx = fx * fx * (3 - 2 * fx);  // smoothstep
      const double wy = fy * fy * (3 - 2 * fy);
      const uint64_t s = seed + 0x51ed2701ull * o;
      const double v00 = hash01(ix, iy, s), v10 = hash01(ix + 1, iy, s);
      const double v01 = hash01(ix, iy + 1, s), v11 = hash01(ix + 1, iy + 1, s);
      value += amplitude * ((1 - wy) * ((1 - wx) * v00 + wx * v10) +
                            wy * ((1 - wx) * v01 + wx * v11));
      norm += amplitude;
      amplitude *= 0.5;
      freq *= 2.0;
    }
    return value / norm;
  }
};

struct MoverSpec {
  enum class Shape { Rect, Ellipse };
  Shape shape = Shape::Rect;
  double cx = 0, cy = 0;      // initial center, frame coordinates
  double half_w = 15, half_h = 15;
  // per-pair affine frame motion [a b tx; c d ty]; one entry repeats
  std::vector<std::array<double, 6>> motion{{1, 0, 0, 0, 1, 0}};

  const std::array<double, 6>& motion_at(int t) const {
    return motion[std::min<size_t>(t, motion.size() - 1)];
  }
};

struct SceneSpec {
  int width = 128, height = 128;
  std::vector<Homography> bg_motion{Homography::identity()};  // per pair
  MoverSpec fg;
  std::optional<MoverSpec> extra;  // second mover, labeled as background
  uint64_t texture_seed = 1;
  double image_noise = 0.0;   // sigma on intensities
  double flow_noise = 0.0;    // sigma (px) on the emitted initial flow
  double seg_dilation = 0.0;  // radius corrupting the emitted masks
  uint8_t fg_label = label::Car;
  uint8_t bg_label = label::Road;
  double fg_brightness = 0.35;  // texture separation between layers

  const Homography& bg_motion_at(int t) const {
    return bg_motion[std::min<size_t>(t, bg_motion.size() - 1)];
  }
};

struct SceneData {
  std::vector<ImageBuf> images;      // T, single channel
  std::vector<FlowField> gt_flow;    // T-1
  std::vector<Mask> gt_fg;           // T
  std::vector<Mask> nonoccluded;     // T-1 (valid photometric correspondence)
  std::vector<SegMap> seg;           // T, corrupted
  std::vector<FlowField> init_flow;  // T-1, corrupted
};

namespace detail {

inline Eigen::Matrix3d affine_matrix(const std::array<double, 6>& m) {
  Eigen::Matrix3d a;
  a << m[0], m[1], m[2], m[3], m[4], m[5], 0, 0, 1;
  return a;
}

inline Eigen::Matrix3d homography_matrix(const Homography& h) {
  Eigen::Matrix3d m;
  m << h.h[0], h.h[1], h.h[2], h.h[3], h.h[4], h.h[5], h.h[6], h.h[7], h.h[8];
  return m;
}

inline Eigen::Vector2d apply_h(const Eigen::Matrix3d& m, double x, double y) {
  const Eigen::Vector3d p = m * Eigen::Vector3d(x, y, 1.0);
  return {p(0) / p(2), p(1) / p(2)};
}

inline bool inside_shape(const MoverSpec& sp, const Eigen::Matrix3d& pose_inv,
                         double x, double y) {
  const Eigen::Vector2d o = apply_h(pose_inv, x, y);
  if (sp.shape == MoverSpec::Shape::Rect)
    return std::fabs(o(0)) <= sp.half_w && std::fabs(o(1)) <= sp.half_h;
  const double nx = o(0) / sp.half_w, ny = o(1) / sp.half_h;
  return nx * nx + ny * ny <= 1.0;
}

}  // namespace detail

/// Renders T frames plus ground truth and the corrupted pipeline inputs.
/// Throws if the foreground leaves the frame in any of the T frames.
inline SceneData render(const SceneSpec& spec, int T) {
  if (T < 2) throw std::invalid_argument("render: need T >= 2");
  const int W = spec.width, H = spec.height;

  // pose/texture chains
  std::vector<Eigen::Matrix3d> fg_pose(T), fg_pose_inv(T);
  std::vector<Eigen::Matrix3d> ex_pose, ex_pose_inv;
  std::vector<Eigen::Matrix3d> bg_tex(T);  // frame coords -> texture coords
  {
    Eigen::Matrix3d pose = Eigen::Matrix3d::Identity();
    pose(0, 2) = spec.fg.cx;
    pose(1, 2) = spec.fg.cy;
    for (int t = 0; t < T; ++t) {
      fg_pose[t] = pose;
      fg_pose_inv[t] = pose.inverse();
      if (t < T - 1)
        pose = detail::affine_matrix(spec.fg.motion_at(t)) * pose;
    }
    if (spec.extra) {
      ex_pose.resize(T);
      ex_pose_inv.resize(T);
      Eigen::Matrix3d ep = Eigen::Matrix3d::Identity();
      ep(0, 2) = spec.extra->cx;
      ep(1, 2) = spec.extra->cy;
      for (int t = 0; t < T; ++t) {
        ex_pose[t] = ep;
        ex_pose_inv[t] = ep.inverse();
        if (t < T - 1)
          ep = detail::affine_matrix(spec.extra->motion_at(t)) * ep;
      }
    }
    Eigen::Matrix3d g = Eigen::Matrix3d::Identity();
    for (int t = 0; t < T; ++t) {
      bg_tex[t] = g;
      if (t < T - 1)
        g = g * detail::homography_matrix(spec.bg_motion_at(t)).inverse();
    }
  }

  // masks and the frame-containment invariant
  SceneData out;
  out.gt_fg.reserve(T);
  std::vector<Mask> extra_mask(T, Mask());
  for (int t = 0; t < T; ++t) {
    Mask fg(W, H, 0);
    bool touches_border = false;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (detail::inside_shape(spec.fg, fg_pose_inv[t], x, y)) {
          fg.at(x, y) = 1;
          touches_border |= x == 0 || y == 0 || x == W - 1 || y == H - 1;
        }
    if (fg.empty_set() || touches_border)
      throw std::runtime_error("render: foreground exits the frame at t=" +
                               std::to_string(t));
    out.gt_fg.push_back(std::move(fg));
    if (spec.extra) {
      Mask ex(W, H, 0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          ex.at(x, y) =
              detail::inside_shape(*spec.extra, ex_pose_inv[t], x, y);
      extra_mask[t] = std::move(ex);
    }
  }

  // ground-truth flow and the occlusion flags
  for (int t = 0; t < T - 1; ++t) {
    FlowField f(W, H);
    Mask nocc(W, H, 0);
    const Eigen::Matrix3d fg_m = fg_pose[t + 1] * fg_pose_inv[t];
    const Eigen::Matrix3d bg_m =
        detail::homography_matrix(spec.bg_motion_at(t));
    Eigen::Matrix3d ex_m = Eigen::Matrix3d::Identity();
    if (spec.extra) ex_m = ex_pose[t + 1] * ex_pose_inv[t];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        Eigen::Vector2d q;
        bool occluded = false;
        if (out.gt_fg[t].at(x, y)) {
          q = detail::apply_h(fg_m, x, y);
        } else if (spec.extra && extra_mask[t].at(x, y)) {
          q = detail::apply_h(ex_m, x, y);
          occluded = q(0) >= 0 && q(1) >= 0 && q(0) <= W - 1 &&
                             q(1) <= H - 1
                         ? out.gt_fg[t + 1].at(int(std::lround(q(0))),
                                               int(std::lround(q(1)))) != 0
                         : false;
        } else {
          q = detail::apply_h(bg_m, x, y);
          if (q(0) >= 0 && q(1) >= 0 && q(0) <= W - 1 && q(1) <= H - 1) {
            const int qx = int(std::lround(q(0))), qy = int(std::lround(q(1)));
            occluded = out.gt_fg[t + 1].at(qx, qy) != 0 ||
                       (spec.extra && extra_mask[t + 1].at(qx, qy));
          }
        }
        f.u_at(x, y) = static_cast<float>(q(0) - x);
        f.v_at(x, y) = static_cast<float>(q(1) - y);
        const bool in_frame =
            q(0) >= 0 && q(1) >= 0 && q(0) <= W - 1 && q(1) <= H - 1;
        nocc.at(x, y) = in_frame && !occluded;
      }
    out.gt_flow.push_back(std::move(f));
    out.nonoccluded.push_back(std::move(nocc));
  }

  // textures
  const ValueNoise bg_tex_fn{spec.texture_seed, 8.0, 3};
  const ValueNoise fg_tex_fn{spec.texture_seed + 1, 6.0, 3};
  const ValueNoise ex_tex_fn{spec.texture_seed + 2, 6.0, 3};
  auto analytic = [&](int t, double x, double y) -> double {
    if (out.gt_fg[t].at(int(x), int(y)))
      return std::clamp(
          0.55 * fg_tex_fn.at(detail::apply_h(fg_pose_inv[t], x, y)(0),
                              detail::apply_h(fg_pose_inv[t], x, y)(1)) +
              spec.fg_brightness,
          0.0, 1.0);
    if (spec.extra && extra_mask[t].at(int(x), int(y)))
      return std::clamp(
          0.55 * ex_tex_fn.at(detail::apply_h(ex_pose_inv[t], x, y)(0),
                              detail::apply_h(ex_pose_inv[t], x, y)(1)) +
              spec.fg_brightness * 0.6,
          0.0, 1.0);
    const Eigen::Vector2d tc = detail::apply_h(bg_tex[t], x, y);
    return 0.6 * bg_tex_fn.at(tc(0), tc(1));
  };

  // frames: last analytic, earlier ones chained through the ground truth
  out.images.assign(T, ImageBuf(W, H, 1));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      out.images[T - 1].at(x, y) = static_cast<float>(analytic(T - 1, x, y));
  for (int t = T - 2; t >= 0; --t) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double qx = x + out.gt_flow[t].u_at(x, y);
        const double qy = y + out.gt_flow[t].v_at(x, y);
        if (out.nonoccluded[t].at(x, y) &&
            in_bilinear_domain(W, H, qx, qy)) {
          out.images[t].at(x, y) = bilinear_at(out.images[t + 1], qx, qy);
        } else {
          out.images[t].at(x, y) = static_cast<float>(analytic(t, x, y));
        }
      }
  }

  // corrupted observations
  std::mt19937_64 rng(spec.texture_seed * 0x9e3779b97f4a7c15ull + 17);
  if (spec.image_noise > 0) {
    std::normal_distribution<double> noise(0.0, spec.image_noise);
    for (auto& img : out.images)
      for (auto& v : img.data)
        v = static_cast<float>(std::clamp(double(v) + noise(rng), 0.0, 1.0));
  }
  for (int t = 0; t < T; ++t) {
    const Mask dil = spec.seg_dilation > 0
                         ? dilate_mask(out.gt_fg[t], spec.seg_dilation)
                         : out.gt_fg[t];
    SegMap sm(W, H, spec.bg_label);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (dil.at(x, y)) sm.at(x, y) = spec.fg_label;
    out.seg.push_back(std::move(sm));
  }
  {
    std::normal_distribution<double> noise(0.0, spec.flow_noise);
    for (int t = 0; t < T - 1; ++t) {
      FlowField f = out.gt_flow[t];
      if (spec.flow_noise > 0)
        for (size_t i = 0; i < f.u.size(); ++i) {
          f.u[i] = static_cast<float>(f.u[i] + noise(rng));
          f.v[i] = static_cast<float>(f.v[i] + noise(rng));
        }
      out.init_flow.push_back(std::move(f));
    }
  }
  return out;
}

/// Writes a rendered scene as a pipeline-consumable dataset: 16-bit images,
/// label maps, initial flow, the manifest, and the ground truth under gt/.
inline void write_synth_dataset(const SceneSpec& spec, int T,
                                const std::string& dir) {
  namespace fs = std::filesystem;
  const SceneData data = render(spec, T);
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");
  fs::create_directories(fs::path(dir) / "flow");
  fs::create_directories(fs::path(dir) / "gt");

  auto name = [](const char* stem, int t, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d%s", stem, t, ext);
    return std::string(buf);
  };

  SequenceManifest m;
  m.window = T;
  m.output_dir = "refined";
  for (int t = 0; t < T; ++t) {
    const std::string img = "images/" + name("frame", t, ".png");
    const std::string lab = "labels/" + name("frame", t, ".png");
    // 16-bit to keep the photometric consistency through quantization
    std::vector<uint16_t> px(data.images[t].data.size());
    for (size_t i = 0; i < px.size(); ++i)
      px[i] = static_cast<uint16_t>(
          std::lround(std::clamp(data.images[t].data[i], 0.f, 1.f) * 65535.f));
    write_png((fs::path(dir) / img).string(), spec.width, spec.height, 1, 16,
              px.data());
    write_labels(data.seg[t], (fs::path(dir) / lab).string());
    FrameEntry fe;
    fe.image = img;
    fe.labels = lab;
    if (t < T - 1) {
      fe.flow = "flow/" + name("init", t, ".flo");
      write_flo(data.init_flow[t], (fs::path(dir) / fe.flow).string());
    }
    m.frames.push_back(fe);
  }
  for (int t = 0; t < T - 1; ++t) {
    write_flo(data.gt_flow[t],
              (fs::path(dir) / "gt" / name("flow", t, ".flo")).string());
    Mask nocc = data.nonoccluded[t];
    std::vector<uint16_t> px(nocc.data.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = nocc.data[i] ? 255 : 0;
    write_png((fs::path(dir) / "gt" / name("nocc", t, ".png")).string(),
              spec.width, spec.height, 1, 8, px.data());
  }
  for (int t = 0; t < T; ++t) {
    std::vector<uint16_t> px(data.gt_fg[t].data.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = data.gt_fg[t].data[i] ? 255 : 0;
    write_png((fs::path(dir) / "gt" / name("fg", t, ".png")).string(),
              spec.width, spec.height, 1, 8, px.data());
  }
  save_manifest(m, (fs::path(dir) / "manifest.txt").string());
}

/// Key/value scene description consumed by the synth CLI subcommand; see
/// the README for the directive list.
inline std::pair<SceneSpec, int> parse_scene_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_scene_spec: cannot open " + path);
  SceneSpec spec;
  spec.bg_motion.clear();
  spec.fg.motion.clear();
  int T = 5;
  std::string line;
  auto label_id = [](const std::string& s) -> uint8_t {
    for (uint8_t id = 0; id < label::kCount; ++id)
      if (s == label_name(id)) return id;
    throw std::runtime_error("parse_scene_spec: unknown label " + s);
  };
  auto parse_mover = [&](std::istringstream& ls, MoverSpec& mv,
                         const std::string& key) {
    if (key.ends_with("shape")) {
      std::string s;
      ls >> s;
      if (s == "rect") mv.shape = MoverSpec::Shape::Rect;
      else if (s == "ellipse") mv.shape = MoverSpec::Shape::Ellipse;
      else throw std::runtime_error("parse_scene_spec: bad shape " + s);
    } else if (key.ends_with("center")) {
      ls >> mv.cx >> mv.cy;
    } else if (key.ends_with("size")) {
      double w, h;
      ls >> w >> h;
      mv.half_w = w / 2;
      mv.half_h = h / 2;
    } else if (key.ends_with("motion")) {
      std::array<double, 6> a{};
      for (double& v : a) ls >> v;
      mv.motion.push_back(a);
    }
  };
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "size") ls >> spec.width >> spec.height;
    else if (key == "frames") ls >> T;
    else if (key == "bg_homography") {
      Homography h;
      for (double& v : h.h) ls >> v;
      spec.bg_motion.push_back(h);
    } else if (key.rfind("fg_", 0) == 0 && key != "fg_label") {
      parse_mover(ls, spec.fg, key);
    } else if (key.rfind("extra_", 0) == 0) {
      if (!spec.extra) {
        spec.extra = MoverSpec{};
        spec.extra->motion.clear();
      }
      parse_mover(ls, *spec.extra, key);
    } else if (key == "texture_seed") ls >> spec.texture_seed;
    else if (key == "image_noise") ls >> spec.image_noise;
    else if (key == "flow_noise") ls >> spec.flow_noise;
    else if (key == "seg_dilation") ls >> spec.seg_dilation;
    else if (key == "fg_label") {
      std::string s;
      ls >> s;
      spec.fg_label = label_id(s);
    } else if (key == "bg_label") {
      std::string s;
      ls >> s;
      spec.bg_label = label_id(s);
    } else {
      throw std::runtime_error("parse_scene_spec: unknown directive " + key);
    }
    if (!ls && !ls.eof())
      throw std::runtime_error("parse_scene_spec: malformed line: " + line);
  }
  if (spec.bg_motion.empty()) spec.bg_motion.push_back(Homography::identity());
  if (spec.fg.motion.empty()) spec.fg.motion.push_back({1, 0, 0, 0, 1, 0});
  if (spec.extra && spec.extra->motion.empty())
    spec.extra->motion.push_back({1, 0, 0, 0, 1, 0});
  return {spec, T};
}

}  // namespace sof
