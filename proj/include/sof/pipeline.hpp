#pragma once

// Pipeline driver: consumes a sequence manifest, processes it in
// non-overlapping T-frame windows (the trailing window shrinks when at
// least two frames remain), and for each window extracts Thing tracks,
// fits Plane homographies, runs the localized layered optimization and
// composes the refined flow. Tracks are optimized concurrently; all file
// writes happen on the calling thread in a fixed order, so outputs are
// byte-identical for identical inputs, seeds and flags.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <thread>

#include "sof/composite.hpp"
#include "sof/core.hpp"
#include "sof/io.hpp"
#include "sof/layered.hpp"
#include "sof/metrics.hpp"
#include "sof/planar.hpp"
#include "sof/regions.hpp"
#include "sof/synth.hpp"

namespace sof {

struct PipelineOptions {
  int window_override = 0;  // > 0 replaces the manifest T
  uint64_t seed = 1;
  int jobs = 0;             // 0 = hardware concurrency
  bool kitti_output = false;
  bool write_visualization = false;
  std::unordered_map<std::string, double> weight_overrides;
  LayeredOptions layered;
  SpaceWeights space;
  RansacConfig ransac;
};

struct RunReport {
  struct Track {
    int window = 0;
    int index = 0;              // within the window
    uint8_t cls = label::Unknown;
    bool refined = false;
    std::vector<double> energy_trace;
  };
  std::vector<Track> tracks;
  std::map<std::string, double> stage_ms;
  std::map<std::string, size_t> tag_histogram;
  std::map<std::string, double> metrics;  // present when GT is supplied

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("RunReport: cannot open " + path);
    for (const auto& t : tracks) {
      out << "track." << t.window << "." << t.index << ".class "
          << label_name(t.cls) << "\n";
      out << "track." << t.window << "." << t.index << ".refined "
          << (t.refined ? 1 : 0) << "\n";
      out << "track." << t.window << "." << t.index << ".energy_trace";
      for (double e : t.energy_trace) out << " " << e;
      out << "\n";
    }
    for (const auto& [k, v] : stage_ms) out << "time_ms." << k << " " << v << "\n";
    for (const auto& [k, v] : tag_histogram)
      out << "composite." << k << " " << v << "\n";
    for (const auto& [k, v] : metrics) out << "metric." << k << " " << v << "\n";
  }
};

namespace detail {

/// Runs fn(i) for i in [0,n) on up to `jobs` workers. Results must be
/// written to preallocated slots; the call returns when all are done.
template <typename Fn>
inline void parallel_for(size_t n, int jobs, Fn&& fn) {
  if (n == 0) return;
  unsigned workers = jobs > 0 ? static_cast<unsigned>(jobs)
                              : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(n));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

struct StageTimer {
  std::map<std::string, double>& sink;
  std::string key;
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();
  ~StageTimer() {
    sink[key] += std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - start)
                     .count();
  }
};

inline const char* tag_name(SourceTag t) {
  switch (t) {
    case SourceTag::Stuff: return "stuff_px";
    case SourceTag::Plane: return "plane_px";
    case SourceTag::ThingFg: return "thing_fg_px";
    case SourceTag::ThingBgOverPlane: return "thing_bg_over_plane_px";
    case SourceTag::ThingBgOverStuff: return "thing_bg_over_stuff_px";
  }
  return "unknown";
}

}  // namespace detail

/// Plane regions of one frame with their RANSAC homography flows. Regions
/// whose fit is degenerate are dropped (their pixels stay pass-through).
inline std::vector<PlaneRegionFlow> fit_planes(const SegMap& seg,
                                               const FlowField& initial,
                                               const ClassTaxonomy& tax,
                                               const RansacConfig& cfg,
                                               uint64_t seed) {
  std::vector<PlaneRegionFlow> out;
  int id = 0;
  for (uint8_t cls = 0; cls < label::kCount; ++cls) {
    if (tax.category(cls) != Category::Plane) continue;
    for (const Region& r : connected_components(seg, cls)) {
      const auto fit = fit_homography_ransac(
          initial, r.mask, cfg, seed + static_cast<uint64_t>(1000 * cls) + id);
      ++id;
      if (!fit) continue;
      PlaneRegionFlow prf;
      prf.region = r.mask;
      prf.flow = homography_flow(fit->h, r.mask, seg.width, seg.height);
      prf.id = id - 1;
      out.push_back(std::move(prf));
    }
  }
  return out;
}

/// Refined per-frame label map: the original labels with each refined
/// track's foreground re-stamped over its box (track class inside the
/// refined mask, background pixels of the box that the semantic map claimed
/// as the track's class fall back to unknown).
inline SegMap refine_labels(const SegMap& seg, const std::vector<ThingResult>& things,
                            int frame) {
  SegMap out = seg;
  for (const auto& th : things) {
    if (!th.refined) continue;
    const Mask fg = th.seg.frame_mask(frame);
    for (int y = th.box_y0; y <= th.box_y1; ++y)
      for (int x = th.box_x0; x <= th.box_x1; ++x) {
        const bool refined_fg = fg.at(x - th.box_x0, y - th.box_y0) != 0;
        if (refined_fg)
          out.at(x, y) = th.cls;
        else if (seg.at(x, y) == th.cls)
          out.at(x, y) = label::Unknown;
      }
  }
  return out;
}

/// One processed window: refined flow + provenance per pair, refined labels
/// per frame, per-track optimization results.
struct WindowResult {
  int first_frame = 0;
  int frames = 0;
  std::vector<ComposeResult> pairs;
  std::vector<SegMap> refined_labels;
  std::vector<ThingResult> things;
};

inline WindowResult process_window(const std::vector<ImageBuf>& images,
                                   const std::vector<SegMap>& segs,
                                   const std::vector<FlowField>& init_flows,
                                   const ClassTaxonomy& tax,
                                   const EnergyWeights& weights,
                                   const PipelineOptions& opts,
                                   RunReport* report, int window_index,
                                   int first_frame) {
  const int T = static_cast<int>(images.size());
  WindowResult res;
  res.first_frame = first_frame;
  res.frames = T;

  // Thing extraction and tracking
  std::vector<std::vector<Region>> per_frame(T);
  {
    detail::StageTimer timer{report->stage_ms, "regions"};
    for (int t = 0; t < T; ++t) {
      for (uint8_t cls = 0; cls < label::kCount; ++cls) {
        if (tax.category(cls) != Category::Thing) continue;
        auto regs = filter_small(connected_components(segs[t], cls, t));
        for (auto& r : regs) per_frame[t].push_back(std::move(r));
      }
    }
  }
  std::vector<ThingTrack> tracks;
  {
    detail::StageTimer timer{report->stage_ms, "matching"};
    tracks = match_things(per_frame, images[0].width, images[0].height);
  }

  // localized layered optimization, tracks in parallel
  res.things.resize(tracks.size());
  {
    detail::StageTimer timer{report->stage_ms, "things"};
    detail::parallel_for(tracks.size(), opts.jobs, [&](size_t i) {
      res.things[i] = optimize_thing(tracks[i], images, init_flows, weights,
                                     opts.layered, opts.space);
    });
  }
  for (size_t i = 0; i < res.things.size(); ++i) {
    RunReport::Track tr;
    tr.window = window_index;
    tr.index = static_cast<int>(i);
    tr.cls = res.things[i].cls;
    tr.refined = res.things[i].refined;
    tr.energy_trace = res.things[i].energy_trace;
    report->tracks.push_back(std::move(tr));
  }

  // planes + composition per pair
  for (int t = 0; t < T - 1; ++t) {
    std::vector<PlaneRegionFlow> planes;
    {
      detail::StageTimer timer{report->stage_ms, "planes"};
      planes = fit_planes(segs[t], init_flows[t], tax, opts.ransac,
                          opts.seed + 7919 * (first_frame + t));
    }
    detail::StageTimer timer{report->stage_ms, "compose"};
    res.pairs.push_back(
        compose(init_flows[t], planes, res.things, t, segs[t], tax));
    for (const SourceTag tag : res.pairs.back().map.tag)
      ++report->tag_histogram[detail::tag_name(tag)];
  }
  for (int t = 0; t < T; ++t)
    res.refined_labels.push_back(refine_labels(segs[t], res.things, t));
  return res;
}

/// Full manifest run. Writes per-pair flow files (flow_%04d.flo or .png),
/// refined label maps, optional visualizations, and report.txt into the
/// output directory. Returns the report.
inline RunReport run_refine(const SequenceManifest& manifest,
                            const PipelineOptions& opts) {
  namespace fs = std::filesystem;
  const ClassTaxonomy tax = ClassTaxonomy::standard();
  EnergyWeights weights = EnergyWeights::defaults();
  for (const auto& [k, v] : manifest.weight_overrides)
    apply_weight_override(weights, k, v);
  for (const auto& [k, v] : opts.weight_overrides)
    apply_weight_override(weights, k, v);
  weights.validate();

  const int N = static_cast<int>(manifest.frames.size());
  const int T = opts.window_override > 0 ? opts.window_override : manifest.window;
  if (T < 2) throw std::invalid_argument("run_refine: window must be >= 2");

  fs::path out_dir(manifest.output_dir);
  if (out_dir.is_relative()) out_dir = manifest.base_dir / out_dir;
  fs::create_directories(out_dir);

  RunReport report;
  std::vector<ImageBuf> images(N);
  std::vector<SegMap> segs(N);
  std::vector<FlowField> flows(N - 1);
  {
    detail::StageTimer timer{report.stage_ms, "load"};
    for (int i = 0; i < N; ++i) {
      images[i] = read_image(manifest.frames[i].image);
      segs[i] = read_labels(manifest.frames[i].labels, tax);
      if (!images[i].same_size(ImageBuf(segs[i].width, segs[i].height, 1)))
        throw std::runtime_error("run_refine: image/label size mismatch at frame " +
                                 std::to_string(i));
      if (i > 0 && (images[i].width != images[0].width ||
                    images[i].height != images[0].height))
        throw std::runtime_error("run_refine: frame size changes at frame " +
                                 std::to_string(i));
      if (i < N - 1) {
        const std::string& fp = manifest.frames[i].flow;
        flows[i] = fp.ends_with(".png") ? read_kitti_flow(fp) : read_flo(fp);
        if (flows[i].width != images[i].width ||
            flows[i].height != images[i].height)
          throw std::runtime_error("run_refine: flow size mismatch at frame " +
                                   std::to_string(i));
      }
    }
  }

  // Non-overlapping windows tile the frames; the trailing window shrinks
  // when >= 2 frames remain. Pairs that straddle a window boundary (frame
  // kT-1 -> kT) belong to no window and pass through unrefined.
  std::vector<uint8_t> pair_covered(static_cast<size_t>(N - 1), 0);
  int window_index = 0;
  for (int start = 0; start + 1 < N; start += T, ++window_index) {
    const int len = std::min(T, N - start);
    if (len < 2) break;
    const std::vector<ImageBuf> wi(images.begin() + start,
                                   images.begin() + start + len);
    const std::vector<SegMap> ws(segs.begin() + start, segs.begin() + start + len);
    const std::vector<FlowField> wf(flows.begin() + start,
                                    flows.begin() + start + len - 1);
    const WindowResult wr = process_window(wi, ws, wf, tax, weights, opts,
                                           &report, window_index, start);

    detail::StageTimer timer{report.stage_ms, "write"};
    char buf[64];
    for (int t = 0; t < wr.frames - 1; ++t) {
      const int pair = start + t;
      pair_covered[pair] = 1;
      if (opts.kitti_output) {
        std::snprintf(buf, sizeof(buf), "flow_%04d.png", pair);
        write_kitti_flow(wr.pairs[t].flow, (out_dir / buf).string());
      } else {
        std::snprintf(buf, sizeof(buf), "flow_%04d.flo", pair);
        write_flo(wr.pairs[t].flow, (out_dir / buf).string());
      }
      if (opts.write_visualization) {
        std::snprintf(buf, sizeof(buf), "flow_%04d_viz.png", pair);
        write_flow_visualization(wr.pairs[t].flow, (out_dir / buf).string());
      }
    }
    for (int t = 0; t < wr.frames; ++t) {
      std::snprintf(buf, sizeof(buf), "labels_%04d.png", start + t);
      write_labels(wr.refined_labels[t], (out_dir / buf).string());
    }
  }

  {
    detail::StageTimer timer{report.stage_ms, "write"};
    char buf[64];
    size_t uncovered = 0;
    for (int pair = 0; pair < N - 1; ++pair) {
      if (pair_covered[pair]) continue;
      ++uncovered;
      if (opts.kitti_output) {
        std::snprintf(buf, sizeof(buf), "flow_%04d.png", pair);
        write_kitti_flow(flows[pair], (out_dir / buf).string());
      } else {
        std::snprintf(buf, sizeof(buf), "flow_%04d.flo", pair);
        write_flo(flows[pair], (out_dir / buf).string());
      }
    }
    if (uncovered > 0)
      report.metrics["uncovered_passthrough_pairs"] =
          static_cast<double>(uncovered);
  }

  // pipeline-level re-assertion of the optimizer contract
  for (const auto& tr : report.tracks)
    for (size_t i = 1; i < tr.energy_trace.size(); ++i)
      if (tr.energy_trace[i] >
          tr.energy_trace[i - 1] +
              1e-9 * std::max(1.0, std::fabs(tr.energy_trace[i - 1])))
        throw std::runtime_error("run_refine: non-monotone energy trace");

  report.write((out_dir / "report.txt").string());
  return report;
}

/// Directory-level evaluation: estimated flow files against ground-truth
/// files matched by index-bearing names, optional fg/nocc mask directories.
struct EvalOptions {
  std::string fg_mask_dir;    // gt masks named fg_%03d.png (optional)
  std::string nocc_mask_dir;  // nocc_%03d.png (optional)
};

inline std::vector<std::pair<std::string, FlowMetrics>> run_eval(
    const std::string& est_dir, const std::string& gt_dir,
    const EvalOptions& eopts = {}) {
  namespace fs = std::filesystem;
  std::vector<std::string> est_files;
  for (const auto& e : fs::directory_iterator(est_dir)) {
    const std::string name = e.path().filename().string();
    if (name.ends_with(".flo") ||
        (name.ends_with(".png") && name.rfind("flow", 0) == 0))
      est_files.push_back(e.path().string());
  }
  std::sort(est_files.begin(), est_files.end());
  if (est_files.empty())
    throw std::runtime_error("run_eval: no flow files in " + est_dir);

  std::vector<std::pair<std::string, FlowMetrics>> out;
  int index = 0;
  for (const auto& ef : est_files) {
    const std::string stem = fs::path(ef).stem().string();
    // digits at the end of the stem index the pair
    size_t pos = stem.find_last_not_of("0123456789");
    const int pair = pos + 1 < stem.size() ? std::stoi(stem.substr(pos + 1)) : index;
    ++index;

    auto find_gt = [&](const std::string& dir, const char* stem_fmt,
                       int n) -> std::string {
      char buf[64];
      std::snprintf(buf, sizeof(buf), stem_fmt, n);
      for (const char* ext : {".flo", ".png"}) {
        const fs::path p = fs::path(dir) / (std::string(buf) + ext);
        if (fs::exists(p)) return p.string();
      }
      return {};
    };
    std::string gtf = find_gt(gt_dir, "flow_%03d", pair);
    if (gtf.empty()) gtf = find_gt(gt_dir, "flow_%04d", pair);
    if (gtf.empty())
      throw std::runtime_error("run_eval: no ground truth for " + ef);

    const FlowField est = ef.ends_with(".png") ? read_kitti_flow(ef) : read_flo(ef);
    const FlowField gt = gtf.ends_with(".png") ? read_kitti_flow(gtf) : read_flo(gtf);

    auto load_mask = [&](const std::string& dir, const char* fmt) {
      std::optional<Mask> m;
      if (dir.empty()) return m;
      char buf[64];
      std::snprintf(buf, sizeof(buf), fmt, pair);
      const fs::path p = fs::path(dir) / buf;
      if (!fs::exists(p)) return m;
      const PngImage png = read_png(p.string());
      Mask mm(png.width, png.height);
      for (size_t i = 0; i < mm.data.size(); ++i)
        mm.data[i] = png.pixels[i] > 0;
      m = std::move(mm);
      return m;
    };
    const auto fg = load_mask(eopts.fg_mask_dir, "fg_%03d.png");
    const auto nocc = load_mask(eopts.nocc_mask_dir, "nocc_%03d.png");
    out.emplace_back(fs::path(ef).filename().string(),
                     fl_outlier_rate(est, gt, fg ? &*fg : nullptr,
                                     nocc ? &*nocc : nullptr));
  }
  return out;
}

inline void write_eval_report(
    const std::vector<std::pair<std::string, FlowMetrics>>& results,
    std::ostream& out) {
  auto emit = [&](const std::string& name, const char* which,
                  const std::optional<FlowMetrics::Entry>& e) {
    if (!e) return;
    out << name << "." << which << ".epe " << e->epe << "\n";
    out << name << "." << which << ".fl " << e->fl << "\n";
    out << name << "." << which << ".pixels " << e->pixels << "\n";
  };
  FlowMetrics::Entry agg;
  double epe_w = 0, fl_w = 0;
  for (const auto& [name, m] : results) {
    emit(name, "all", m.all);
    emit(name, "bg", m.bg);
    emit(name, "fg", m.fg);
    emit(name, "nocc", m.nocc);
    if (m.all) {
      epe_w += m.all->epe * m.all->pixels;
      fl_w += m.all->fl * m.all->pixels;
      agg.pixels += m.all->pixels;
    }
  }
  if (agg.pixels > 0) {
    out << "aggregate.all.epe " << epe_w / agg.pixels << "\n";
    out << "aggregate.all.fl " << fl_w / agg.pixels << "\n";
    out << "aggregate.all.pixels " << agg.pixels << "\n";
  }
}

}  // namespace sof
