#pragma once

// File interchange: Middlebury .flo flow files (bit-exact), the KITTI
// 16-bit PNG flow convention, indexed PNG label maps, 8/16-bit PNG images,
// flow color visualization, and the sequence manifest that drives the
// pipeline. Readers/writers are reentrant and keep no shared state.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "sof/core.hpp"

namespace sof {

// ---------------------------------------------------------------------------
// PNG plumbing (libpng). Samples are held as uint16 regardless of depth.
// ---------------------------------------------------------------------------

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  int bit_depth = 8;  // 8 or 16
  std::vector<uint16_t> pixels;  // interleaved, row-major

  uint16_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

namespace detail {

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Reads an 8- or 16-bit PNG. Palette images are returned as the raw palette
/// indices (one channel), which is what indexed label maps need. Alpha is
/// stripped.
inline PngImage read_png(const std::string& path) {
  detail::FileCloser fc;
  fc.f = std::fopen(path.c_str(), "rb");
  if (!fc.f) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("read_png: init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("read_png: init failure");
  }

  PngImage out;
  std::vector<uint8_t> raw;
  std::vector<png_bytep> rows;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: corrupt PNG " + path);
  }

  png_init_io(png, fc.f);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) {
    // keep indices; just unpack sub-byte packing
    if (depth < 8) png_set_packing(png);
  } else {
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
      png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  const int channels = png_get_channels(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  const size_t stride = png_get_rowbytes(png, info);

  raw.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.width = static_cast<int>(w);
  out.height = static_cast<int>(h);
  out.channels = channels;
  out.bit_depth = out_depth == 16 ? 16 : 8;
  out.pixels.resize(static_cast<size_t>(w) * h * channels);
  if (out.bit_depth == 16) {
    for (size_t i = 0; i < out.pixels.size(); ++i)  // PNG is big-endian
      out.pixels[i] = static_cast<uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  } else {
    for (size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = raw[i];
  }
  return out;
}

inline void write_png(const std::string& path, int width, int height,
                      int channels, int bit_depth, const uint16_t* pixels) {
  if (width <= 0 || height <= 0 || (channels != 1 && channels != 3) ||
      (bit_depth != 8 && bit_depth != 16))
    throw std::invalid_argument("write_png: bad parameters");

  detail::FileCloser fc;
  fc.f = std::fopen(path.c_str(), "wb");
  if (!fc.f) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("write_png: init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("write_png: init failure");
  }

  const size_t n = static_cast<size_t>(width) * height * channels;
  std::vector<uint8_t> raw(n * (bit_depth / 8));
  if (bit_depth == 16) {
    for (size_t i = 0; i < n; ++i) {
      raw[2 * i] = static_cast<uint8_t>(pixels[i] >> 8);
      raw[2 * i + 1] = static_cast<uint8_t>(pixels[i] & 0xff);
    }
  } else {
    for (size_t i = 0; i < n; ++i)
      raw[i] = static_cast<uint8_t>(std::min<uint16_t>(pixels[i], 255));
  }
  std::vector<png_bytep> rows(height);
  const size_t stride = static_cast<size_t>(width) * channels * (bit_depth / 8);
  for (int y = 0; y < height; ++y) rows[y] = raw.data() + y * stride;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: write failure " + path);
  }

  png_init_io(png, fc.f);
  png_set_IHDR(png, info, width, height, bit_depth,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Middlebury .flo
// ---------------------------------------------------------------------------

constexpr float kFloMagic = 202021.25f;  // "PIEH" as a little-endian float
constexpr float kFloUnknown = 1e10f;     // sentinel for invalid pixels

/// Little-endian binary layout: float magic, int32 width, int32 height,
/// then row-major interleaved float32 (u,v). Values with magnitude above
/// 1e9 mark invalid pixels; stored values are preserved verbatim so a
/// read-write cycle reproduces the payload byte for byte.
inline FlowField read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_flo: cannot open " + path);
  float magic = 0.f;
  int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || magic != kFloMagic)
    throw std::runtime_error("read_flo: bad magic in " + path);
  if (w <= 0 || h <= 0)
    throw std::runtime_error("read_flo: nonpositive dimensions in " + path);
  FlowField f(w, h);
  std::vector<float> row(static_cast<size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), row.size() * 4);
    if (!in) throw std::runtime_error("read_flo: truncated payload in " + path);
    for (int x = 0; x < w; ++x) {
      const float u = row[2 * x], v = row[2 * x + 1];
      f.u_at(x, y) = u;
      f.v_at(x, y) = v;
      f.valid_at(x, y) =
          std::isfinite(u) && std::isfinite(v) && std::fabs(u) < 1e9f &&
          std::fabs(v) < 1e9f;
    }
  }
  return f;
}

inline void write_flo(const FlowField& flow, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_flo: cannot open " + path);
  const float magic = kFloMagic;
  const int32_t w = flow.width, h = flow.height;
  out.write(reinterpret_cast<const char*>(&magic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> row(static_cast<size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float u = flow.u_at(x, y), v = flow.v_at(x, y);
      if (!flow.valid_at(x, y)) {
        // preserve already-sentinel payloads so round trips stay bit-exact
        if (std::isfinite(u) && std::fabs(u) < 1e9f) u = kFloUnknown;
        if (std::isfinite(v) && std::fabs(v) < 1e9f) v = kFloUnknown;
      }
      row[2 * x] = u;
      row[2 * x + 1] = v;
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size() * 4);
  }
  if (!out) throw std::runtime_error("write_flo: write failure " + path);
}

// ---------------------------------------------------------------------------
// KITTI 16-bit PNG flow
// ---------------------------------------------------------------------------

/// Channels store round(u*64 + 2^15), round(v*64 + 2^15), validity in {0,1}.
inline FlowField read_kitti_flow(const std::string& path) {
  const PngImage png = read_png(path);
  if (png.bit_depth != 16 || png.channels != 3)
    throw std::runtime_error("read_kitti_flow: " + path +
                             " is not a 16-bit 3-channel PNG");
  FlowField f(png.width, png.height);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) {
      if (png.at(x, y, 2) > 0) {
        f.u_at(x, y) = (static_cast<float>(png.at(x, y, 0)) - 32768.f) / 64.f;
        f.v_at(x, y) = (static_cast<float>(png.at(x, y, 1)) - 32768.f) / 64.f;
        f.valid_at(x, y) = 1;
      } else {
        f.u_at(x, y) = 0.f;
        f.v_at(x, y) = 0.f;
        f.valid_at(x, y) = 0;
      }
    }
  return f;
}

inline void write_kitti_flow(const FlowField& flow, const std::string& path) {
  PngImage png;
  png.width = flow.width;
  png.height = flow.height;
  png.channels = 3;
  png.bit_depth = 16;
  png.pixels.assign(static_cast<size_t>(flow.width) * flow.height * 3, 0);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const size_t i = (static_cast<size_t>(y) * flow.width + x) * 3;
      if (!flow.valid_at(x, y)) continue;  // stays (0,0,0)
      const double u = flow.u_at(x, y), v = flow.v_at(x, y);
      if (std::fabs(u) > 511.0 || std::fabs(v) > 511.0)
        throw std::runtime_error(
            "write_kitti_flow: displacement exceeds fixed-point range");
      png.pixels[i] = static_cast<uint16_t>(std::lround(u * 64.0 + 32768.0));
      png.pixels[i + 1] = static_cast<uint16_t>(std::lround(v * 64.0 + 32768.0));
      png.pixels[i + 2] = 1;
    }
  write_png(path, png.width, png.height, 3, 16, png.pixels.data());
}

// ---------------------------------------------------------------------------
// Label maps and plain images
// ---------------------------------------------------------------------------

/// Single-channel indexed image whose values are taxonomy identifiers.
inline SegMap read_labels(const std::string& path, const ClassTaxonomy& tax) {
  const PngImage png = read_png(path);
  if (png.channels != 1 || png.bit_depth != 8)
    throw std::runtime_error("read_labels: " + path +
                             " is not an 8-bit single-channel PNG");
  SegMap seg(png.width, png.height);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) {
      const uint16_t v = png.at(x, y);
      if (v >= label::kCount)
        throw std::runtime_error("read_labels: label value " +
                                 std::to_string(v) + " outside taxonomy in " +
                                 path);
      tax.category(static_cast<uint8_t>(v));  // total by construction
      seg.at(x, y) = static_cast<uint8_t>(v);
    }
  return seg;
}

inline void write_labels(const SegMap& seg, const std::string& path) {
  std::vector<uint16_t> px(seg.labels.begin(), seg.labels.end());
  write_png(path, seg.width, seg.height, 1, 8, px.data());
}

/// 8/16-bit gray or RGB PNG -> intensities normalized to [0,1].
inline ImageBuf read_image(const std::string& path) {
  const PngImage png = read_png(path);
  if (png.channels != 1 && png.channels != 3)
    throw std::runtime_error("read_image: unsupported channel count in " + path);
  ImageBuf img(png.width, png.height, png.channels);
  const float scale = png.bit_depth == 16 ? 1.f / 65535.f : 1.f / 255.f;
  for (size_t i = 0; i < png.pixels.size(); ++i)
    img.data[i] = png.pixels[i] * scale;
  return img;
}

inline void write_image(const ImageBuf& img, const std::string& path) {
  std::vector<uint16_t> px(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i)
    px[i] = static_cast<uint16_t>(
        std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  write_png(path, img.width, img.height, img.channels, 8, px.data());
}

// ---------------------------------------------------------------------------
// Flow color visualization
// ---------------------------------------------------------------------------

/// Color wheel: hue encodes direction, saturation encodes magnitude relative
/// to max_magnitude (auto-computed over valid pixels when <= 0). Zero flow is
/// white; invalid pixels are black.
inline void write_flow_visualization(const FlowField& flow,
                                     const std::string& path,
                                     double max_magnitude = 0.0) {
  double maxmag = max_magnitude;
  if (maxmag <= 0.0) {
    for (int y = 0; y < flow.height; ++y)
      for (int x = 0; x < flow.width; ++x)
        if (flow.valid_at(x, y))
          maxmag = std::max(maxmag, std::hypot(double(flow.u_at(x, y)),
                                               double(flow.v_at(x, y))));
    if (maxmag < 1e-9) maxmag = 1.0;
  }
  ImageBuf img(flow.width, flow.height, 3);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      if (!flow.valid_at(x, y)) continue;  // black
      const double u = flow.u_at(x, y), v = flow.v_at(x, y);
      const double mag = std::hypot(u, v);
      double hue = std::atan2(v, u) / (2.0 * 3.14159265358979323846);  // [-0.5,0.5]
      if (hue < 0) hue += 1.0;
      const double sat = std::min(1.0, mag / maxmag);
      // HSV -> RGB with value = 1
      const double h6 = hue * 6.0;
      const int sector = std::min(5, static_cast<int>(h6));
      const double f = h6 - sector;
      const double p = 1.0 - sat;
      const double q = 1.0 - sat * f;
      const double t = 1.0 - sat * (1.0 - f);
      double r = 1, g = 1, b = 1;
      switch (sector) {
        case 0: r = 1; g = t; b = p; break;
        case 1: r = q; g = 1; b = p; break;
        case 2: r = p; g = 1; b = t; break;
        case 3: r = p; g = q; b = 1; break;
        case 4: r = t; g = p; b = 1; break;
        default: r = 1; g = p; b = q; break;
      }
      img.at(x, y, 0) = static_cast<float>(r);
      img.at(x, y, 1) = static_cast<float>(g);
      img.at(x, y, 2) = static_cast<float>(b);
    }
  write_image(img, path);
}

// ---------------------------------------------------------------------------
// Sequence manifest
// ---------------------------------------------------------------------------

struct FrameEntry {
  std::string image;
  std::string labels;
  std::string flow;  // frame t -> t+1; empty for the last frame
};

/// One text file drives a pipeline run. Format, one directive per line:
///   T <frames-per-window>
///   output_dir <path>
///   weight <name> <value>        (optional EnergyWeights overrides)
///   frame <image> <labels> [<initial-flow>]
/// '#' starts a comment. Paths are resolved relative to the manifest file.
struct SequenceManifest {
  std::vector<FrameEntry> frames;
  int window = 5;
  std::string output_dir = "refined";
  std::unordered_map<std::string, double> weight_overrides;
  std::filesystem::path base_dir;
};

inline void apply_weight_override(EnergyWeights& w, const std::string& name,
                                  double value) {
  if (name == "lambda_d") w.lambda_d = value;
  else if (name == "lambda_motion") w.lambda_motion = value;
  else if (name == "lambda_time") w.lambda_time = value;
  else if (name == "lambda_layer") w.lambda_layer = value;
  else if (name == "lambda_space") w.lambda_space = value;
  else if (name == "lambda_aff") w.lambda_aff = value;
  else if (name == "count_shared_once") w.count_shared_once = value != 0.0;
  else if (name.rfind("lambda_aff.", 0) == 0) {
    const std::string cls = name.substr(11);
    for (uint8_t id = 0; id < label::kCount; ++id)
      if (cls == label_name(id)) {
        w.lambda_aff_class[id] = value;
        return;
      }
    throw std::invalid_argument("unknown class in weight override: " + name);
  } else {
    throw std::invalid_argument("unknown weight name: " + name);
  }
  w.validate();
}

inline SequenceManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
  SequenceManifest m;
  m.base_dir = std::filesystem::absolute(path).parent_path();

  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_relative()) fp = m.base_dir / fp;
    if (!std::filesystem::exists(fp))
      throw std::runtime_error("load_manifest: missing file " + fp.string());
    return fp.string();
  };

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    if (key == "T") {
      if (!(ls >> m.window))
        throw std::runtime_error("load_manifest: bad T at " + where);
    } else if (key == "output_dir") {
      if (!(ls >> m.output_dir))
        throw std::runtime_error("load_manifest: bad output_dir at " + where);
    } else if (key == "weight") {
      std::string name;
      double value;
      if (!(ls >> name >> value))
        throw std::runtime_error("load_manifest: bad weight at " + where);
      EnergyWeights probe = EnergyWeights::defaults();
      apply_weight_override(probe, name, value);  // validates the name
      m.weight_overrides[name] = value;
    } else if (key == "frame") {
      FrameEntry fe;
      std::string flow;
      if (!(ls >> fe.image >> fe.labels))
        throw std::runtime_error("load_manifest: bad frame at " + where);
      fe.image = resolve(fe.image);
      fe.labels = resolve(fe.labels);
      if (ls >> flow) fe.flow = resolve(flow);
      m.frames.push_back(std::move(fe));
    } else {
      throw std::runtime_error("load_manifest: unknown directive '" + key +
                               "' at " + where);
    }
  }
  if (m.frames.size() < 2)
    throw std::runtime_error("load_manifest: need at least 2 frames");
  if (m.window < 2) throw std::runtime_error("load_manifest: T must be >= 2");
  for (size_t i = 0; i + 1 < m.frames.size(); ++i)
    if (m.frames[i].flow.empty())
      throw std::runtime_error("load_manifest: frame " + std::to_string(i) +
                               " is missing its initial flow");
  return m;
}

inline void save_manifest(const SequenceManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
  out << "T " << m.window << "\n";
  out << "output_dir " << m.output_dir << "\n";
  for (const auto& [name, value] : m.weight_overrides)
    out << "weight " << name << " " << value << "\n";
  for (const auto& fe : m.frames) {
    out << "frame " << fe.image << " " << fe.labels;
    if (!fe.flow.empty()) out << " " << fe.flow;
    out << "\n";
  }
}

}  // namespace sof
