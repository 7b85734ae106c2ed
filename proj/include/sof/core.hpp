#pragma once

// Core value types shared by the whole pipeline: image buffers, dense flow
// fields, label maps, the Thing/Plane/Stuff taxonomy, robust penalties and
// bilinear warping. Everything here is immutable-after-construction value
// data plus pure functions, safe to share across workers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sof {

// ---------------------------------------------------------------------------
// Image / mask / flow buffers
// ---------------------------------------------------------------------------

/// Row-major float image, 1 or 3 channels, intensities normalized to [0,1].
struct ImageBuf {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> data;

  ImageBuf() = default;
  ImageBuf(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {
    if (w <= 0 || h <= 0 || (c != 1 && c != 3))
      throw std::invalid_argument("ImageBuf: bad dimensions");
  }

  size_t pixels() const { return static_cast<size_t>(width) * height; }
  float& at(int x, int y, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  bool same_size(const ImageBuf& o) const {
    return width == o.width && height == o.height;
  }
};

/// Binary pixel set over a w*h grid. 1 = member.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int w, int h, uint8_t fill = 0)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

  uint8_t& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int x, int y) const {
    return data[static_cast<size_t>(y) * width + x];
  }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : data) n += (v != 0);
    return n;
  }
  bool empty_set() const { return count() == 0; }
};

/// Dense per-pixel displacement field (u,v) in pixels with a validity mask.
/// Components are stored as float32, matching the interchange formats.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> u;
  std::vector<float> v;
  std::vector<uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h)
      : width(w), height(h), u(static_cast<size_t>(w) * h, 0.f),
        v(static_cast<size_t>(w) * h, 0.f),
        valid(static_cast<size_t>(w) * h, 1) {}

  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
  float& u_at(int x, int y) { return u[idx(x, y)]; }
  float& v_at(int x, int y) { return v[idx(x, y)]; }
  float u_at(int x, int y) const { return u[idx(x, y)]; }
  float v_at(int x, int y) const { return v[idx(x, y)]; }
  uint8_t& valid_at(int x, int y) { return valid[idx(x, y)]; }
  uint8_t valid_at(int x, int y) const { return valid[idx(x, y)]; }
  bool same_size(const FlowField& o) const {
    return width == o.width && height == o.height;
  }
};

// ---------------------------------------------------------------------------
// Label taxonomy
// ---------------------------------------------------------------------------

enum class Category : uint8_t { Thing, Plane, Stuff };

// The 22-class label set: identifier 0 is reserved for "unknown".
namespace label {
constexpr uint8_t Unknown = 0;
constexpr uint8_t Aeroplane = 1;
constexpr uint8_t Bicycle = 2;
constexpr uint8_t Bird = 3;
constexpr uint8_t Boat = 4;
constexpr uint8_t Bus = 5;
constexpr uint8_t Car = 6;
constexpr uint8_t Cat = 7;
constexpr uint8_t Cow = 8;
constexpr uint8_t Dog = 9;
constexpr uint8_t Horse = 10;
constexpr uint8_t Motorbike = 11;
constexpr uint8_t Sheep = 12;
constexpr uint8_t Train = 13;
constexpr uint8_t Person = 14;
constexpr uint8_t Road = 15;
constexpr uint8_t Sky = 16;
constexpr uint8_t Water = 17;
constexpr uint8_t Building = 18;
constexpr uint8_t Grass = 19;
constexpr uint8_t Tree = 20;
constexpr uint8_t Vegetation = 21;
constexpr int kCount = 22;
}  // namespace label

/// Total mapping class identifier -> {Thing, Plane, Stuff}.
/// Things are the independently moving object classes, Planes the large
/// roughly-planar background classes (road, sky, water), Stuff everything
/// else including unknown.
struct ClassTaxonomy {
  std::array<Category, label::kCount> category_of;

  static ClassTaxonomy standard() {
    ClassTaxonomy t;
    t.category_of.fill(Category::Stuff);
    for (uint8_t id = label::Aeroplane; id <= label::Person; ++id)
      t.category_of[id] = Category::Thing;
    t.category_of[label::Road] = Category::Plane;
    t.category_of[label::Sky] = Category::Plane;
    t.category_of[label::Water] = Category::Plane;
    return t;
  }

  Category category(uint8_t id) const {
    if (id >= label::kCount)
      throw std::out_of_range("ClassTaxonomy: identifier " +
                              std::to_string(int(id)) + " outside taxonomy");
    return category_of[id];
  }
  bool is_thing(uint8_t id) const { return category(id) == Category::Thing; }
  bool is_plane(uint8_t id) const { return category(id) == Category::Plane; }
};

inline Category categorize(uint8_t id, const ClassTaxonomy& tax) {
  return tax.category(id);
}

inline const char* label_name(uint8_t id) {
  static const char* names[label::kCount] = {
      "unknown", "aeroplane", "bicycle",   "bird",  "boat",  "bus",
      "car",     "cat",       "cow",       "dog",   "horse", "motorbike",
      "sheep",   "train",     "person",    "road",  "sky",   "water",
      "building", "grass",    "tree",      "vegetation"};
  if (id >= label::kCount) throw std::out_of_range("label_name: bad identifier");
  return names[id];
}

/// Per-pixel semantic label grid over the taxonomy above.
struct SegMap {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> labels;

  SegMap() = default;
  SegMap(int w, int h, uint8_t fill = label::Unknown)
      : width(w), height(h), labels(static_cast<size_t>(w) * h, fill) {}

  uint8_t& at(int x, int y) {
    return labels[static_cast<size_t>(y) * width + x];
  }
  uint8_t at(int x, int y) const {
    return labels[static_cast<size_t>(y) * width + x];
  }
};

// ---------------------------------------------------------------------------
// Robust penalties and energy weights
// ---------------------------------------------------------------------------

/// Generalized Charbonnier penalty rho(x) = (x^2 + eps^2)^a - eps^(2a).
/// rho(0) = 0, even, monotone nondecreasing in |x|. a = 1 gives exactly x^2.
struct RobustPenalty {
  double exponent = 0.45;  // a in (0,1]
  double epsilon = 1e-3;   // > 0

  double operator()(double x) const {
    return std::pow(x * x + epsilon * epsilon, exponent) -
           std::pow(epsilon * epsilon, exponent);
  }
  // IRLS weight w(x) with rho(x) ~ w(x)*x^2 + const near the current point:
  // w = rho'(x) / (2x) = a * (x^2 + eps^2)^(a-1).
  double weight(double x) const {
    return exponent * std::pow(x * x + epsilon * epsilon, exponent - 1.0);
  }

  static RobustPenalty charbonnier() { return {0.45, 1e-3}; }
  static RobustPenalty quadratic() { return {1.0, 1e-3}; }
};

inline double rho(double x, const RobustPenalty& p) { return p(x); }

/// All lambda coefficients of the localized layered energy plus the
/// per-class rigidity overrides. The paper's references leave the numeric
/// values open; these defaults are artifact configuration, overridable from
/// the manifest and the CLI.
struct EnergyWeights {
  // Occlusion penalty below the typical wrong-correspondence appearance
  // cost, so labeling a pixel occluded is cheaper than explaining a bad
  // match photometrically.
  double lambda_d = 0.15;
  double lambda_motion = 1.0;
  double lambda_time = 0.2;
  double lambda_layer = 0.2;
  // The fully connected kernel couples each pixel to ~2*pi*sigma_s^2 others
  // (~1.4e3 at the default sigma_s), so the per-pixel scale of the space
  // term is lambda_space * kernel mass; 2e-4 puts it at the same order as
  // the other per-pixel terms.
  double lambda_space = 5e-4;
  double lambda_aff = 0.5;     // deformable-class default
  // Rigid classes deviate less from affine, so they pay 10x the default.
  std::unordered_map<uint8_t, double> lambda_aff_class;
  // Eq. 1 sums the g-only terms (layer, space) over both layers although they
  // do not depend on k; this switch counts them once instead.
  bool count_shared_once = false;

  static EnergyWeights defaults() {
    EnergyWeights w;
    const uint8_t rigid[] = {label::Car, label::Bus, label::Train,
                             label::Aeroplane, label::Boat};
    for (uint8_t id : rigid) w.lambda_aff_class[id] = 10.0 * w.lambda_aff;
    return w;
  }

  double lambda_aff_for(uint8_t cls) const {
    auto it = lambda_aff_class.find(cls);
    return it == lambda_aff_class.end() ? lambda_aff : it->second;
  }

  void validate() const {
    const double all[] = {lambda_d,     lambda_motion, lambda_time,
                          lambda_layer, lambda_space,  lambda_aff};
    for (double v : all)
      if (!(v >= 0.0)) throw std::invalid_argument("EnergyWeights: negative weight");
    for (const auto& [id, v] : lambda_aff_class)
      if (!(v >= 0.0)) throw std::invalid_argument("EnergyWeights: negative weight");
  }
};

// ---------------------------------------------------------------------------
// Sampling and warping
// ---------------------------------------------------------------------------

/// Bilinear sample at (x,y) in double precision; caller guarantees
/// 0 <= x <= W-1, 0 <= y <= H-1.
inline double bilinear_sample(const ImageBuf& img, double x, double y,
                              int c = 0) {
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  x0 = std::clamp(x0, 0, img.width - 1);
  y0 = std::clamp(y0, 0, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double v00 = img.at(x0, y0, c), v10 = img.at(x1, y0, c);
  const double v01 = img.at(x0, y1, c), v11 = img.at(x1, y1, c);
  return (1 - fy) * ((1 - fx) * v00 + fx * v10) +
         fy * ((1 - fx) * v01 + fx * v11);
}

inline float bilinear_at(const ImageBuf& img, double x, double y, int c = 0) {
  return static_cast<float>(bilinear_sample(img, x, y, c));
}

inline bool in_bilinear_domain(int w, int h, double x, double y) {
  return x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
}

struct WarpResult {
  ImageBuf image;
  Mask valid;
};

/// Backward warp: output(x,y) = bilinear img(x + u, y + v). Samples falling
/// outside the frame (or displaced by an invalid flow pixel) are flagged
/// invalid and left at zero.
inline WarpResult warp(const ImageBuf& img, const FlowField& flow) {
  if (img.width != flow.width || img.height != flow.height)
    throw std::invalid_argument("warp: image/flow dimension mismatch");
  WarpResult out{ImageBuf(img.width, img.height, img.channels, 0.f),
                 Mask(img.width, img.height, 0)};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!flow.valid_at(x, y)) continue;
      const double sx = x + flow.u_at(x, y);
      const double sy = y + flow.v_at(x, y);
      if (!in_bilinear_domain(img.width, img.height, sx, sy)) continue;
      out.valid.at(x, y) = 1;
      for (int c = 0; c < img.channels; ++c)
        out.image.at(x, y, c) = bilinear_at(img, sx, sy, c);
    }
  }
  return out;
}

/// Rec.601 luminance; 1-channel images pass through unchanged.
inline ImageBuf luminance(const ImageBuf& img) {
  if (img.channels == 1) return img;
  ImageBuf out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(x, y) = 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) +
                     0.114f * img.at(x, y, 2);
  return out;
}

}  // namespace sof
