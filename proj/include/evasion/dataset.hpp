#ifndef EVASION_DATASET_HPP
#define EVASION_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "evasion/errors.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

struct LabeledImage {
  Tensor image;
  std::size_t label = 0;
};

struct LabeledDataset {
  std::vector<LabeledImage> items;
  std::size_t n_classes = 0;
  Shape input_shape;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }

  void validate() const {
    std::vector<bool> seen(n_classes, false);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      if (it.image.shape() != input_shape) {
        throw DimensionError("item " + std::to_string(i) + " has shape " +
                             it.image.shape().str());
      }
      if (it.label >= n_classes) {
        throw DomainError("item " + std::to_string(i) + " label " + std::to_string(it.label) +
                          " >= " + std::to_string(n_classes));
      }
      if (!in_unit_range(it.image)) {
        throw ArgumentError("item " + std::to_string(i) + " leaves [0,1]");
      }
      seen[it.label] = true;
    }
    if (!items.empty() && std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw ArgumentError("dataset is missing at least one class");
    }
  }
};

// --- Gaussian blobs --------------------------------------------------------

/// Points around class centroids spaced evenly on a circle. The default
/// centroid radius is four noise standard deviations.
struct BlobSpec {
  std::size_t n_classes = 3;
  std::size_t points_per_class = 100;
  double centroid_radius = 4.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

inline LabeledDataset make_blobs(const BlobSpec& spec) {
  if (spec.n_classes < 2) throw ArgumentError("blobs need n_classes >= 2");
  if (!(spec.noise_sigma > 0.0)) throw ArgumentError("blobs need noise_sigma > 0");
  if (spec.points_per_class == 0) throw ArgumentError("blobs need points_per_class >= 1");

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::vector<std::array<double, 2>> points;
  std::vector<std::size_t> labels;
  for (std::size_t k = 0; k < spec.points_per_class; ++k) {
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                           static_cast<double>(spec.n_classes);
      const double x = spec.centroid_radius * std::cos(angle) + noise(rng);
      const double y = spec.centroid_radius * std::sin(angle) + noise(rng);
      points.push_back({x, y});
      labels.push_back(c);
    }
  }

  // Isotropic rescale into [0.05, 0.95]^2 so geometry (and the 2-D L-inf
  // picture) is preserved.
  double lo_x = points[0][0], hi_x = lo_x, lo_y = points[0][1], hi_y = lo_y;
  for (const auto& p : points) {
    lo_x = std::min(lo_x, p[0]);
    hi_x = std::max(hi_x, p[0]);
    lo_y = std::min(lo_y, p[1]);
    hi_y = std::max(hi_y, p[1]);
  }
  const double extent = std::max({hi_x - lo_x, hi_y - lo_y, 1e-12});
  const double scale = 0.9 / extent;
  const double mid_x = 0.5 * (lo_x + hi_x);
  const double mid_y = 0.5 * (lo_y + hi_y);

  LabeledDataset ds;
  ds.n_classes = spec.n_classes;
  ds.input_shape = Shape{1, 1, 2};
  for (std::size_t i = 0; i < points.size(); ++i) {
    Tensor t(ds.input_shape);
    t[0] = std::clamp(0.5 + (points[i][0] - mid_x) * scale, 0.0, 1.0);
    t[1] = std::clamp(0.5 + (points[i][1] - mid_y) * scale, 0.0, 1.0);
    ds.items.push_back({std::move(t), labels[i]});
  }
  return ds;
}

// --- Procedural shapes -----------------------------------------------------

struct ShapeSpec {
  std::size_t n_classes = 10;
  std::size_t image_side = 16;
  std::size_t samples_per_class = 100;
  std::uint64_t seed = 0;
  // Per-image background level and shape contrast are drawn uniformly from
  // these ranges; pixel noise is Gaussian.
  double background_min = 0.3;
  double background_max = 0.5;
  double contrast_min = 0.15;
  double contrast_max = 0.3;
  double noise_sigma = 0.03;
  double position_jitter = 0.2;  // full width of the uniform centre offset
  double scale_min = 0.8;
  double scale_max = 1.15;
  double dark_fraction = 0.0;  // probability the shape is darker than the background
  // Class-specific grating (orientation pi*c/n_classes, random phase) added
  // over the whole image; zero disables it. Frequency is in cycles per image.
  double texture_amplitude = 0.0;
  double texture_frequency = 4.0;
};

namespace detail {

struct ShapeParams {
  double cx, cy, scale, thickness, foreground, background, phase;
};

// Indicator of shape family `k` in shape-local coordinates (u, v), nominal
// extent about +-0.3.
inline bool shape_contains(std::size_t k, double u, double v, double t) {
  const double r = std::hypot(u, v);
  const double au = std::abs(u);
  const double av = std::abs(v);
  const double box = std::max(au, av);
  switch (k) {
    case 0: return r < 0.28;                                       // disc
    case 1: return std::abs(r - 0.25) < t * 0.6;                   // ring
    case 2: return av < t && au < 0.34;                            // horizontal bar
    case 3: return au < t && av < 0.34;                            // vertical bar
    case 4: return (av < t * 0.8 && au < 0.32) || (au < t * 0.8 && av < 0.32);  // plus
    case 5:                                                        // diagonal cross
      return box < 0.3 && (std::abs(u - v) < t * 1.1 || std::abs(u + v) < t * 1.1);
    case 6: return box < 0.3 && box > 0.3 - 1.4 * t;               // square outline
    case 7: return box < 0.22;                                     // filled square
    case 8: return v < 0.25 && v > -0.3 && au < 0.32 * (v + 0.3) / 0.55;  // triangle
    case 9:                                                        // L corner
      return (u > -0.26 && u < -0.26 + 1.6 * t && av < 0.3) ||
             (v < 0.3 && v > 0.3 - 1.6 * t && u > -0.26 && u < 0.26);
    case 10:                                                       // two dots
      return std::hypot(u - 0.17, v) < 0.12 || std::hypot(u + 0.17, v) < 0.12;
    case 11: return box < 0.32 && std::abs(u - v) < t * 1.1;       // diagonal stroke
    case 12:                                                       // T
      return (v > -0.3 && v < -0.3 + 1.6 * t && au < 0.3) || (au < t * 0.8 && v > -0.3 && v < 0.3);
  }
  return false;
}

inline constexpr std::size_t kShapeFamilies = 13;

}  // namespace detail

inline constexpr std::size_t shape_family_count() { return detail::kShapeFamilies; }

/// Grayscale images of parametric shapes with jittered position, scale,
/// stroke and contrast plus pixel noise. Shape parameters are drawn from a
/// stream independent of `image_side`, so the same spec rendered at two sizes
/// yields the same scenes.
inline LabeledDataset make_shapes(const ShapeSpec& spec) {
  if (spec.image_side < 8) throw ArgumentError("shape images need image_side >= 8");
  if (spec.n_classes < 2) throw ArgumentError("shapes need n_classes >= 2");
  if (spec.n_classes > detail::kShapeFamilies) {
    throw ArgumentError("requested " + std::to_string(spec.n_classes) + " shape classes but only " +
                        std::to_string(detail::kShapeFamilies) + " families exist");
  }
  if (spec.samples_per_class == 0) throw ArgumentError("shapes need samples_per_class >= 1");

  std::mt19937_64 param_rng(spec.seed);
  std::mt19937_64 noise_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> pixel_noise(0.0, spec.noise_sigma);

  const std::size_t n = spec.image_side;
  constexpr int kSuper = 3;
  LabeledDataset ds;
  ds.n_classes = spec.n_classes;
  ds.input_shape = Shape{1, n, n};
  for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      detail::ShapeParams p{};
      p.cx = 0.5 + (unit(param_rng) - 0.5) * spec.position_jitter;
      p.cy = 0.5 + (unit(param_rng) - 0.5) * spec.position_jitter;
      p.scale = spec.scale_min + (spec.scale_max - spec.scale_min) * unit(param_rng);
      p.thickness = 0.07 + 0.05 * unit(param_rng);
      p.background = spec.background_min + (spec.background_max - spec.background_min) * unit(param_rng);
      const double contrast = spec.contrast_min + (spec.contrast_max - spec.contrast_min) * unit(param_rng);
      const bool dark = unit(param_rng) < spec.dark_fraction;
      p.foreground = dark ? p.background - contrast : p.background + contrast;
      p.phase = 2.0 * std::numbers::pi * unit(param_rng);
      const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(spec.n_classes);
      const double kx = 2.0 * std::numbers::pi * spec.texture_frequency * std::cos(theta);
      const double ky = 2.0 * std::numbers::pi * spec.texture_frequency * std::sin(theta);

      Tensor img(ds.input_shape);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy) {
            for (int sx = 0; sx < kSuper; ++sx) {
              const double px = (static_cast<double>(x) + (sx + 0.5) / kSuper) / static_cast<double>(n);
              const double py = (static_cast<double>(y) + (sy + 0.5) / kSuper) / static_cast<double>(n);
              const double u = (px - p.cx) / p.scale;
              const double v = (py - p.cy) / p.scale;
              hits += detail::shape_contains(c, u, v, p.thickness) ? 1 : 0;
            }
          }
          const double coverage = hits / static_cast<double>(kSuper * kSuper);
          const double noise = spec.noise_sigma > 0.0 ? pixel_noise(noise_rng) : 0.0;
          const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(n);
          const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(n);
          const double texture = spec.texture_amplitude * std::sin(kx * gx + ky * gy + p.phase);
          const double value = p.background + (p.foreground - p.background) * coverage + texture + noise;
          img.at(0, y, x) = std::clamp(value, 0.0, 1.0);
        }
      }
      ds.items.push_back({std::move(img), c});
    }
  }
  return ds;
}

// --- JSON lines records ----------------------------------------------------

inline nlohmann::json image_record(const Tensor& image, std::size_t label) {
  const auto& s = image.shape();
  return nlohmann::json{{"label", label},
                        {"shape", {s.channels, s.height, s.width}},
                        {"pixels", image.vector()}};
}

inline LabeledImage parse_image_record(const nlohmann::json& j, const std::string& where) {
  auto need = [&](const char* key) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains(key)) throw ParseError(where + "/" + key, "missing field");
    return j.at(key);
  };
  const auto& label = need("label");
  const auto& shape = need("shape");
  const auto& pixels = need("pixels");
  if (!label.is_number_unsigned() && !(label.is_number_integer() && label.get<std::int64_t>() >= 0)) {
    throw ParseError(where + "/label", "expected non-negative integer");
  }
  if (!shape.is_array() || shape.size() != 3) {
    throw ParseError(where + "/shape", "expected [c,h,w]");
  }
  Shape s;
  try {
    s = Shape{shape[0].get<std::size_t>(), shape[1].get<std::size_t>(), shape[2].get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "/shape", e.what());
  }
  if (!pixels.is_array()) throw ParseError(where + "/pixels", "expected array");
  std::vector<double> data;
  data.reserve(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!pixels[i].is_number()) {
      throw ParseError(where + "/pixels/" + std::to_string(i), "expected number");
    }
    data.push_back(pixels[i].get<double>());
  }
  try {
    return {Tensor(s, std::move(data)), label.get<std::size_t>()};
  } catch (const DimensionError& e) {
    throw ParseError(where + "/pixels", e.what());
  }
}

inline void write_jsonl(std::ostream& os, const LabeledDataset& ds) {
  for (const auto& it : ds.items) os << image_record(it.image, it.label).dump() << '\n';
}

inline LabeledDataset read_jsonl(std::istream& is, std::size_t n_classes = 0) {
  LabeledDataset ds;
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_label = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no), e.what());
    }
    auto item = parse_image_record(j, "line " + std::to_string(line_no));
    if (ds.items.empty()) {
      ds.input_shape = item.image.shape();
    } else if (item.image.shape() != ds.input_shape) {
      throw ParseError("line " + std::to_string(line_no) + "/shape", "shape differs from first record");
    }
    max_label = std::max(max_label, item.label);
    ds.items.push_back(std::move(item));
  }
  ds.n_classes = n_classes > 0 ? n_classes : max_label + 1;
  return ds;
}

}  // namespace evasion

#endif  // EVASION_DATASET_HPP
