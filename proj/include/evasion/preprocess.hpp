#ifndef EVASION_PREPROCESS_HPP
#define EVASION_PREPROCESS_HPP

#include <algorithm>
#include <cmath>
#include <variant>
#include <vector>

#include "evasion/errors.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

namespace detail {

// One output coordinate of a 1-D bilinear resample: two source taps.
struct Tap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Half-pixel-centre alignment: output pixel j samples source coordinate
// (j + 0.5) * in / out - 0.5, clamped to the valid range.
inline std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t j = 0; j < out; ++j) {
    double src = (static_cast<double>(j) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[j] = Tap{lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of every channel to (height, width).
inline Tensor resize_bilinear(const Tensor& x, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("resize target must be positive");
  const Shape& s = x.shape();
  if (s.height == height && s.width == width) return x;
  const auto ty = detail::resize_taps(s.height, height);
  const auto tx = detail::resize_taps(s.width, width);
  Tensor out(Shape{s.channels, height, width});
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const auto& a = ty[y];
      for (std::size_t xo = 0; xo < width; ++xo) {
        const auto& b = tx[xo];
        out.at(c, y, xo) = a.w_lo * (b.w_lo * x.at(c, a.lo, b.lo) + b.w_hi * x.at(c, a.lo, b.hi)) +
                           a.w_hi * (b.w_lo * x.at(c, a.hi, b.lo) + b.w_hi * x.at(c, a.hi, b.hi));
      }
    }
  }
  return out;
}

/// Adjoint (transpose) of resize_bilinear from `source` geometry: scatters a
/// gradient on the resized image back onto the source pixels.
inline Tensor resize_bilinear_adjoint(const Tensor& grad, Shape source) {
  const Shape& g = grad.shape();
  if (g.channels != source.channels) throw DimensionError("resize adjoint: channel mismatch");
  if (g.height == source.height && g.width == source.width) return grad;
  const auto ty = detail::resize_taps(source.height, g.height);
  const auto tx = detail::resize_taps(source.width, g.width);
  Tensor out(source);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t y = 0; y < g.height; ++y) {
      const auto& a = ty[y];
      for (std::size_t xo = 0; xo < g.width; ++xo) {
        const auto& b = tx[xo];
        const double v = grad.at(c, y, xo);
        out.at(c, a.lo, b.lo) += v * a.w_lo * b.w_lo;
        out.at(c, a.lo, b.hi) += v * a.w_lo * b.w_hi;
        out.at(c, a.hi, b.lo) += v * a.w_hi * b.w_lo;
        out.at(c, a.hi, b.hi) += v * a.w_hi * b.w_hi;
      }
    }
  }
  return out;
}

struct IdentityOp {};
struct ResizeOp {
  std::size_t height = 1;
  std::size_t width = 1;
};
struct ClipUnitOp {};

using PreprocessOp = std::variant<IdentityOp, ResizeOp, ClipUnitOp>;

/// Ordered preprocessing pipeline, applied left to right.
class Preprocessor {
 public:
  Preprocessor() = default;
  explicit Preprocessor(std::vector<PreprocessOp> ops) : ops_(std::move(ops)) {
    for (const auto& op : ops_) {
      if (const auto* r = std::get_if<ResizeOp>(&op); r && (r->height == 0 || r->width == 0)) {
        throw ArgumentError("resize targets must be >= 1");
      }
    }
  }

  static Preprocessor identity() { return Preprocessor{}; }

  /// Resize to `native` when the spatial size differs from `input`.
  static Preprocessor to_native(Shape input, Shape native) {
    if (input.channels != native.channels) {
      throw DimensionError("cannot adapt " + input.str() + " to " + native.str() +
                           ": channel counts differ");
    }
    if (input == native) return identity();
    return Preprocessor({ResizeOp{native.height, native.width}});
  }

  const std::vector<PreprocessOp>& ops() const noexcept { return ops_; }

  Tensor apply(const Tensor& x) const {
    Tensor out = x;
    for (const auto& op : ops_) {
      if (const auto* r = std::get_if<ResizeOp>(&op)) {
        out = resize_bilinear(out, r->height, r->width);
      } else if (std::holds_alternative<ClipUnitOp>(op)) {
        clip_unit(out);
      }
    }
    return out;
  }

  /// Pulls a gradient w.r.t. the preprocessed image back to the input image.
  /// Clipping is treated as identity (inputs already live in [0,1]).
  Tensor pullback(const Tensor& grad, Shape input) const {
    std::vector<Shape> shapes{input};
    for (const auto& op : ops_) {
      Shape s = shapes.back();
      if (const auto* r = std::get_if<ResizeOp>(&op)) s = Shape{s.channels, r->height, r->width};
      shapes.push_back(s);
    }
    if (grad.shape() != shapes.back()) {
      throw DimensionError("pullback: gradient shape " + grad.shape().str() + " but pipeline emits " +
                           shapes.back().str());
    }
    Tensor g = grad;
    for (std::size_t i = ops_.size(); i-- > 0;) {
      if (std::holds_alternative<ResizeOp>(ops_[i])) g = resize_bilinear_adjoint(g, shapes[i]);
    }
    return g;
  }

 private:
  std::vector<PreprocessOp> ops_;
};

}  // namespace evasion

#endif  // EVASION_PREPROCESS_HPP
