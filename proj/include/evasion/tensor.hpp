#ifndef EVASION_TENSOR_HPP
#define EVASION_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evasion/errors.hpp"

namespace evasion {

/// Image geometry, channels x height x width.
struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  constexpr std::size_t size() const noexcept { return channels * height * width; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(channels) + "," + std::to_string(height) + "," +
           std::to_string(width) + ")";
  }
};

/// Dense c x h x w array of doubles stored row-major (channel, row, column).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    if (shape_.channels == 0 || shape_.height == 0 || shape_.width == 0) {
      throw DimensionError("tensor dimensions must be positive, got " + shape_.str());
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + a.shape().str() + " vs " +
                         b.shape().str());
  }
}

inline double linf_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "linf_distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double l1_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

constexpr double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void clip_unit(Tensor& x) {
  for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
}

inline bool in_unit_range(const Tensor& x) {
  return std::all_of(x.values().begin(), x.values().end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

/// Projects x onto the L-infinity ball of `radius` around `center`, then onto [0,1].
inline void project_ball(Tensor& x, const Tensor& center, double radius) {
  require_same_shape(x, center, "project_ball");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::max(0.0, center[i] - radius);
    const double hi = std::min(1.0, center[i] + radius);
    x[i] = std::clamp(x[i], lo, hi);
  }
}

/// x + step * sign(direction), elementwise.
inline Tensor sign_step(const Tensor& x, const Tensor& direction, double step) {
  require_same_shape(x, direction, "sign_step");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step * sign(direction[i]);
  return out;
}

}  // namespace evasion

#endif  // EVASION_TENSOR_HPP
