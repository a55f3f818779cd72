#pragma once

// Small deterministic numeric kernel: dense 2-D grids and the handful of
// vector operations the classifier head and the saliency path need.
// Everything here is a pure function over 64-bit floats.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "salient_teach/errors.hpp"

namespace salient_teach {

using Logits = std::vector<double>;
using Probabilities = std::vector<double>;

/// Row-major height x width grid of finite doubles.
class Grid2D {
 public:
  Grid2D(std::size_t height, std::size_t width, double fill = 0.0)
      : height_(height), width_(width), values_(checked_area(height, width), fill) {
    if (!std::isfinite(fill)) throw InvalidArgument("Grid2D: fill value is not finite");
  }

  Grid2D(std::size_t height, std::size_t width, std::vector<double> values)
      : height_(height), width_(width), values_(std::move(values)) {
    if (values_.size() != checked_area(height, width)) {
      throw InvalidArgument("Grid2D: expected " + std::to_string(height * width) + " values, got " +
                            std::to_string(values_.size()));
    }
    for (double v : values_) {
      if (!std::isfinite(v)) throw InvalidArgument("Grid2D: non-finite value");
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  double operator()(std::size_t row, std::size_t col) const noexcept { return values_[row * width_ + col]; }
  double& operator()(std::size_t row, std::size_t col) noexcept { return values_[row * width_ + col]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  double min() const { return *std::min_element(values_.begin(), values_.end()); }
  double max() const { return *std::max_element(values_.begin(), values_.end()); }

  double mean() const noexcept {
    double sum = 0.0;
    for (double v : values_) sum += v;
    return sum / static_cast<double>(values_.size());
  }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;

 private:
  static std::size_t checked_area(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw InvalidArgument("Grid2D: dimensions must be positive");
    return height * width;
  }

  std::size_t height_;
  std::size_t width_;
  std::vector<double> values_;
};

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  if (values.empty()) throw InvalidArgument(std::string(what) + ": empty input");
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidArgument(std::string(what) + ": non-finite input");
  }
}

inline void require_probabilities(std::span<const double> probs, std::size_t label, const char* what) {
  require_finite(probs, what);
  if (label >= probs.size()) {
    throw InvalidArgument(std::string(what) + ": label " + std::to_string(label) + " out of range for " +
                          std::to_string(probs.size()) + " classes");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0 || p > 1.0) throw InvalidArgument(std::string(what) + ": probability outside [0,1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument(std::string(what) + ": probabilities do not sum to 1");
}

}  // namespace detail

inline constexpr double kCrossEntropyFloor = 1e-12;

/// Numerically stable softmax (max-subtracted).
inline Probabilities softmax(std::span<const double> logits) {
  detail::require_finite(logits, "softmax");
  const double peak = *std::max_element(logits.begin(), logits.end());
  Probabilities out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  detail::require_probabilities(probs, label, "cross_entropy");
  return -std::log(std::max(probs[label], kCrossEntropyFloor));
}

/// d(cross_entropy(softmax(z)))/dz = p - onehot(label).
inline std::vector<double> logits_gradient(std::span<const double> probs, std::size_t label) {
  detail::require_probabilities(probs, label, "logits_gradient");
  std::vector<double> grad(probs.begin(), probs.end());
  grad[label] -= 1.0;
  return grad;
}

/// Index of the largest score; ties go to the lowest index.
inline std::size_t argmax_class(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("argmax_class: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

namespace detail {

// Half-pixel-centre source coordinate, clamped to the valid range.
struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

inline std::vector<Tap> resample_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double last = static_cast<double>(in - 1);
  for (std::size_t d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, last);
    const auto lo = static_cast<std::size_t>(std::floor(s));
    taps[d] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
  }
  return taps;
}

// a + (b - a) * t, kept inside [min(a,b), max(a,b)] against rounding.
inline double lerp(double a, double b, double t) noexcept {
  const double v = a + (b - a) * t;
  return std::clamp(v, std::min(a, b), std::max(a, b));
}

}  // namespace detail

inline Grid2D bilinear_resize(const Grid2D& grid, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw InvalidArgument("bilinear_resize: output dimensions must be positive");
  const auto rows = detail::resample_taps(grid.height(), out_h);
  const auto cols = detail::resample_taps(grid.width(), out_w);
  Grid2D out(out_h, out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const auto& ry = rows[r];
    for (std::size_t c = 0; c < out_w; ++c) {
      const auto& cx = cols[c];
      const double top = detail::lerp(grid(ry.lo, cx.lo), grid(ry.lo, cx.hi), cx.frac);
      const double bottom = detail::lerp(grid(ry.hi, cx.lo), grid(ry.hi, cx.hi), cx.frac);
      out(r, c) = detail::lerp(top, bottom, ry.frac);
    }
  }
  return out;
}

/// Rescales to [0,1]. A constant grid maps to all zeros.
inline Grid2D minmax_normalize(const Grid2D& grid) {
  const double lo = grid.min();
  const double hi = grid.max();
  Grid2D out(grid.height(), grid.width());
  if (!(hi > lo)) return out;
  const double range = hi - lo;
  auto src = grid.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - lo) / range;
  return out;
}

}  // namespace salient_teach
