#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "salient_teach/errors.hpp"

namespace salient_teach {

/// Spatial dimensions and channel count of a backbone's tapped activation.
struct FeatureShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t area() const noexcept { return height * width; }
  std::size_t size() const noexcept { return height * width * channels; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

inline std::string to_string(const FeatureShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// K spatial maps of h x w 32-bit activations plus their spatial means.
///
/// The pooled vector is always derived here from the maps (sequential double
/// accumulation), so the classifier consumes exactly the spatial mean that the
/// class activation map decomposes.
class FeatureTensor {
 public:
  FeatureTensor(FeatureShape shape, std::vector<float> maps) : shape_(shape), maps_(std::move(maps)) {
    if (shape_.height == 0 || shape_.width == 0 || shape_.channels == 0) {
      throw InvalidArgument("FeatureTensor: dimensions must be positive");
    }
    if (maps_.size() != shape_.size()) {
      throw InvalidArgument("FeatureTensor: expected " + std::to_string(shape_.size()) + " values, got " +
                            std::to_string(maps_.size()));
    }
    gap_.resize(shape_.channels);
    const std::size_t area = shape_.area();
    for (std::size_t k = 0; k < shape_.channels; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < area; ++i) {
        const float v = maps_[k * area + i];
        if (!std::isfinite(v)) throw InvalidArgument("FeatureTensor: non-finite activation");
        sum += static_cast<double>(v);
      }
      gap_[k] = sum / static_cast<double>(area);
    }
  }

  const FeatureShape& shape() const noexcept { return shape_; }
  std::size_t height() const noexcept { return shape_.height; }
  std::size_t width() const noexcept { return shape_.width; }
  std::size_t channels() const noexcept { return shape_.channels; }

  /// Channel-major storage: map k occupies [k*h*w, (k+1)*h*w).
  std::span<const float> maps() const noexcept { return maps_; }
  std::span<const float> map(std::size_t k) const noexcept {
    return std::span<const float>(maps_).subspan(k * shape_.area(), shape_.area());
  }
  std::span<const double> gap() const noexcept { return gap_; }

  friend bool operator==(const FeatureTensor& a, const FeatureTensor& b) {
    return a.shape_ == b.shape_ && a.maps_ == b.maps_;
  }

 private:
  FeatureShape shape_;
  std::vector<float> maps_;
  std::vector<double> gap_;
};

}  // namespace salient_teach
