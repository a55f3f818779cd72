#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "salient_teach/errors.hpp"
#include "salient_teach/feature_tensor.hpp"
#include "salient_teach/tensor_core.hpp"
#include "salient_teach/trainer.hpp"

namespace salient_teach {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

namespace detail {

// Piecewise-linear blue -> green -> yellow -> red through entries 0, 85, 170, 255,
// rounded half up. assets/colormap.csv holds the same 256 rows.
constexpr std::array<Rgb, 256> make_heat_colormap() {
  constexpr int stops[4] = {0, 85, 170, 255};
  constexpr int colors[4][3] = {{0, 0, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}};
  std::array<Rgb, 256> table{};
  for (int i = 0; i < 256; ++i) {
    int seg = i < 85 ? 0 : (i < 170 ? 1 : 2);
    const double t = static_cast<double>(i - stops[seg]) / static_cast<double>(stops[seg + 1] - stops[seg]);
    std::uint8_t ch[3]{};
    for (int j = 0; j < 3; ++j) {
      const double v = colors[seg][j] + (colors[seg + 1][j] - colors[seg][j]) * t;
      ch[j] = static_cast<std::uint8_t>(static_cast<int>(v + 0.5));
    }
    table[static_cast<std::size_t>(i)] = {ch[0], ch[1], ch[2]};
  }
  return table;
}

}  // namespace detail

inline constexpr std::array<Rgb, 256> kHeatColormap = detail::make_heat_colormap();

/// Peak overlay opacity.
inline constexpr double kOverlayMaxAlpha = 0.6;

/// Colour for a normalised value in [0,1], interpolating linearly between the
/// two neighbouring table entries and rounding half up.
inline Rgb colormap_lookup(double value) {
  const double pos = std::clamp(value, 0.0, 1.0) * 255.0;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = lo < 255 ? lo + 1 : 255;
  const double f = pos - static_cast<double>(lo);
  const Rgb a = kHeatColormap[lo];
  const Rgb b = kHeatColormap[hi];
  auto mix = [f](std::uint8_t x, std::uint8_t y) {
    return static_cast<std::uint8_t>(std::floor(x * (1.0 - f) + y * f + 0.5));
  };
  return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

/// Opacity byte for a normalised value: round(255 * 0.6 * v).
inline std::uint8_t overlay_alpha(double value) {
  return static_cast<std::uint8_t>(std::floor(255.0 * kOverlayMaxAlpha * std::clamp(value, 0.0, 1.0) + 0.5));
}

struct SaliencyGrid {
  std::size_t class_id = 0;
  Grid2D grid;  // raw class activation scores, may be negative
};

/// width x height RGBA8; alpha bytes never exceed round(255 * 0.6).
struct SaliencyOverlay {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgba;

  Rgb color(std::size_t x, std::size_t y) const {
    const std::size_t i = 4 * (y * width + x);
    return {rgba[i], rgba[i + 1], rgba[i + 2]};
  }
  /// Opacity in [0, 0.6].
  double alpha(std::size_t x, std::size_t y) const { return rgba[4 * (y * width + x) + 3] / 255.0; }
};

struct OverlayOptions {
  /// Zero negative evidence before normalising; off by default so the full
  /// signed range is displayed.
  bool clip_negative = false;
};

/// M_c(y,x) = sum_k W[c,k] * F_k(y,x). The bias is not included, so the grid
/// mean equals the class logit minus its bias.
inline SaliencyGrid compute_cam(const FeatureTensor& features, const LinearHead& head, std::size_t class_id) {
  if (features.channels() != head.features) {
    throw InvalidArgument("compute_cam: feature channels " + std::to_string(features.channels()) +
                          " do not match head width " + std::to_string(head.features));
  }
  if (class_id >= head.classes) {
    throw NotFound("compute_cam: class " + std::to_string(class_id) + " not in head with " +
                   std::to_string(head.classes) + " classes");
  }
  const auto w = head.row(class_id);
  Grid2D grid(features.height(), features.width());
  auto out = grid.values();
  for (std::size_t k = 0; k < features.channels(); ++k) {
    const auto fk = features.map(k);
    const double wk = w[k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * static_cast<double>(fk[i]);
  }
  return {class_id, std::move(grid)};
}

/// Display-ready [0,1] grid at the grid's own resolution.
inline Grid2D normalize_for_display(const Grid2D& grid, const OverlayOptions& opts = {}) {
  if (!opts.clip_negative) return minmax_normalize(grid);
  Grid2D clipped = grid;
  for (double& v : clipped.values()) v = std::max(v, 0.0);
  return minmax_normalize(clipped);
}

/// Upsample to out_side x out_side, min-max normalise, colourise, and set
/// alpha = 0.6 * normalised value.
inline SaliencyOverlay render_overlay(const SaliencyGrid& saliency, std::size_t out_side, const OverlayOptions& opts = {}) {
  if (out_side == 0) throw InvalidArgument("render_overlay: output side must be positive");
  const Grid2D heat = normalize_for_display(bilinear_resize(saliency.grid, out_side, out_side), opts);
  SaliencyOverlay overlay{out_side, out_side, std::vector<std::uint8_t>(4 * out_side * out_side)};
  auto values = heat.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Rgb c = colormap_lookup(values[i]);
    overlay.rgba[4 * i] = c.r;
    overlay.rgba[4 * i + 1] = c.g;
    overlay.rgba[4 * i + 2] = c.b;
    overlay.rgba[4 * i + 3] = overlay_alpha(values[i]);
  }
  return overlay;
}

/// The user's choice when given, otherwise the most confident class.
inline std::size_t select_saliency_class(std::span<const double> scores, std::optional<std::size_t> user_choice) {
  if (scores.empty()) throw InvalidArgument("select_saliency_class: empty scores");
  if (user_choice) {
    if (*user_choice >= scores.size()) {
      throw NotFound("class " + std::to_string(*user_choice) + " does not exist (have " +
                     std::to_string(scores.size()) + ")");
    }
    return *user_choice;
  }
  return argmax_class(scores);
}

}  // namespace salient_teach
