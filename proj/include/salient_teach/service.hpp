#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "salient_teach/backbone.hpp"
#include "salient_teach/saliency.hpp"
#include "salient_teach/session.hpp"

namespace salient_teach {

struct LatencyBreakdown {
  /// preprocess -> extract -> forward -> softmax -> class choice -> CAM
  double inference_ms = 0.0;
  /// normalise + quantise + encode (+ upsample and colourise when an overlay is requested)
  double render_ms = 0.0;
  double total_ms = 0.0;
};

struct ScoreEntry {
  std::size_t label_id = 0;
  std::string name;
  double p = 0.0;
};

/// Display-normalised CAM grid as sent to clients: one byte per cell,
/// round(255 * v), row-major, plus the frame region it covers.
struct WireSaliency {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> q8;
  std::string q8_base64;
  CropRegion crop;
  std::size_t class_id = 0;
};

struct PredictionResult {
  std::vector<ScoreEntry> scores;
  std::size_t saliency_class = 0;
  SaliencyGrid cam;
  WireSaliency saliency;
  /// Present when EvaluateOptions::overlay_side was set.
  std::optional<SaliencyOverlay> overlay;
  LatencyBreakdown latency;
};

struct EvaluateOptions {
  std::optional<std::size_t> selected_class;
  /// Also render a full RGBA overlay of this side on the server.
  std::optional<std::size_t> overlay_side;
  OverlayOptions overlay;
};

/// Scores a frame with the session's trained head and builds its saliency.
/// Read-only with respect to the session.
PredictionResult evaluate_frame(const TeachingSession& session, const Backbone& backbone, const Frame& frame,
                                const EvaluateOptions& options = {});

/// round(255 * v) per cell of a [0,1] grid.
std::vector<std::uint8_t> quantize_q8(const Grid2D& normalized);

struct StageStats {
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Mean, median (mean of the middle pair for even n) and nearest-rank p95.
StageStats summarize(std::vector<double> samples);

struct BenchReport {
  std::size_t frames = 0;
  std::vector<LatencyBreakdown> samples;
  StageStats inference;
  StageStats render;
  StageStats total;
  /// Frames for which inference + render <= total + 1 ms held.
  std::size_t structure_ok = 0;
  std::optional<double> training_ms;
};

using FrameSource = std::function<Frame(std::size_t index)>;

/// Deterministic 640x480 test pattern that drifts with the index.
Frame synthetic_frame(std::size_t index, std::size_t width = 640, std::size_t height = 480);

/// Runs evaluate_frame n times. training_ms defaults to the session's last report.
BenchReport bench(const TeachingSession& session, const Backbone& backbone, std::size_t n,
                  const FrameSource& source = {}, const EvaluateOptions& options = {},
                  std::optional<double> training_ms = std::nullopt);

/// Wire encodings shared by the protocol and the CLI.
std::string prediction_json(const PredictionResult& result);
std::string bench_json(const BenchReport& report);

}  // namespace salient_teach
