#include "salient_teach/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "salient_teach/codec.hpp"

namespace salient_teach {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

std::vector<std::uint8_t> quantize_q8(const Grid2D& normalized) {
  std::vector<std::uint8_t> out;
  out.reserve(normalized.size());
  for (double v : normalized.values()) {
    out.push_back(static_cast<std::uint8_t>(std::floor(255.0 * std::clamp(v, 0.0, 1.0) + 0.5)));
  }
  return out;
}

PredictionResult evaluate_frame(const TeachingSession& session, const Backbone& backbone, const Frame& frame,
                                const EvaluateOptions& options) {
  const auto start = Clock::now();
  const LinearHead& head = session.active_head();
  if (backbone.identity() != session.backbone_id()) {
    throw CompatibilityError("backbone " + backbone.identity() + " does not match the session's " +
                             session.backbone_id());
  }
  if (options.overlay_side && *options.overlay_side == 0) throw InvalidArgument("overlay side must be positive");
  frame.validate();

  const FeatureTensor features = backbone.extract(preprocess(frame, backbone.input_spec()));
  const Probabilities probs = softmax(forward(head, features.gap()));
  const std::size_t cls = select_saliency_class(probs, options.selected_class);
  SaliencyGrid cam = compute_cam(features, head, cls);
  const auto inferred = Clock::now();

  PredictionResult result{{}, cls, std::move(cam), {}, std::nullopt, {}};
  const Grid2D normalized = normalize_for_display(result.cam.grid, options.overlay);
  result.saliency.height = normalized.height();
  result.saliency.width = normalized.width();
  result.saliency.q8 = quantize_q8(normalized);
  result.saliency.q8_base64 = base64_encode(result.saliency.q8);
  result.saliency.crop = center_crop(frame.width, frame.height);
  result.saliency.class_id = cls;
  if (options.overlay_side) result.overlay = render_overlay(result.cam, *options.overlay_side, options.overlay);
  const auto rendered = Clock::now();

  for (const auto& l : session.labels()) result.scores.push_back({l.id, l.name, probs[l.id]});
  result.latency.inference_ms = ms_between(start, inferred);
  result.latency.render_ms = ms_between(inferred, rendered);
  result.latency.total_ms = ms_between(start, rendered);
  return result;
}

StageStats summarize(std::vector<double> samples) {
  StageStats s;
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  double sum = 0.0;
  for (double v : samples) sum += v;
  s.mean = sum / static_cast<double>(n);
  s.median = n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95 = samples[std::max<std::size_t>(rank, 1) - 1];
  s.min = samples.front();
  s.max = samples.back();
  return s;
}

Frame synthetic_frame(std::size_t index, std::size_t width, std::size_t height) {
  Frame f{width, height, std::vector<std::uint8_t>(width * height * 3), static_cast<std::int64_t>(index) * 33};
  const double cx = static_cast<double>(width) * (0.3 + 0.4 * std::fmod(0.137 * static_cast<double>(index), 1.0));
  const double cy = static_cast<double>(height) * 0.5;
  const double radius = static_cast<double>(std::min(width, height)) / 5.0;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const bool blob = dx * dx + dy * dy < radius * radius;
      std::uint8_t* px = f.pixels.data() + (y * width + x) * 3;
      px[0] = blob ? 220 : static_cast<std::uint8_t>((x + 3 * index) & 0xFF);
      px[1] = blob ? 40 : static_cast<std::uint8_t>((y * 2) & 0xFF);
      px[2] = blob ? 60 : static_cast<std::uint8_t>(((x + y) / 2 + index) & 0xFF);
    }
  }
  return f;
}

BenchReport bench(const TeachingSession& session, const Backbone& backbone, std::size_t n, const FrameSource& source,
                  const EvaluateOptions& options, std::optional<double> training_ms) {
  session.active_head();
  BenchReport report;
  report.frames = n;
  report.samples.reserve(n);
  std::vector<double> inference, render, total;
  for (std::size_t i = 0; i < n; ++i) {
    const Frame frame = source ? source(i) : synthetic_frame(i);
    const auto r = evaluate_frame(session, backbone, frame, options);
    report.samples.push_back(r.latency);
    inference.push_back(r.latency.inference_ms);
    render.push_back(r.latency.render_ms);
    total.push_back(r.latency.total_ms);
    if (r.latency.inference_ms + r.latency.render_ms <= r.latency.total_ms + 1.0) ++report.structure_ok;
  }
  report.inference = summarize(std::move(inference));
  report.render = summarize(std::move(render));
  report.total = summarize(std::move(total));
  report.training_ms = training_ms;
  if (!report.training_ms && session.report()) report.training_ms = session.report()->training_ms;
  return report;
}

namespace {

json stats_json(const StageStats& s) {
  return {{"mean", s.mean}, {"median", s.median}, {"p95", s.p95}, {"min", s.min}, {"max", s.max}};
}

}  // namespace

std::string prediction_json(const PredictionResult& r) {
  json scores = json::array();
  for (const auto& s : r.scores) scores.push_back({{"label_id", s.label_id}, {"name", s.name}, {"p", s.p}});
  const auto& sal = r.saliency;
  json doc = {
      {"type", "prediction"},
      {"scores", std::move(scores)},
      {"saliency_class", r.saliency_class},
      {"saliency",
       {{"h", sal.height},
        {"w", sal.width},
        {"q8", sal.q8_base64},
        {"crop", {{"x", sal.crop.x}, {"y", sal.crop.y}, {"side", sal.crop.side}}},
        {"class_id", sal.class_id}}},
      {"latency",
       {{"inference_ms", r.latency.inference_ms},
        {"render_ms", r.latency.render_ms},
        {"total_ms", r.latency.total_ms}}},
  };
  return doc.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string bench_json(const BenchReport& r) {
  json samples = json::array();
  for (const auto& l : r.samples) {
    samples.push_back({{"inference_ms", l.inference_ms}, {"render_ms", l.render_ms}, {"total_ms", l.total_ms}});
  }
  json doc = {
      {"frames", r.frames},
      {"inference_ms", stats_json(r.inference)},
      {"render_ms", stats_json(r.render)},
      {"total_ms", stats_json(r.total)},
      {"structure_ok", r.structure_ok},
      {"training_ms", r.training_ms ? json(*r.training_ms) : json(nullptr)},
      {"samples", std::move(samples)},
  };
  return doc.dump(-1, ' ', false, json::error_handler_t::replace);
}

}  // namespace salient_teach
