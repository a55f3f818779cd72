#include <gtest/gtest.h>

#include <cmath>

#include <json.hpp>

#include "salient_teach/codec.hpp"
#include "salient_teach/image_io.hpp"
#include "salient_teach/service.hpp"
#include "salient_teach/session.hpp"

using namespace salient_teach;
using json = nlohmann::json;

namespace {

Frame solid(std::uint8_t r, std::uint8_t g, std::uint8_t b, std::size_t w = 64, std::size_t h = 48) {
  Frame f{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t i = 0; i < w * h; ++i) {
    f.pixels[3 * i] = r;
    f.pixels[3 * i + 1] = g;
    f.pixels[3 * i + 2] = b;
  }
  return f;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto r = session.add_label("red");
    const auto g = session.add_label("green");
    const auto b = session.add_label("blue");
    for (int i = 0; i < 10; ++i) {
      const auto hi = static_cast<std::uint8_t>(200 + i);
      const auto lo = static_cast<std::uint8_t>(3 * i);
      session.add_sample(r, solid(hi, lo, lo), *backbone);
      session.add_sample(g, solid(lo, hi, lo), *backbone);
      session.add_sample(b, solid(lo, lo, hi), *backbone);
    }
    train_session(session);
  }

  BackbonePtr backbone = make_test_backbone(42, 8, 7, 7);
  TrainConfig cfg = [] {
    TrainConfig c;
    c.epochs = 60;
    c.learning_rate = 0.05;
    return c;
  }();
  TeachingSession session = create_session(*backbone, cfg, 3);
};

}  // namespace

TEST_F(ServiceTest, ScoresCoverLabelsAndSumToOne) {
  const auto r = evaluate_frame(session, *backbone, solid(230, 20, 20, 640, 480));
  ASSERT_EQ(r.scores.size(), 3u);
  double sum = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.scores[i].label_id, i);
    sum += r.scores[i].p;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_EQ(r.scores[0].name, "red");
  EXPECT_GT(r.scores[0].p, 0.9);
  EXPECT_EQ(r.saliency_class, 0u);
}

TEST_F(ServiceTest, SelectedClassIsEchoed) {
  EvaluateOptions opts;
  opts.selected_class = 2;
  const auto r = evaluate_frame(session, *backbone, solid(230, 20, 20), opts);
  EXPECT_EQ(r.saliency_class, 2u);
  EXPECT_EQ(r.saliency.class_id, 2u);
  EXPECT_EQ(r.cam.class_id, 2u);
  opts.selected_class = 3;
  EXPECT_THROW(evaluate_frame(session, *backbone, solid(1, 2, 3), opts), NotFound);
}

TEST_F(ServiceTest, RepeatedCallsAreIdentical) {
  const Frame f = synthetic_frame(5);
  const auto a = evaluate_frame(session, *backbone, f);
  const auto b = evaluate_frame(session, *backbone, f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.scores[i].p, b.scores[i].p);
  EXPECT_EQ(a.cam.grid, b.cam.grid);
  EXPECT_EQ(a.saliency.q8, b.saliency.q8);
}

TEST_F(ServiceTest, WireSaliencyIsQuantisedNormalisedCam) {
  const Frame f = synthetic_frame(2);
  const auto r = evaluate_frame(session, *backbone, f);
  EXPECT_EQ(r.saliency.height, 7u);
  EXPECT_EQ(r.saliency.width, 7u);
  EXPECT_EQ(r.saliency.crop, (CropRegion{80, 0, 480}));
  const auto norm = minmax_normalize(r.cam.grid);
  ASSERT_EQ(r.saliency.q8.size(), 49u);
  for (std::size_t i = 0; i < 49; ++i) {
    EXPECT_EQ(r.saliency.q8[i], static_cast<std::uint8_t>(std::floor(255.0 * norm.values()[i] + 0.5)));
  }
  EXPECT_EQ(base64_decode(r.saliency.q8_base64), r.saliency.q8);
  // Mean of the raw CAM equals logit minus bias for the chosen class.
  const FeatureTensor features = backbone->extract(preprocess(f));
  const auto gap = features.gap();
  const auto& head = session.active_head();
  const double z = forward(head, gap)[r.saliency_class];
  EXPECT_LE(std::abs(r.cam.grid.mean() - (z - head.bias[r.saliency_class])), 1e-9 * (1 + std::abs(z)));
}

TEST_F(ServiceTest, LatencyStructure) {
  const auto r = evaluate_frame(session, *backbone, synthetic_frame(0));
  EXPECT_GE(r.latency.inference_ms, 0.0);
  EXPECT_GE(r.latency.render_ms, 0.0);
  EXPECT_LE(r.latency.inference_ms + r.latency.render_ms, r.latency.total_ms + 1.0);
}

TEST_F(ServiceTest, OverlayOnRequest) {
  EvaluateOptions opts;
  opts.overlay_side = 120;
  const auto r = evaluate_frame(session, *backbone, synthetic_frame(1), opts);
  ASSERT_TRUE(r.overlay.has_value());
  EXPECT_EQ(r.overlay->width, 120u);
  for (std::size_t i = 0; i < 120 * 120; ++i) EXPECT_LE(r.overlay->rgba[4 * i + 3], 153);
  EXPECT_FALSE(evaluate_frame(session, *backbone, synthetic_frame(1)).overlay.has_value());
}

TEST_F(ServiceTest, ZeroHeadGivesUniformScoresAndTransparentOverlay) {
  auto s = create_session(*backbone, TrainConfig{}, 1);
  s.add_label("a");
  s.add_label("b");
  s.add_sample(0, solid(1, 2, 3), *backbone);
  s.add_sample(1, solid(3, 2, 1), *backbone);
  s.begin_training();
  s.complete_training(init_head(2, 8), TrainReport{std::vector<double>(10, 0.0), 0.5, std::nullopt});
  EvaluateOptions opts;
  opts.overlay_side = 16;
  const auto r = evaluate_frame(s, *backbone, synthetic_frame(3), opts);
  EXPECT_EQ(r.scores[0].p, 0.5);
  EXPECT_EQ(r.scores[1].p, 0.5);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(r.overlay->rgba[4 * i + 3], 0);
}

TEST_F(ServiceTest, RejectsUntrainedStaleAndForeign) {
  auto fresh = create_session(*backbone, TrainConfig{}, 1);
  EXPECT_THROW(evaluate_frame(fresh, *backbone, synthetic_frame(0)), StateError);
  EXPECT_THROW(evaluate_frame(session, *make_test_backbone(1, 8, 7, 7), synthetic_frame(0)), CompatibilityError);
  session.reopen_teaching();
  try {
    evaluate_frame(session, *backbone, synthetic_frame(0));
    FAIL();
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("retrain"), std::string::npos);
  }
  EXPECT_THROW(bench(session, *backbone, 3), StateError);
}

TEST(Summarize, Statistics) {
  const auto s = summarize({5, 1, 3, 2, 4});
  EXPECT_EQ(s.mean, 3.0);
  EXPECT_EQ(s.median, 3.0);
  EXPECT_EQ(s.min, 1.0);
  EXPECT_EQ(s.max, 5.0);
  EXPECT_EQ(s.p95, 5.0);
  EXPECT_EQ(summarize({4, 1, 2, 3}).median, 2.5);
  std::vector<double> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[i] = 100 - i;  // values 1..100
  EXPECT_EQ(summarize(hundred).p95, 95.0);
  EXPECT_EQ(summarize({}).mean, 0.0);
}

TEST_F(ServiceTest, BenchReport) {
  const auto report = bench(session, *backbone, 100);
  EXPECT_EQ(report.frames, 100u);
  EXPECT_EQ(report.samples.size(), 100u);
  EXPECT_EQ(report.structure_ok, 100u);
  for (const auto& s : report.samples) EXPECT_LE(s.inference_ms + s.render_ms, s.total_ms + 1.0);
  EXPECT_LE(report.total.median, report.total.p95);
  EXPECT_EQ(report.training_ms, session.report()->training_ms);

  const auto doc = json::parse(bench_json(report));
  for (const char* stage : {"inference_ms", "render_ms", "total_ms"}) {
    for (const char* stat : {"mean", "median", "p95"}) EXPECT_TRUE(doc[stage].contains(stat)) << stage << stat;
  }
  EXPECT_EQ(doc["frames"], 100);
}

TEST_F(ServiceTest, PredictionJsonWireFormat) {
  const auto r = evaluate_frame(session, *backbone, synthetic_frame(4));
  const auto doc = json::parse(prediction_json(r));
  EXPECT_EQ(doc["type"], "prediction");
  EXPECT_EQ(doc["scores"].size(), 3u);
  EXPECT_EQ(doc["scores"][1]["name"], "green");
  EXPECT_EQ(doc["saliency"]["h"], 7);
  EXPECT_EQ(doc["saliency"]["w"], 7);
  EXPECT_EQ(doc["saliency"]["q8"], r.saliency.q8_base64);
  EXPECT_EQ(doc["saliency"]["crop"]["x"], 80);
  EXPECT_EQ(doc["saliency"]["crop"]["side"], 480);
  EXPECT_EQ(doc["saliency"]["class_id"], r.saliency_class);
  EXPECT_TRUE(doc["latency"].contains("render_ms"));
}

TEST(SyntheticFrame, DeterministicAndMoving) {
  const auto a = synthetic_frame(3);
  EXPECT_EQ(a.width, 640u);
  EXPECT_EQ(a.height, 480u);
  EXPECT_EQ(a.pixels, synthetic_frame(3).pixels);
  EXPECT_NE(a.pixels, synthetic_frame(4).pixels);
}

TEST(Codec, Base64) {
  EXPECT_EQ(base64_encode(std::string_view("")), "");
  EXPECT_EQ(base64_encode(std::string_view("f")), "Zg==");
  EXPECT_EQ(base64_encode(std::string_view("foobar")), "Zm9vYmFy");
  const auto d = base64_decode("Zm9vYg==");
  EXPECT_EQ(std::string(d.begin(), d.end()), "foob");
  EXPECT_THROW(base64_decode("Zm9"), InvalidArgument);
  EXPECT_THROW(base64_decode("Zm=v"), InvalidArgument);
  EXPECT_THROW(base64_decode("Zm9v YmFy"), InvalidArgument);
  EXPECT_THROW(base64_decode("Zm9*"), InvalidArgument);
}

TEST(Codec, FloatPackingRoundTrip) {
  const std::vector<double> d{0.1, -0.0, 1e-310, 3.5e300};
  const std::string packed = pack_f64(d);
  const auto back = unpack_f64({reinterpret_cast<const std::uint8_t*>(packed.data()), packed.size()});
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(std::memcmp(&back[i], &d[i], sizeof(double)), 0);
  EXPECT_EQ(static_cast<unsigned char>(pack_f32(std::vector<float>{1.0f})[3]), 0x3f);
}

TEST(ImageIo, PngRoundTripAndComposite) {
  Frame f = solid(10, 20, 30, 8, 4);
  f.pixels[0] = 255;
  const auto png = encode_png(f);
  const Frame back = decode_image(png);
  EXPECT_EQ(back.width, 8u);
  EXPECT_EQ(back.height, 4u);
  EXPECT_EQ(back.pixels, f.pixels);
  EXPECT_THROW(decode_image(std::vector<std::uint8_t>{1, 2, 3}), InvalidArgument);

  SaliencyOverlay o{4, 4, std::vector<std::uint8_t>(64, 0)};
  o.rgba[0] = 255;
  o.rgba[3] = 153;  // first crop pixel, full overlay opacity
  const Frame c = composite_overlay(f, o);
  // crop square starts at x=2; 10*(1-0.6) + 255*0.6 = 157
  EXPECT_EQ(c.pixels[(0 * 8 + 2) * 3], 157);
  EXPECT_EQ(c.pixels[(0 * 8 + 3) * 3], 10);
  EXPECT_EQ(c.pixels[0], 255);
  EXPECT_THROW(composite_overlay(f, SaliencyOverlay{3, 3, std::vector<std::uint8_t>(36)}), InvalidArgument);
}
