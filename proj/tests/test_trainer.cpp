#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <stop_token>

#include "salient_teach/backbone.hpp"
#include "salient_teach/trainer.hpp"

using namespace salient_teach;

namespace {

TrainingSet random_set(std::mt19937_64& rng, std::size_t classes, std::size_t features, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  TrainingSet set{classes, features, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % classes;
    std::vector<double> x(features);
    for (std::size_t k = 0; k < features; ++k) x[k] = normal(rng) + (k % classes == y ? 1.5 : 0.0);
    set.samples.push_back(std::move(x));
    set.labels.push_back(y);
  }
  return set;
}

LinearHead random_head(std::mt19937_64& rng, std::size_t classes, std::size_t features) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  LinearHead h = init_head(classes, features);
  for (double& w : h.weights) w = u(rng);
  for (double& b : h.bias) b = u(rng);
  return h;
}

double batch_loss(const LinearHead& head, const TrainingSet& data, std::span<const std::size_t> batch) {
  double loss = 0.0;
  for (std::size_t i : batch) loss += cross_entropy(softmax(forward(head, data.samples[i])), data.labels[i]);
  return loss / static_cast<double>(batch.size());
}

Frame solid(std::uint8_t r, std::uint8_t g, std::uint8_t b, std::size_t w = 64, std::size_t h = 48) {
  Frame f{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t i = 0; i < w * h; ++i) {
    f.pixels[3 * i] = r;
    f.pixels[3 * i + 1] = g;
    f.pixels[3 * i + 2] = b;
  }
  return f;
}

// Three solid colours with a little per-sample brightness jitter.
TrainingSet solid_colour_set(const Backbone& backbone, std::size_t per_class) {
  const auto spec = backbone.output_spec();
  TrainingSet set{3, spec.channels, {}, {}, {"red", "green", "blue"}};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto hi = static_cast<std::uint8_t>(200 + i);
      const auto lo = static_cast<std::uint8_t>(i);
      const Frame f = c == 0 ? solid(hi, lo, lo) : c == 1 ? solid(lo, hi, lo) : solid(lo, lo, hi);
      const FeatureTensor features = backbone.extract(preprocess(f, backbone.input_spec()));
      const auto gap = features.gap();
      set.samples.emplace_back(gap.begin(), gap.end());
      set.labels.push_back(c);
    }
  }
  return set;
}

// Full-batch gradient descent on the same convex objective, sharing no code
// with the trainer beyond the problem definition.
LinearHead convex_oracle(const TrainingSet& data, int iterations, double step) {
  const std::size_t C = data.classes, K = data.features, n = data.samples.size();
  std::vector<double> W(C * K, 0.0), b(C, 0.0);
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> gW(C * K, 0.0), gb(C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(C);
      double zmax = -1e300;
      for (std::size_t c = 0; c < C; ++c) {
        z[c] = b[c];
        for (std::size_t k = 0; k < K; ++k) z[c] += W[c * K + k] * data.samples[i][k];
        zmax = std::max(zmax, z[c]);
      }
      double s = 0.0;
      for (double& v : z) s += (v = std::exp(v - zmax));
      for (std::size_t c = 0; c < C; ++c) {
        const double d = z[c] / s - (c == data.labels[i] ? 1.0 : 0.0);
        gb[c] += d / n;
        for (std::size_t k = 0; k < K; ++k) gW[c * K + k] += d * data.samples[i][k] / n;
      }
    }
    for (std::size_t j = 0; j < W.size(); ++j) W[j] -= step * gW[j];
    for (std::size_t c = 0; c < C; ++c) b[c] -= step * gb[c];
  }
  return LinearHead{C, K, W, b};
}

}  // namespace

TEST(InitHead, ZerosAndUniformPrediction) {
  const auto h = init_head(3, 8);
  EXPECT_EQ(h.weights, std::vector<double>(24, 0.0));
  EXPECT_EQ(h.bias, std::vector<double>(3, 0.0));
  const auto z = forward(h, std::vector<double>(8, 3.25));
  EXPECT_EQ(z, (Logits{0, 0, 0}));
  for (double p : softmax(z)) EXPECT_NEAR(p, 1.0 / 3, 1e-15);
  EXPECT_THROW(init_head(1, 8), InvalidArgument);
  EXPECT_THROW(init_head(2, 0), InvalidArgument);
}

TEST(Forward, Examples) {
  LinearHead identity = init_head(3, 3);
  for (std::size_t c = 0; c < 3; ++c) identity.weights[c * 3 + c] = 1.0;
  EXPECT_EQ(forward(identity, std::vector<double>{0.5, -2, 7}), (Logits{0.5, -2, 7}));

  const LinearHead one{1, 2, {0.5, -1.0}, {0.25}};
  EXPECT_DOUBLE_EQ(forward(one, std::vector<double>{2.5, 0.5})[0], 1.0);
  EXPECT_THROW(forward(identity, std::vector<double>{1, 2}), InvalidArgument);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> theta{1.5, -2.0};
  AdamState s(2);
  adam_step(theta, std::vector<double>{0, 0}, s, TrainConfig{});
  EXPECT_EQ(theta, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, SingleAndDoubleStep) {
  std::vector<double> theta{0.0};
  AdamState s(1);
  const TrainConfig cfg;
  adam_step(theta, std::vector<double>{1.0}, s, cfg);
  EXPECT_NEAR(theta[0], -0.001 / (1.0 + 1e-8), 1e-18);
  EXPECT_NEAR(theta[0], -0.000999999990, 1e-14);
  adam_step(theta, std::vector<double>{1.0}, s, cfg);
  EXPECT_NEAR(theta[0], -0.002, 1e-6);
  EXPECT_EQ(s.t, 2u);
  EXPECT_GE(s.v[0], 0.0);
}

TEST(Adam, ShapeMismatch) {
  std::vector<double> theta{0.0, 1.0};
  AdamState s(2);
  EXPECT_THROW(adam_step(theta, std::vector<double>{1.0}, s, TrainConfig{}), InvalidArgument);
  AdamState small(1);
  EXPECT_THROW(adam_step(theta, std::vector<double>{1.0, 1.0}, small, TrainConfig{}), InvalidArgument);
}

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  TrainConfig c;
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.epsilon = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Gradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(2024);
  const double h = 1e-5;
  for (int inst = 0; inst < 120; ++inst) {
    const std::size_t C = 2 + inst % 3, K = 1 + inst % 6, n = 1 + inst % 8;
    const auto data = random_set(rng, C, K, n);
    const auto head = random_head(rng, C, K);
    std::vector<std::size_t> batch(n);
    std::iota(batch.begin(), batch.end(), std::size_t{0});
    const auto g = batch_loss_and_gradient(head, data, batch);
    EXPECT_NEAR(g.loss, batch_loss(head, data, batch), 1e-12);
    for (std::size_t j = 0; j < head.weights.size() + head.bias.size(); ++j) {
      LinearHead hp = head, hm = head;
      double& vp = j < head.weights.size() ? hp.weights[j] : hp.bias[j - head.weights.size()];
      double& vm = j < head.weights.size() ? hm.weights[j] : hm.bias[j - head.weights.size()];
      vp += h;
      vm -= h;
      const double fd = (batch_loss(hp, data, batch) - batch_loss(hm, data, batch)) / (2 * h);
      const double an = j < head.weights.size() ? g.weights[j] : g.bias[j - head.weights.size()];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      EXPECT_LE(rel, 1e-6) << "instance " << inst << " parameter " << j;
    }
  }
}

TEST(EpochOrder, IsAPermutationAndSeeded) {
  for (std::size_t n : {1u, 2u, 7u, 90u}) {
    auto order = epoch_order(n, 5, 3);
    EXPECT_EQ(order, epoch_order(n, 5, 3));
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(order[i], i);
  }
  EXPECT_NE(epoch_order(90, 5, 0), epoch_order(90, 5, 1));
  EXPECT_NE(epoch_order(90, 5, 0), epoch_order(90, 6, 0));
  // seed + epoch drives the generator
  EXPECT_EQ(epoch_order(90, 5, 1), epoch_order(90, 6, 0));
}

TEST(Train, ReportLengthAndDeterminism) {
  std::mt19937_64 rng(1);
  const auto data = random_set(rng, 3, 5, 50);
  const auto a = train(data, TrainConfig{}, 99);
  const auto b = train(data, TrainConfig{}, 99);
  EXPECT_EQ(a.report.epoch_losses.size(), 10u);
  EXPECT_EQ(a.head, b.head);
  EXPECT_EQ(a.report.epoch_losses, b.report.epoch_losses);
  EXPECT_EQ(a.report.train_accuracy, b.report.train_accuracy);
  ASSERT_TRUE(a.report.training_ms.has_value());
  EXPECT_GE(*a.report.training_ms, 0.0);
  EXPECT_NE(train(data, TrainConfig{}, 100).head, a.head);
}

TEST(Train, EpochLossIsSampleWeightedMeanOfBatchLosses) {
  std::mt19937_64 rng(4);
  const auto data = random_set(rng, 2, 3, 10);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const auto r = train(data, cfg, 7);

  // Replay the single epoch by hand: batches of 4, 4, 2.
  LinearHead head = init_head(2, 3);
  AdamState state(8);
  const auto order = epoch_order(10, 7, 0);
  double weighted = 0.0;
  for (std::size_t start = 0; start < 10; start += 4) {
    const std::size_t len = std::min<std::size_t>(4, 10 - start);
    const std::span<const std::size_t> batch(order.data() + start, len);
    weighted += batch_loss(head, data, batch) * static_cast<double>(len);
    adam_step(head, batch_loss_and_gradient(head, data, batch), state, cfg);
  }
  EXPECT_NEAR(r.report.epoch_losses[0], weighted / 10.0, 1e-15);
  EXPECT_EQ(r.head, head);
  EXPECT_EQ(state.t, 3u);
}

TEST(Train, TinyLearningRateStaysAtZero) {
  std::mt19937_64 rng(8);
  const auto data = random_set(rng, 4, 6, 40);
  TrainConfig cfg;
  cfg.learning_rate = 1e-12;
  const auto r = train(data, cfg, 3);
  for (double w : r.head.weights) EXPECT_LE(std::abs(w), 1e-9);
  for (double b : r.head.bias) EXPECT_LE(std::abs(b), 1e-9);
}

TEST(Train, PermutingClassesPermutesRows) {
  std::mt19937_64 rng(12);
  const auto data = random_set(rng, 3, 4, 30);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permuted = data;
  for (auto& y : permuted.labels) y = perm[y];
  const auto a = train(data, TrainConfig{}, 17);
  const auto b = train(permuted, TrainConfig{}, 17);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(b.head.row(perm[c])[k], a.head.row(c)[k], 1e-12);
    EXPECT_NEAR(b.head.bias[perm[c]], a.head.bias[c], 1e-12);
  }
  for (std::size_t e = 0; e < 10; ++e) EXPECT_NEAR(a.report.epoch_losses[e], b.report.epoch_losses[e], 1e-12);
}

TEST(Train, PreconditionsNameEmptyClass) {
  TrainingSet set{3, 2, {{1, 2}, {3, 4}}, {0, 2}, {"cat", "dog", "fish"}};
  try {
    train(set, TrainConfig{}, 1);
    FAIL() << "expected PreconditionError";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("'dog'"), std::string::npos);
  }
  TrainingSet one{1, 2, {{1, 2}}, {0}, {}};
  EXPECT_THROW(train(one, TrainConfig{}, 1), PreconditionError);
}

TEST(Train, CancellationBetweenBatches) {
  std::mt19937_64 rng(6);
  const auto data = random_set(rng, 2, 3, 64);
  std::stop_source stop;
  int epochs_seen = 0;
  EXPECT_THROW(train(data, TrainConfig{}, 1, stop.get_token(),
                     [&](int epoch, double) {
                       epochs_seen = epoch;
                       if (epoch == 2) stop.request_stop();
                     }),
               Cancelled);
  EXPECT_EQ(epochs_seen, 2);
}

TEST(Train, SolidColoursConvergeOnTestBackbone) {
  const auto backbone = make_test_backbone(42, 8, 4, 4);
  const auto data = solid_colour_set(*backbone, 30);
  const auto r = train(data, TrainConfig{}, 5);
  EXPECT_EQ(r.report.train_accuracy, 1.0);
  EXPECT_LT(r.report.epoch_losses.back(), r.report.epoch_losses.front());

  const auto oracle = convex_oracle(data, 2000, 0.5);
  const double oracle_acc = train_accuracy(oracle, data);
  EXPECT_EQ(oracle_acc, 1.0);
  EXPECT_GE(r.report.train_accuracy, oracle_acc);
}
