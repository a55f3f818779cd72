#pragma once

// Softmax-regression head over pooled backbone features, trained with Adam on
// seeded mini-batches. All arithmetic is 64-bit and reductions run in a fixed
// sequential order, so a (data, config, seed) triple always produces the same
// head bit for bit.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <utility>
#include <vector>

#include "salient_teach/errors.hpp"
#include "salient_teach/tensor_core.hpp"

namespace salient_teach {

/// C x K weights (row per class) and C biases.
struct LinearHead {
  std::size_t classes = 0;
  std::size_t features = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  std::span<const double> row(std::size_t c) const { return std::span<const double>(weights).subspan(c * features, features); }
  std::span<double> row(std::size_t c) { return std::span<double>(weights).subspan(c * features, features); }

  friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("TrainConfig: epochs must be positive");
    if (batch_size < 1) throw InvalidArgument("TrainConfig: batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("TrainConfig: learning_rate must be positive");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw InvalidArgument("TrainConfig: beta1 must lie in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw InvalidArgument("TrainConfig: beta2 must lie in (0,1)");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("TrainConfig: epsilon must be positive");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// First/second moment accumulators laid out like the flattened parameters.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t size) : m(size, 0.0), v(size, 0.0) {}
};

struct TrainReport {
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;
  /// Wall-clock duration; absent for reports restored from disk.
  std::optional<double> training_ms;
};

/// Labelled pooled features: samples[i] has K entries, labels[i] < classes.
struct TrainingSet {
  std::size_t classes = 0;
  std::size_t features = 0;
  std::vector<std::vector<double>> samples;
  std::vector<std::size_t> labels;
  /// Optional, used only to name classes in error messages.
  std::vector<std::string> class_names;
};

struct TrainResult {
  LinearHead head;
  TrainReport report;
};

inline LinearHead init_head(std::size_t classes, std::size_t features) {
  if (classes < 2) throw InvalidArgument("init_head: need at least 2 classes");
  if (features < 1) throw InvalidArgument("init_head: need at least 1 feature");
  return LinearHead{classes, features, std::vector<double>(classes * features, 0.0), std::vector<double>(classes, 0.0)};
}

inline Logits forward(const LinearHead& head, std::span<const double> gap) {
  if (gap.size() != head.features) {
    throw InvalidArgument("forward: feature length " + std::to_string(gap.size()) + " does not match head width " +
                          std::to_string(head.features));
  }
  Logits z(head.classes);
  for (std::size_t c = 0; c < head.classes; ++c) {
    const auto w = head.row(c);
    double acc = 0.0;
    for (std::size_t k = 0; k < head.features; ++k) acc += w[k] * gap[k];
    z[c] = acc + head.bias[c];
  }
  return z;
}

namespace detail {

inline void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                        std::span<double> v, std::uint64_t t, const TrainConfig& cfg) {
  const double correction1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double correction2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m[i] / correction1;
    const double v_hat = v[i] / correction2;
    params[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

}  // namespace detail

/// One Adam update over a flat parameter vector. Epsilon sits outside the root.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidArgument("adam_step: parameter, gradient and state shapes differ");
  }
  state.t += 1;
  detail::adam_update(params, grads, state.m, state.v, state.t, cfg);
}

/// Gradient of the mean batch loss, flattened as [dW row-major | db].
struct HeadGradient {
  double loss = 0.0;
  std::vector<double> weights;
  std::vector<double> bias;
};

/// Adam step for a head; the state is laid out as [W row-major | b].
inline void adam_step(LinearHead& head, const HeadGradient& grad, AdamState& state, const TrainConfig& cfg) {
  const std::size_t nw = head.weights.size();
  const std::size_t nb = head.bias.size();
  if (grad.weights.size() != nw || grad.bias.size() != nb || state.m.size() != nw + nb ||
      state.v.size() != nw + nb) {
    throw InvalidArgument("adam_step: head, gradient and state shapes differ");
  }
  state.t += 1;
  std::span<double> m(state.m);
  std::span<double> v(state.v);
  detail::adam_update(head.weights, grad.weights, m.first(nw), v.first(nw), state.t, cfg);
  detail::adam_update(head.bias, grad.bias, m.subspan(nw), v.subspan(nw), state.t, cfg);
}

/// Mean cross-entropy and its gradient over the given sample indices, in order.
inline HeadGradient batch_loss_and_gradient(const LinearHead& head, const TrainingSet& data,
                                            std::span<const std::size_t> batch) {
  if (batch.empty()) throw InvalidArgument("batch_loss_and_gradient: empty batch");
  HeadGradient out{0.0, std::vector<double>(head.weights.size(), 0.0), std::vector<double>(head.classes, 0.0)};
  for (std::size_t idx : batch) {
    const auto& x = data.samples.at(idx);
    const std::size_t y = data.labels.at(idx);
    const auto p = softmax(forward(head, x));
    out.loss += cross_entropy(p, y);
    const auto dz = logits_gradient(p, y);
    for (std::size_t c = 0; c < head.classes; ++c) {
      double* gw = out.weights.data() + c * head.features;
      for (std::size_t k = 0; k < head.features; ++k) gw[k] += dz[c] * x[k];
      out.bias[c] += dz[c];
    }
  }
  const double n = static_cast<double>(batch.size());
  out.loss /= n;
  for (double& g : out.weights) g /= n;
  for (double& g : out.bias) g /= n;
  return out;
}

inline double train_accuracy(const LinearHead& head, const TrainingSet& data) {
  if (data.samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (argmax_class(forward(head, data.samples[i])) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// xoshiro256** seeded through splitmix64; spelled out so shuffles do not
/// depend on the standard library's distribution implementations.
class ShuffleRng {
 public:
  explicit ShuffleRng(std::uint64_t seed) {
    for (auto& s : state_) {
      seed = splitmix64(seed);
      s = seed;
    }
  }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % bound;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4];
};

}  // namespace detail

/// Sample order for one epoch: Fisher-Yates over 0..n-1 seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::ShuffleRng rng(seed + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

inline void validate_training_set(const TrainingSet& data) {
  if (data.classes < 2) throw PreconditionError("training needs at least 2 classes, have " + std::to_string(data.classes));
  if (data.features < 1) throw PreconditionError("training needs at least 1 feature");
  if (data.samples.size() != data.labels.size()) throw InvalidArgument("training set: samples and labels differ in length");
  std::vector<std::size_t> counts(data.classes, 0);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (data.labels[i] >= data.classes) throw InvalidArgument("training set: label out of range");
    if (data.samples[i].size() != data.features) throw InvalidArgument("training set: feature length mismatch");
    ++counts[data.labels[i]];
  }
  for (std::size_t c = 0; c < data.classes; ++c) {
    if (counts[c] == 0) {
      const std::string name = c < data.class_names.size() ? "'" + data.class_names[c] + "'" : std::to_string(c);
      throw PreconditionError("class " + name + " has no samples");
    }
  }
}

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Trains a zero-initialised head for cfg.epochs passes.
///
/// Each epoch shuffles with a generator seeded from seed + epoch, splits the
/// order into batches of cfg.batch_size (the last may be short) and applies
/// one Adam step per batch. The reported epoch loss is the sample-weighted mean
/// of the batch losses seen during that epoch. Cancellation is honoured
/// between batches by throwing Cancelled.
inline TrainResult train(const TrainingSet& data, const TrainConfig& cfg, std::uint64_t seed,
                         std::stop_token stop = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  validate_training_set(data);
  const auto started = std::chrono::steady_clock::now();

  TrainResult result{init_head(data.classes, data.features), {}};
  LinearHead& head = result.head;
  AdamState state(head.weights.size() + head.bias.size());
  const std::size_t n = data.samples.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      if (stop.stop_requested()) throw Cancelled("training cancelled");
      const std::size_t len = std::min(cfg.batch_size, n - start);
      const std::span<const std::size_t> batch(order.data() + start, len);
      const auto grad = batch_loss_and_gradient(head, data, batch);
      loss_sum += grad.loss * static_cast<double>(len);
      adam_step(head, grad, state, cfg);
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    result.report.epoch_losses.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch + 1, mean_loss);
  }

  result.report.train_accuracy = train_accuracy(head, data);
  result.report.training_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace salient_teach
