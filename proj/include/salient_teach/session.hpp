#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "salient_teach/backbone.hpp"
#include "salient_teach/feature_tensor.hpp"
#include "salient_teach/trainer.hpp"

namespace salient_teach {

enum class SessionState { teaching, training, evaluating };

constexpr std::string_view to_string(SessionState s) noexcept {
  switch (s) {
    case SessionState::teaching: return "teaching";
    case SessionState::training: return "training";
    case SessionState::evaluating: return "evaluating";
  }
  return "unknown";
}

struct LabelDef {
  std::size_t id = 0;
  std::string name;
  friend bool operator==(const LabelDef&, const LabelDef&) = default;
};

/// Labels, stored features, lifecycle state and the trained head for one user.
///
/// Allowed transitions are Teaching -> Training -> Evaluating -> Teaching (plus
/// Training -> Teaching on cancellation). Every rejected call throws before
/// touching any member. The object is single-writer; callers serialise access.
class TeachingSession {
 public:
  TeachingSession(std::string backbone_id, FeatureShape feature_shape, TrainConfig config, std::uint64_t seed);

  SessionState state() const noexcept { return state_; }
  const std::vector<LabelDef>& labels() const noexcept { return labels_; }
  const LabelDef& label(std::size_t id) const;
  /// Id of the label with this name, if any.
  std::optional<std::size_t> find_label(std::string_view name) const;
  std::size_t count(std::size_t label_id) const;
  std::vector<std::size_t> counts() const;
  const std::vector<FeatureTensor>& samples(std::size_t label_id) const;

  const TrainConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& backbone_id() const noexcept { return backbone_id_; }
  const FeatureShape& feature_shape() const noexcept { return feature_shape_; }

  /// Last trained head, possibly stale after reopen_teaching.
  const std::optional<LinearHead>& head() const noexcept { return head_; }
  bool head_stale() const noexcept { return head_stale_; }
  const std::optional<TrainReport>& report() const noexcept { return report_; }
  /// The head used for evaluation. Throws StateError outside Evaluating or
  /// when the head no longer reflects the teaching data.
  const LinearHead& active_head() const;

  std::size_t add_label(std::string name);
  /// Extracts features from the frame and stores them; returns the new count.
  std::size_t add_sample(std::size_t label_id, const Frame& frame, const Backbone& backbone);
  std::size_t add_features(std::size_t label_id, FeatureTensor features);
  void clear_label(std::size_t label_id);
  void set_config(const TrainConfig& config);

  /// Pooled vectors of every stored sample, label-major in insertion order.
  TrainingSet training_set() const;

  void begin_training();
  void complete_training(LinearHead head, TrainReport report);
  /// Abandons a run: back to Teaching, any previous head left as it was.
  void cancel_training();
  void reopen_teaching();

  /// Rebuilds a session from persisted parts; used by load_session.
  static TeachingSession restore(std::string backbone_id, FeatureShape feature_shape, TrainConfig config,
                                 std::uint64_t seed, std::vector<LabelDef> labels,
                                 std::vector<std::vector<FeatureTensor>> samples, std::optional<LinearHead> head,
                                 bool head_stale, std::optional<TrainReport> report);

 private:
  void require_state(SessionState expected, std::string_view action) const;
  void require_label(std::size_t label_id) const;

  std::string backbone_id_;
  FeatureShape feature_shape_;
  TrainConfig config_;
  std::uint64_t seed_;
  SessionState state_ = SessionState::teaching;
  std::vector<LabelDef> labels_;
  std::vector<std::vector<FeatureTensor>> samples_;
  std::optional<LinearHead> head_;
  bool head_stale_ = false;
  std::optional<TrainReport> report_;
};

TeachingSession create_session(const Backbone& backbone, const TrainConfig& config, std::uint64_t seed);

/// Trains on the session's data, moving it Teaching -> Training -> Evaluating.
/// On failure or cancellation the session returns to Teaching.
TrainReport train_session(TeachingSession& session, std::stop_token stop = {}, const EpochCallback& on_epoch = {});

/// Session file: UTF-8 JSON, version 1. Rejected while training.
std::string serialize_session(const TeachingSession& session);
void save_session(const TeachingSession& session, const std::string& path);

/// Throws ParseError for malformed documents and CompatibilityError when the
/// file was made with a different backbone.
TeachingSession deserialize_session(std::string_view text, const Backbone& backbone);
TeachingSession load_session(const std::string& path, const Backbone& backbone);

}  // namespace salient_teach
