#include "salient_teach/session.hpp"

#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "salient_teach/codec.hpp"

namespace salient_teach {

using json = nlohmann::json;

TeachingSession::TeachingSession(std::string backbone_id, FeatureShape feature_shape, TrainConfig config,
                                 std::uint64_t seed)
    : backbone_id_(std::move(backbone_id)), feature_shape_(feature_shape), config_(config), seed_(seed) {
  config_.validate();
  if (feature_shape_.size() == 0) throw InvalidArgument("session: feature shape must be non-empty");
}

TeachingSession create_session(const Backbone& backbone, const TrainConfig& config, std::uint64_t seed) {
  return TeachingSession(backbone.identity(), backbone.output_spec(), config, seed);
}

void TeachingSession::require_state(SessionState expected, std::string_view action) const {
  if (state_ != expected) {
    throw StateError(std::string(action) + " requires state " + std::string(to_string(expected)) + ", session is " +
                     std::string(to_string(state_)));
  }
}

void TeachingSession::require_label(std::size_t label_id) const {
  if (label_id >= labels_.size()) {
    throw NotFound("label " + std::to_string(label_id) + " does not exist (have " + std::to_string(labels_.size()) +
                   ")");
  }
}

const LabelDef& TeachingSession::label(std::size_t id) const {
  require_label(id);
  return labels_[id];
}

std::optional<std::size_t> TeachingSession::find_label(std::string_view name) const {
  for (const auto& l : labels_) {
    if (l.name == name) return l.id;
  }
  return std::nullopt;
}

std::size_t TeachingSession::count(std::size_t label_id) const {
  require_label(label_id);
  return samples_[label_id].size();
}

std::vector<std::size_t> TeachingSession::counts() const {
  std::vector<std::size_t> out;
  out.reserve(samples_.size());
  for (const auto& s : samples_) out.push_back(s.size());
  return out;
}

const std::vector<FeatureTensor>& TeachingSession::samples(std::size_t label_id) const {
  require_label(label_id);
  return samples_[label_id];
}

const LinearHead& TeachingSession::active_head() const {
  if (state_ != SessionState::evaluating || !head_) {
    if (head_ && head_stale_) {
      throw StateError("the trained model is stale after new teaching; retrain before evaluating");
    }
    throw StateError("evaluation requires state evaluating, session is " + std::string(to_string(state_)));
  }
  if (head_stale_) throw StateError("the trained model is stale after new teaching; retrain before evaluating");
  return *head_;
}

std::size_t TeachingSession::add_label(std::string name) {
  require_state(SessionState::teaching, "add_label");
  if (name.empty()) throw InvalidArgument("label name must not be empty");
  try {
    (void)json(name).dump();
  } catch (const json::type_error&) {
    throw InvalidArgument("label name is not valid UTF-8");
  }
  if (find_label(name)) throw Conflict("label '" + name + "' already exists");
  if (head_) head_stale_ = true;
  const std::size_t id = labels_.size();
  samples_.emplace_back();
  labels_.push_back({id, std::move(name)});
  return id;
}

std::size_t TeachingSession::add_sample(std::size_t label_id, const Frame& frame, const Backbone& backbone) {
  require_state(SessionState::teaching, "add_sample");
  require_label(label_id);
  if (backbone.identity() != backbone_id_) {
    throw CompatibilityError("backbone " + backbone.identity() + " does not match the session's " + backbone_id_);
  }
  return add_features(label_id, backbone.extract(preprocess(frame, backbone.input_spec())));
}

std::size_t TeachingSession::add_features(std::size_t label_id, FeatureTensor features) {
  require_state(SessionState::teaching, "add_sample");
  require_label(label_id);
  if (features.shape() != feature_shape_) {
    throw InvalidArgument("features are " + to_string(features.shape()) + ", session expects " +
                          to_string(feature_shape_));
  }
  samples_[label_id].push_back(std::move(features));
  if (head_) head_stale_ = true;
  return samples_[label_id].size();
}

void TeachingSession::clear_label(std::size_t label_id) {
  require_state(SessionState::teaching, "clear_label");
  require_label(label_id);
  if (!samples_[label_id].empty() && head_) head_stale_ = true;
  samples_[label_id].clear();
}

void TeachingSession::set_config(const TrainConfig& config) {
  require_state(SessionState::teaching, "set_config");
  config.validate();
  config_ = config;
}

TrainingSet TeachingSession::training_set() const {
  TrainingSet data;
  data.classes = labels_.size();
  data.features = feature_shape_.channels;
  for (const auto& l : labels_) {
    data.class_names.push_back(l.name);
    for (const auto& f : samples_[l.id]) {
      data.samples.emplace_back(f.gap().begin(), f.gap().end());
      data.labels.push_back(l.id);
    }
  }
  return data;
}

void TeachingSession::begin_training() {
  require_state(SessionState::teaching, "train");
  if (labels_.size() < 2) {
    throw PreconditionError("training needs at least 2 labels, have " + std::to_string(labels_.size()));
  }
  for (const auto& l : labels_) {
    if (samples_[l.id].empty()) throw PreconditionError("label '" + l.name + "' has no samples");
  }
  state_ = SessionState::training;
}

void TeachingSession::complete_training(LinearHead head, TrainReport report) {
  require_state(SessionState::training, "complete_training");
  if (head.classes != labels_.size() || head.features != feature_shape_.channels ||
      head.weights.size() != head.classes * head.features || head.bias.size() != head.classes) {
    throw InvalidArgument("trained head does not match the session's labels and features");
  }
  head_ = std::move(head);
  head_stale_ = false;
  report_ = std::move(report);
  state_ = SessionState::evaluating;
}

void TeachingSession::cancel_training() {
  require_state(SessionState::training, "cancel_training");
  state_ = SessionState::teaching;
}

void TeachingSession::reopen_teaching() {
  require_state(SessionState::evaluating, "reopen");
  head_stale_ = true;
  state_ = SessionState::teaching;
}

TeachingSession TeachingSession::restore(std::string backbone_id, FeatureShape feature_shape, TrainConfig config,
                                         std::uint64_t seed, std::vector<LabelDef> labels,
                                         std::vector<std::vector<FeatureTensor>> samples,
                                         std::optional<LinearHead> head, bool head_stale,
                                         std::optional<TrainReport> report) {
  TeachingSession s(std::move(backbone_id), feature_shape, config, seed);
  if (samples.size() != labels.size()) throw InvalidArgument("restore: one sample list per label required");
  s.labels_ = std::move(labels);
  s.samples_ = std::move(samples);
  s.head_ = std::move(head);
  s.head_stale_ = s.head_ && head_stale;
  s.report_ = std::move(report);
  s.state_ = s.head_ && !s.head_stale_ ? SessionState::evaluating : SessionState::teaching;
  return s;
}

TrainReport train_session(TeachingSession& session, std::stop_token stop, const EpochCallback& on_epoch) {
  session.begin_training();
  try {
    auto result = train(session.training_set(), session.config(), session.seed(), stop, on_epoch);
    TrainReport report = result.report;
    session.complete_training(std::move(result.head), std::move(result.report));
    return report;
  } catch (...) {
    session.cancel_training();
    throw;
  }
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr int kSessionVersion = 1;

json config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},         {"beta2", c.beta2},           {"epsilon", c.epsilon}};
}

std::string b64(std::string_view bytes) { return base64_encode(bytes); }

[[noreturn]] void schema_error(const std::string& where, const std::string& what) {
  throw ParseError(0, "session file: " + where + ": " + what);
}

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) schema_error(where, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) schema_error(where, std::string("missing field '") + key + "'");
  return *it;
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw std::invalid_argument("not a number");
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer()) throw std::invalid_argument("not an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw std::invalid_argument("negative");
        }
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw std::invalid_argument("not a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw std::invalid_argument("not a string");
    }
    return v.get<T>();
  } catch (const std::exception& e) {
    schema_error(where + "." + key, e.what());
  }
}

std::vector<std::uint8_t> decode_b64(const json& v, const std::string& where) {
  if (!v.is_string()) schema_error(where, "expected a base64 string");
  try {
    return base64_decode(v.get_ref<const std::string&>());
  } catch (const InvalidArgument& e) {
    schema_error(where, e.what());
  }
}

}  // namespace

std::string serialize_session(const TeachingSession& s) {
  if (s.state() == SessionState::training) throw StateError("cannot save while training");
  const FeatureShape& shape = s.feature_shape();
  json labels = json::array();
  json samples = json::array();
  for (const auto& l : s.labels()) {
    labels.push_back({{"id", l.id}, {"name", l.name}});
    json blocks = json::array();
    for (const auto& f : s.samples(l.id)) blocks.push_back(b64(pack_f32(f.maps())));
    samples.push_back({{"label_id", l.id}, {"h", shape.height}, {"w", shape.width}, {"K", shape.channels},
                       {"features", std::move(blocks)}});
  }
  json doc = {
      {"version", kSessionVersion},
      {"seed", s.seed()},
      {"backbone_id", s.backbone_id()},
      {"feature_shape", {{"h", shape.height}, {"w", shape.width}, {"K", shape.channels}}},
      {"labels", std::move(labels)},
      {"config", config_to_json(s.config())},
      {"samples", std::move(samples)},
      {"head", nullptr},
      {"head_stale", s.head_stale()},
      {"report", nullptr},
  };
  if (const auto& h = s.head()) {
    doc["head"] = {{"classes", h->classes},
                   {"features", h->features},
                   {"weights", b64(pack_f64(h->weights))},
                   {"bias", b64(pack_f64(h->bias))}};
  }
  if (const auto& r = s.report()) {
    doc["report"] = {{"epoch_losses", b64(pack_f64(r->epoch_losses))}, {"train_accuracy", r->train_accuracy}};
  }
  return doc.dump(2, ' ', false, json::error_handler_t::strict) + "\n";
}

void save_session(const TeachingSession& session, const std::string& path) {
  const std::string text = serialize_session(session);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError(path, "cannot open for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw LoadError(path, "write failed");
}

TeachingSession deserialize_session(std::string_view text, const Backbone& backbone) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte > 0 ? e.byte - 1 : 0, "session file is not valid JSON");
  }
  const std::string root = "$";
  if (!doc.is_object()) schema_error(root, "expected an object");
  const int version = get_as<int>(doc, "version", root);
  if (version != kSessionVersion) schema_error(root + ".version", "unsupported version " + std::to_string(version));

  const std::string backbone_id = get_as<std::string>(doc, "backbone_id", root);
  if (backbone_id != backbone.identity()) {
    throw CompatibilityError("session was taught with backbone " + backbone_id + ", supplied backbone is " +
                             backbone.identity());
  }
  const auto seed = get_as<std::uint64_t>(doc, "seed", root);

  const json& shape_json = field(doc, "feature_shape", root);
  const FeatureShape shape{get_as<std::size_t>(shape_json, "h", "$.feature_shape"),
                           get_as<std::size_t>(shape_json, "w", "$.feature_shape"),
                           get_as<std::size_t>(shape_json, "K", "$.feature_shape")};
  if (shape != backbone.output_spec()) {
    throw CompatibilityError("session features are " + to_string(shape) + ", backbone produces " +
                             to_string(backbone.output_spec()));
  }

  const json& cfg = field(doc, "config", root);
  TrainConfig config;
  config.epochs = get_as<int>(cfg, "epochs", "$.config");
  config.batch_size = get_as<std::size_t>(cfg, "batch_size", "$.config");
  config.learning_rate = get_as<double>(cfg, "learning_rate", "$.config");
  config.beta1 = get_as<double>(cfg, "beta1", "$.config");
  config.beta2 = get_as<double>(cfg, "beta2", "$.config");
  config.epsilon = get_as<double>(cfg, "epsilon", "$.config");
  try {
    config.validate();
  } catch (const InvalidArgument& e) {
    schema_error("$.config", e.what());
  }

  const json& labels_json = field(doc, "labels", root);
  if (!labels_json.is_array()) schema_error("$.labels", "expected an array");
  std::vector<LabelDef> labels;
  for (std::size_t i = 0; i < labels_json.size(); ++i) {
    const std::string where = "$.labels[" + std::to_string(i) + "]";
    LabelDef l{get_as<std::size_t>(labels_json[i], "id", where), get_as<std::string>(labels_json[i], "name", where)};
    if (l.id != i) schema_error(where, "label ids must be dense and in order");
    if (l.name.empty()) schema_error(where, "empty label name");
    for (const auto& prev : labels) {
      if (prev.name == l.name) schema_error(where, "duplicate label name '" + l.name + "'");
    }
    labels.push_back(std::move(l));
  }

  const json& samples_json = field(doc, "samples", root);
  if (!samples_json.is_array() || samples_json.size() != labels.size()) {
    schema_error("$.samples", "expected one entry per label");
  }
  std::vector<std::vector<FeatureTensor>> samples(labels.size());
  for (std::size_t i = 0; i < samples_json.size(); ++i) {
    const std::string where = "$.samples[" + std::to_string(i) + "]";
    const json& entry = samples_json[i];
    if (get_as<std::size_t>(entry, "label_id", where) != i) schema_error(where, "label_id out of order");
    const FeatureShape block{get_as<std::size_t>(entry, "h", where), get_as<std::size_t>(entry, "w", where),
                             get_as<std::size_t>(entry, "K", where)};
    if (block != shape) schema_error(where, "declared block shape differs from feature_shape");
    const json& blocks = field(entry, "features", where);
    if (!blocks.is_array()) schema_error(where + ".features", "expected an array");
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      const std::string bw = where + ".features[" + std::to_string(j) + "]";
      auto values = unpack_f32(decode_b64(blocks[j], bw));
      if (values.size() != shape.size()) schema_error(bw, "block holds the wrong number of values");
      try {
        samples[i].emplace_back(shape, std::move(values));
      } catch (const InvalidArgument& e) {
        schema_error(bw, e.what());
      }
    }
  }

  std::optional<LinearHead> head;
  const json& head_json = field(doc, "head", root);
  if (!head_json.is_null()) {
    LinearHead h;
    h.classes = get_as<std::size_t>(head_json, "classes", "$.head");
    h.features = get_as<std::size_t>(head_json, "features", "$.head");
    // A stale head may predate labels added after reopening.
    if (h.features != shape.channels || (h.classes != labels.size() && !get_as<bool>(doc, "head_stale", root))) {
      schema_error("$.head", "dimensions do not match labels and features");
    }
    h.weights = unpack_f64(decode_b64(field(head_json, "weights", "$.head"), "$.head.weights"));
    h.bias = unpack_f64(decode_b64(field(head_json, "bias", "$.head"), "$.head.bias"));
    if (h.weights.size() != h.classes * h.features || h.bias.size() != h.classes) {
      schema_error("$.head", "payload sizes do not match dimensions");
    }
    for (double v : h.weights) {
      if (!std::isfinite(v)) schema_error("$.head.weights", "non-finite value");
    }
    for (double v : h.bias) {
      if (!std::isfinite(v)) schema_error("$.head.bias", "non-finite value");
    }
    head = std::move(h);
  }
  const bool stale = get_as<bool>(doc, "head_stale", root);

  std::optional<TrainReport> report;
  const json& report_json = field(doc, "report", root);
  if (!report_json.is_null()) {
    TrainReport r;
    r.epoch_losses = unpack_f64(decode_b64(field(report_json, "epoch_losses", "$.report"), "$.report.epoch_losses"));
    r.train_accuracy = get_as<double>(report_json, "train_accuracy", "$.report");
    report = std::move(r);
  }

  return TeachingSession::restore(backbone_id, shape, config, seed, std::move(labels), std::move(samples),
                                  std::move(head), stale, std::move(report));
}

TeachingSession load_session(const std::string& path, const Backbone& backbone) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path, "cannot open file");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_session(text, backbone);
}

}  // namespace salient_teach
