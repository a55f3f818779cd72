#include "salient_teach/protocol.hpp"

#include <json.hpp>

#include "salient_teach/codec.hpp"
#include "salient_teach/image_io.hpp"
#include "salient_teach/service.hpp"

namespace salient_teach {

using json = nlohmann::json;

namespace {

// Failures that exist only at the protocol level.
struct ProtocolFailure {
  std::string code;
  std::string detail;
};

[[noreturn]] void protocol_error(std::string detail) { throw ProtocolFailure{"protocol_error", std::move(detail)}; }

std::string dump(const json& doc) { return doc.dump(-1, ' ', false, json::error_handler_t::replace); }

std::string error_message(std::string_view code, std::string_view detail) {
  return dump({{"type", "error"}, {"code", code}, {"detail", detail}});
}

const json* optional_field(const json& msg, const char* key) {
  auto it = msg.find(key);
  return it == msg.end() ? nullptr : &*it;
}

const json& required_field(const json& msg, const char* key) {
  const json* v = optional_field(msg, key);
  if (!v) protocol_error(std::string("missing field '") + key + "'");
  return *v;
}

std::uint64_t as_uint(const json& v, const char* key) {
  if (!v.is_number_unsigned()) protocol_error(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

double as_double(const json& v, const char* key) {
  if (!v.is_number()) protocol_error(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

const std::string& as_string(const json& v, const char* key) {
  if (!v.is_string()) protocol_error(std::string("field '") + key + "' must be a string");
  return v.get_ref<const std::string&>();
}

std::optional<std::size_t> optional_class(const json& msg, const char* key) {
  const json* v = optional_field(msg, key);
  if (!v || v->is_null()) return std::nullopt;
  return static_cast<std::size_t>(as_uint(*v, key));
}

TrainConfig parse_config(const json& msg, TrainConfig cfg) {
  const json* c = optional_field(msg, "config");
  if (!c || c->is_null()) return cfg;
  if (!c->is_object()) protocol_error("field 'config' must be an object");
  if (const json* v = optional_field(*c, "epochs")) {
    const auto e = as_uint(*v, "epochs");
    if (e > 100000) throw InvalidArgument("epochs must be at most 100000");
    cfg.epochs = static_cast<int>(e);
  }
  if (const json* v = optional_field(*c, "batch_size")) cfg.batch_size = as_uint(*v, "batch_size");
  if (const json* v = optional_field(*c, "learning_rate")) cfg.learning_rate = as_double(*v, "learning_rate");
  if (const json* v = optional_field(*c, "beta1")) cfg.beta1 = as_double(*v, "beta1");
  if (const json* v = optional_field(*c, "beta2")) cfg.beta2 = as_double(*v, "beta2");
  if (const json* v = optional_field(*c, "epsilon")) cfg.epsilon = as_double(*v, "epsilon");
  cfg.validate();
  return cfg;
}

Frame decode_frame_field(const json& msg) {
  const auto bytes = base64_decode(as_string(required_field(msg, "frame"), "frame"));
  return decode_image(bytes);
}

json labels_json(const TeachingSession& s) {
  json labels = json::array();
  for (const auto& l : s.labels()) labels.push_back({{"id", l.id}, {"name", l.name}, {"count", s.count(l.id)}});
  return labels;
}

json report_json(const TrainReport& r) {
  return {{"epoch_losses", r.epoch_losses},
          {"train_accuracy", r.train_accuracy},
          {"training_ms", r.training_ms ? json(*r.training_ms) : json(nullptr)}};
}

}  // namespace

struct Connection::Request {
  std::string type;
  json body;
};

Connection::Connection(BackbonePtr backbone, Sink sink, ConnectionOptions options)
    : backbone_(std::move(backbone)), sink_(std::move(sink)), options_(std::move(options)) {
  if (!backbone_) throw InvalidArgument("Connection: backbone is required");
  options_.default_config.validate();
}

Connection::~Connection() { close(); }

void Connection::emit(std::string text) {
  std::lock_guard lock(sink_mutex_);
  if (!closed_ && sink_) sink_(std::move(text));
}

void Connection::close() {
  {
    std::lock_guard lock(sink_mutex_);
    closed_ = true;
  }
  stop_training();
}

void Connection::stop_training() {
  if (trainer_.joinable()) {
    trainer_.request_stop();
    trainer_.join();
  }
}

void Connection::wait_for_training() {
  if (trainer_.joinable()) trainer_.join();
}

bool Connection::has_session() const {
  std::lock_guard lock(mutex_);
  return session_.has_value();
}

std::optional<SessionState> Connection::state() const {
  std::lock_guard lock(mutex_);
  if (!session_) return std::nullopt;
  return session_->state();
}

void Connection::handle_message(std::string_view text) {
  try {
    json body;
    try {
      body = json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
      protocol_error(std::string("malformed JSON: ") + e.what());
    }
    if (!body.is_object()) protocol_error("message must be a JSON object");
    const json* type = optional_field(body, "type");
    if (!type) protocol_error("missing field 'type'");
    if (!type->is_string()) protocol_error("field 'type' must be a string");
    dispatch({type->get<std::string>(), std::move(body)});
  } catch (const ProtocolFailure& f) {
    emit(error_message(f.code, f.detail));
  } catch (const Error& e) {
    emit(error_message(to_string(e.code()), e.what()));
  } catch (const std::exception& e) {
    emit(error_message("internal", e.what()));
  }
}

void Connection::dispatch(const Request& req) {
  const json& msg = req.body;
  const std::string& type = req.type;

  auto session = [this]() -> TeachingSession& {
    if (!session_) throw ProtocolFailure{"no_session", "send create_session or load first"};
    return *session_;
  };

  if (type == "create_session") {
    const TrainConfig cfg = parse_config(msg, options_.default_config);
    const json* seed_json = optional_field(msg, "seed");
    const std::uint64_t seed = seed_json && !seed_json->is_null() ? as_uint(*seed_json, "seed") : options_.default_seed;
    stop_training();
    std::lock_guard lock(mutex_);
    session_.emplace(create_session(*backbone_, cfg, seed));
    selected_class_.reset();
    emit(dump({{"type", "session_created"},
               {"labels", json::array()},
               {"state", to_string(session_->state())},
               {"backbone_id", session_->backbone_id()},
               {"seed", seed}}));
    return;
  }

  if (type == "load") {
    const auto bytes = base64_decode(as_string(required_field(msg, "blob"), "blob"));
    TeachingSession loaded =
        deserialize_session(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), *backbone_);
    stop_training();
    std::lock_guard lock(mutex_);
    session_.emplace(std::move(loaded));
    selected_class_.reset();
    emit(dump({{"type", "session_loaded"},
               {"labels", labels_json(*session_)},
               {"state", to_string(session_->state())},
               {"backbone_id", session_->backbone_id()},
               {"seed", session_->seed()}}));
    return;
  }

  if (type == "add_label") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    const std::string& name = as_string(required_field(msg, "name"), "name");
    const std::size_t id = s.add_label(name);
    emit(dump({{"type", "label_added"}, {"label_id", id}, {"name", name}}));
    return;
  }

  if (type == "add_sample") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    if (s.state() != SessionState::teaching) {
      throw StateError("add_sample requires state teaching, session is " + std::string(to_string(s.state())));
    }
    const std::size_t label = as_uint(required_field(msg, "label_id"), "label_id");
    s.label(label);
    const Frame frame = decode_frame_field(msg);
    const std::size_t count = s.add_sample(label, frame, *backbone_);
    emit(dump({{"type", "sample_added"}, {"label_id", label}, {"count", count}}));
    return;
  }

  if (type == "clear_label") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    const std::size_t label = as_uint(required_field(msg, "label_id"), "label_id");
    s.clear_label(label);
    emit(dump({{"type", "label_cleared"}, {"label_id", label}, {"count", 0}}));
    return;
  }

  if (type == "train") {
    start_training();
    return;
  }

  if (type == "frame") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    s.active_head();
    EvaluateOptions opts;
    opts.selected_class = optional_class(msg, "selected_class");
    if (!opts.selected_class) opts.selected_class = selected_class_;
    if (opts.selected_class && *opts.selected_class >= s.labels().size()) {
      throw NotFound("class " + std::to_string(*opts.selected_class) + " does not exist");
    }
    const Frame frame = decode_frame_field(msg);
    emit(prediction_json(evaluate_frame(s, *backbone_, frame, opts)));
    return;
  }

  if (type == "select_class") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    required_field(msg, "class_id");
    const std::optional<std::size_t> choice = optional_class(msg, "class_id");
    if (choice && *choice >= s.labels().size()) {
      throw NotFound("class " + std::to_string(*choice) + " does not exist (have " +
                     std::to_string(s.labels().size()) + ")");
    }
    selected_class_ = choice;
    emit(dump({{"type", "class_selected"}, {"class_id", choice ? json(*choice) : json(nullptr)}}));
    return;
  }

  if (type == "reopen") {
    std::lock_guard lock(mutex_);
    TeachingSession& s = session();
    s.reopen_teaching();
    emit(dump({{"type", "reopened"}, {"labels", labels_json(s)}, {"counts", s.counts()}}));
    return;
  }

  if (type == "save") {
    std::lock_guard lock(mutex_);
    const std::string text = serialize_session(session());
    emit(dump({{"type", "saved"}, {"blob", base64_encode(text)}}));
    return;
  }

  protocol_error("unknown message type '" + type + "'");
}

void Connection::start_training() {
  TrainingSet data;
  TrainConfig cfg;
  std::uint64_t seed = 0;
  {
    std::lock_guard lock(mutex_);
    if (!session_) throw ProtocolFailure{"no_session", "send create_session or load first"};
    session_->begin_training();
    data = session_->training_set();
    cfg = session_->config();
    seed = session_->seed();
  }

  auto job = [this, data = std::move(data), cfg, seed](std::stop_token stop) {
    auto on_epoch = [this](int epoch, double loss) {
      emit(dump({{"type", "train_progress"}, {"epoch", epoch}, {"loss", loss}}));
    };
    try {
      auto result = train(data, cfg, seed, stop, on_epoch);
      std::lock_guard lock(mutex_);
      const json report = report_json(result.report);
      session_->complete_training(std::move(result.head), std::move(result.report));
      emit(dump({{"type", "trained"}, {"report", report}, {"state", to_string(session_->state())}}));
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex_);
      if (session_ && session_->state() == SessionState::training) session_->cancel_training();
      const auto* coded = dynamic_cast<const Error*>(&e);
      emit(error_message(coded ? to_string(coded->code()) : "internal", e.what()));
    }
  };

  if (!options_.background_training) {
    job(std::stop_token{});
    return;
  }
  if (trainer_.joinable()) trainer_.join();
  trainer_ = std::jthread(std::move(job));
}

}  // namespace salient_teach
