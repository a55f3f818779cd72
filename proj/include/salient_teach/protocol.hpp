#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include "salient_teach/backbone.hpp"
#include "salient_teach/session.hpp"

namespace salient_teach {

struct ConnectionOptions {
  TrainConfig default_config;
  std::uint64_t default_seed = 0;
  /// Train on a worker thread so the connection keeps answering; when false
  /// the train message blocks until training finishes.
  bool background_training = true;
};

/// Server side of one client connection: owns at most one TeachingSession and
/// turns each inbound JSON text message into outbound JSON text messages.
///
/// handle_message must be called sequentially. The sink may be invoked from
/// the training thread as well, so it must be safe to call concurrently with
/// handle_message. Every inbound message yields exactly one response, except
/// a successful train, which yields one train_progress per epoch followed by
/// trained.
class Connection {
 public:
  using Sink = std::function<void(std::string)>;

  Connection(BackbonePtr backbone, Sink sink, ConnectionOptions options = {});
  ~Connection();

  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  void handle_message(std::string_view text);

  /// Blocks until any running training has finished.
  void wait_for_training();

  /// Cancels running training and stops emitting messages.
  void close();

  bool has_session() const;
  std::optional<SessionState> state() const;

 private:
  struct Request;

  void dispatch(const Request& req);
  void start_training();
  void stop_training();
  void emit(std::string text);

  BackbonePtr backbone_;
  Sink sink_;
  ConnectionOptions options_;

  mutable std::mutex mutex_;
  std::optional<TeachingSession> session_;
  std::optional<std::size_t> selected_class_;
  std::jthread trainer_;

  std::mutex sink_mutex_;
  bool closed_ = false;
};

}  // namespace salient_teach
