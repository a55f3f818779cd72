#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "salient_teach/backbone.hpp"
#include "salient_teach/protocol.hpp"

namespace salient_teach {

struct ServerOptions {
  /// host:port; port 0 picks a free port.
  std::string listen = "127.0.0.1:8080";
  std::size_t max_sessions = 16;
  std::size_t max_message_bytes = 16u << 20;
  /// Static files served under /ui.
  std::optional<std::string> ui_dir;
  std::size_t threads = 2;
  ConnectionOptions connection;
};

/// WebSocket endpoint for the session protocol plus static /ui files and the
/// shared /colormap.csv.
class Server {
 public:
  Server(BackbonePtr backbone, ServerOptions options);
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts serving on background threads.
  void start();
  /// Closes the listener and all connections, then joins the threads.
  void stop();
  /// Blocks until stop() is called or SIGINT/SIGTERM arrives.
  void wait();

  std::uint16_t port() const;
  std::size_t active_sessions() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// The heat colormap as shipped in assets/colormap.csv.
std::string colormap_csv();

}  // namespace salient_teach
