#include "salient_teach/server.hpp"

#include <boost/asio/dispatch.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/signal_set.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/version.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <mutex>
#include <set>
#include <thread>
#include <vector>

#include "salient_teach/saliency.hpp"

namespace salient_teach {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

std::string colormap_csv() {
  std::string out = "r,g,b\n";
  for (const Rgb& c : kHeatColormap) {
    out += std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b) + "\n";
  }
  return out;
}

namespace {

std::string_view mime_type(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".html" || ext == ".htm") return "text/html; charset=utf-8";
  if (ext == ".js" || ext == ".mjs") return "text/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json" || ext == ".map") return "application/json";
  if (ext == ".csv") return "text/csv";
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".ico") return "image/vnd.microsoft.icon";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

std::pair<std::string, std::string> split_listen(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw InvalidArgument("listen address must be host:port, got '" + listen + "'");
  std::string host = listen.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  return {host, listen.substr(colon + 1)};
}

}  // namespace

struct Server::Impl {
  class WsSession;
  class HttpSession;
  class Listener;

  Impl(BackbonePtr b, ServerOptions o)
      : backbone(std::move(b)), options(std::move(o)), ioc(static_cast<int>(options.threads)) {}

  BackbonePtr backbone;
  ServerOptions options;
  net::io_context ioc;
  std::shared_ptr<Listener> listener;
  std::vector<std::thread> threads;
  std::atomic<std::size_t> sessions{0};
  std::uint16_t bound_port = 0;

  std::mutex live_mutex;
  std::set<std::weak_ptr<WsSession>, std::owner_less<std::weak_ptr<WsSession>>> live;

  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  bool stopped = false;
  bool started = false;
};

// One WebSocket client. Messages are read one at a time and handled on the
// session's strand, so a connection's replies keep arrival order.
class Server::Impl::WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(Impl& server, tcp::socket&& socket) : server_(server), ws_(std::move(socket)) {}

  ~WsSession() { server_.sessions.fetch_sub(1); }

  template <typename Body, typename Allocator>
  void accept(http::request<Body, http::basic_fields<Allocator>> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.set_option(websocket::stream_base::decorator([](websocket::response_type& res) {
      res.set(http::field::server, "salient_teach");
    }));
    ws_.read_message_max(server_.options.max_message_bytes);
    std::weak_ptr<WsSession> weak = shared_from_this();
    connection_ = std::make_unique<Connection>(
        server_.backbone,
        [weak](std::string text) {
          if (auto self = weak.lock()) {
            net::post(self->ws_.get_executor(), [self, text = std::move(text)]() mutable { self->queue(std::move(text)); });
          }
        },
        server_.options.connection);
    {
      std::lock_guard lock(server_.live_mutex);
      std::erase_if(server_.live, [](const auto& w) { return w.expired(); });
      server_.live.insert(weak);
    }
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

  void close() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->closing_) return;
      self->closing_ = true;
      beast::error_code ec;
      beast::get_lowest_layer(self->ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
      beast::get_lowest_layer(self->ws_).socket().close(ec);
    });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return finish("accept", ec);
    spdlog::info("websocket session opened ({} active)", server_.sessions.load());
    read();
  }

  void read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return finish("read", ec);
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    spdlog::debug("received {} bytes", text.size());
    connection_->handle_message(text);
    read();
  }

  void queue(std::string text) {
    if (closing_) return;
    outbox_.push_back(std::move(text));
    if (outbox_.size() == 1) write();
  }

  void write() {
    ws_.text(true);
    ws_.async_write(net::buffer(outbox_.front()), beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) return finish("write", ec);
    outbox_.pop_front();
    if (!outbox_.empty()) write();
  }

  void finish(const char* what, beast::error_code ec) {
    if (ec != websocket::error::closed && ec != net::error::operation_aborted && ec != net::error::eof) {
      spdlog::debug("websocket {}: {}", what, ec.message());
    }
    closing_ = true;
    outbox_.clear();
    if (connection_) connection_->close();
  }

  Impl& server_;
  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::unique_ptr<Connection> connection_;
  std::deque<std::string> outbox_;
  bool closing_ = false;
};

// Plain HTTP: static /ui files, the colormap, or an upgrade to WebSocket.
class Server::Impl::HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(Impl& server, tcp::socket&& socket) : server_(server), stream_(std::move(socket)) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::read, shared_from_this()));
  }

 private:
  void read() {
    parser_.emplace();
    parser_->body_limit(64 * 1024);
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, *parser_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec == http::error::end_of_stream) return shutdown();
    if (ec) return;
    auto req = parser_->release();

    if (websocket::is_upgrade(req)) {
      if (server_.sessions.fetch_add(1) >= server_.options.max_sessions) {
        server_.sessions.fetch_sub(1);
        spdlog::warn("rejecting connection: {} sessions active", server_.options.max_sessions);
        return send_text(req, http::status::service_unavailable, "text/plain", "too many sessions\n");
      }
      stream_.expires_never();
      std::make_shared<WsSession>(server_, stream_.release_socket())->accept(std::move(req));
      return;
    }
    handle(req);
  }

  using Request = http::request<http::string_body>;

  void send_text(const Request& req, http::status status, std::string_view type, std::string body) {
    http::response<http::string_body> res{status, req.version()};
    res.set(http::field::server, "salient_teach");
    res.set(http::field::content_type, std::string(type));
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    send(std::move(res));
  }

  void handle(const Request& req) {
    if (req.method() != http::verb::get && req.method() != http::verb::head) {
      return send_text(req, http::status::method_not_allowed, "text/plain", "method not allowed\n");
    }
    const auto raw = req.target();
    std::string target(raw.substr(0, raw.find('?')));
    if (target == "/colormap.csv") return send_text(req, http::status::ok, "text/csv", colormap_csv());
    if (target == "/") {
      http::response<http::empty_body> res{http::status::found, req.version()};
      res.set(http::field::location, "/ui/");
      res.keep_alive(req.keep_alive());
      res.prepare_payload();
      return send(std::move(res));
    }
    if (!server_.options.ui_dir || !(target == "/ui" || target.starts_with("/ui/"))) {
      return send_text(req, http::status::not_found, "text/plain", "not found\n");
    }
    std::string rel = target.size() > 4 ? target.substr(4) : "";
    if (rel.empty() || rel.back() == '/') rel += "index.html";
    if (rel.find("..") != std::string::npos || rel.find('\\') != std::string::npos || rel.front() == '/') {
      return send_text(req, http::status::bad_request, "text/plain", "bad path\n");
    }
    const std::filesystem::path path = std::filesystem::path(*server_.options.ui_dir) / rel;
    beast::error_code ec;
    http::file_body::value_type body;
    std::error_code fs_ec;
    if (std::filesystem::is_regular_file(path, fs_ec)) body.open(path.string().c_str(), beast::file_mode::scan, ec);
    if (ec || !body.is_open()) return send_text(req, http::status::not_found, "text/plain", "not found\n");
    const auto size = body.size();
    if (req.method() == http::verb::head) {
      http::response<http::empty_body> res{http::status::ok, req.version()};
      res.set(http::field::content_type, std::string(mime_type(path)));
      res.content_length(size);
      res.keep_alive(req.keep_alive());
      return send(std::move(res));
    }
    http::response<http::file_body> res{std::piecewise_construct, std::make_tuple(std::move(body)),
                                        std::make_tuple(http::status::ok, req.version())};
    res.set(http::field::server, "salient_teach");
    res.set(http::field::content_type, std::string(mime_type(path)));
    res.content_length(size);
    res.keep_alive(req.keep_alive());
    send(std::move(res));
  }

  template <typename Body>
  void send(http::response<Body>&& msg) {
    auto res = std::make_shared<http::response<Body>>(std::move(msg));
    const bool keep_alive = res->keep_alive();
    http::async_write(stream_, *res, [self = shared_from_this(), res, keep_alive](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!keep_alive) return self->shutdown();
      self->read();
    });
  }

  void shutdown() {
    beast::error_code ec;
    stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  }

  Impl& server_;
  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
};

class Server::Impl::Listener : public std::enable_shared_from_this<Listener> {
 public:
  Listener(Impl& server, const tcp::endpoint& endpoint) : server_(server), acceptor_(net::make_strand(server.ioc)) {
    acceptor_.open(endpoint.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(endpoint);
    acceptor_.listen(net::socket_base::max_listen_connections);
  }

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  void run() { accept(); }

  void close() {
    net::post(acceptor_.get_executor(), [self = shared_from_this()] {
      beast::error_code ec;
      self->acceptor_.close(ec);
    });
  }

 private:
  void accept() {
    acceptor_.async_accept(net::make_strand(server_.ioc),
                           beast::bind_front_handler(&Listener::on_accept, shared_from_this()));
  }

  void on_accept(beast::error_code ec, tcp::socket socket) {
    if (ec == net::error::operation_aborted || !acceptor_.is_open()) return;
    if (!ec) std::make_shared<HttpSession>(server_, std::move(socket))->run();
    accept();
  }

  Impl& server_;
  tcp::acceptor acceptor_;
};

Server::Server(BackbonePtr backbone, ServerOptions options) {
  if (!backbone) throw InvalidArgument("Server: backbone is required");
  if (options.threads == 0) options.threads = 1;
  impl_ = std::make_unique<Impl>(std::move(backbone), std::move(options));
}

Server::~Server() { stop(); }

void Server::start() {
  Impl& s = *impl_;
  if (s.started) return;
  const auto [host, port] = split_listen(s.options.listen);
  tcp::resolver resolver(s.ioc);
  beast::error_code ec;
  const auto results = resolver.resolve(host, port, ec);
  if (ec || results.empty()) throw InvalidArgument("cannot resolve listen address '" + s.options.listen + "'");
  const tcp::endpoint endpoint = *results.begin();
  s.listener = std::make_shared<Impl::Listener>(s, endpoint);
  s.bound_port = s.listener->port();
  s.listener->run();
  s.started = true;
  for (std::size_t i = 0; i < s.options.threads; ++i) s.threads.emplace_back([&s] { s.ioc.run(); });
  spdlog::info("listening on {}:{}", endpoint.address().to_string(), s.bound_port);
}

void Server::stop() {
  if (!impl_) return;
  Impl& s = *impl_;
  {
    std::lock_guard lock(s.stop_mutex);
    if (s.stopped) return;
    s.stopped = true;
  }
  s.stop_cv.notify_all();
  if (s.listener) s.listener->close();
  {
    std::lock_guard lock(s.live_mutex);
    for (const auto& weak : s.live) {
      if (auto session = weak.lock()) session->close();
    }
  }
  // Let in-flight handlers observe the closed sockets before stopping.
  for (int i = 0; i < 200 && s.sessions.load() > 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  s.ioc.stop();
  for (auto& t : s.threads) {
    if (t.joinable()) t.join();
  }
}

void Server::wait() {
  Impl& s = *impl_;
  net::io_context signals_ctx;
  net::signal_set signals(signals_ctx, SIGINT, SIGTERM);
  signals.async_wait([this](beast::error_code, int sig) {
    spdlog::info("signal {} received, shutting down", sig);
    std::lock_guard lock(impl_->stop_mutex);
    impl_->stopped = true;
    impl_->stop_cv.notify_all();
  });
  std::thread signal_thread([&signals_ctx] { signals_ctx.run(); });
  {
    std::unique_lock lock(s.stop_mutex);
    s.stop_cv.wait(lock, [&s] { return s.stopped; });
  }
  signals_ctx.stop();
  signal_thread.join();
  {
    std::lock_guard lock(s.stop_mutex);
    s.stopped = false;
  }
  stop();
}

std::uint16_t Server::port() const { return impl_->bound_port; }

std::size_t Server::active_sessions() const { return impl_->sessions.load(); }

}  // namespace salient_teach
