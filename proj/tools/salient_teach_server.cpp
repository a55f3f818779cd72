#include <CLI11.hpp>
#include <spdlog/cfg/helpers.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include "salient_teach/server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"WebSocket teaching server"};
  salient_teach::ServerOptions options;
  std::string backbone;
  app.add_option("--listen", options.listen, "host:port to listen on")->capture_default_str();
  app.add_option("--backbone", backbone, "ONNX model path or test:<seed>:<K>:<h>:<w>")->required();
  app.add_option("--max-sessions", options.max_sessions, "Concurrent WebSocket sessions")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--ui-dir", options.ui_dir, "Directory served under /ui");
  app.add_option("--threads", options.threads, "I/O threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--seed", options.connection.default_seed, "Seed for sessions created without one");
  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("SALIENT_TEACH_LOG")) spdlog::cfg::helpers::load_levels(level);

  try {
    auto model = salient_teach::load_backbone(backbone);
    const auto& spec = model->output_spec();
    spdlog::info("backbone {} ({}), features {}x{}x{}", model->source(), model->identity(), spec.height, spec.width,
                 spec.channels);
    salient_teach::Server server(model, options);
    server.start();
    server.wait();
  } catch (const std::exception& e) {
    spdlog::critical("{}", e.what());
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}
