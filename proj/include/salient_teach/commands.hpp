#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "salient_teach/trainer.hpp"

namespace salient_teach {

struct CommonOptions {
  std::string backbone;
  std::uint64_t seed = 0;
  TrainConfig config;
};

struct TeachOptions : CommonOptions {
  std::string data_dir;
  std::string out_path;
  /// One label name per line; replaces directory discovery and fixes the order.
  std::optional<std::string> labels_file;
};

struct EvalOptions : CommonOptions {
  std::string session_path;
  /// An image file, or a directory whose images are evaluated in sorted order.
  std::string image_path;
  std::optional<std::string> class_name;
  /// PNG path for a single image, or an output directory for a directory input.
  std::optional<std::string> overlay_out;
  bool clip_negative = false;
};

struct BenchOptions : CommonOptions {
  std::string session_path;
  std::size_t frames = 100;
  /// Directory of images cycled through instead of the synthetic pattern.
  std::optional<std::string> frames_dir;
};

/// Each command writes JSON lines to out, diagnostics to err, and returns a
/// process exit status.
int cmd_teach(const TeachOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchOptions& options, std::ostream& out, std::ostream& err);

}  // namespace salient_teach
