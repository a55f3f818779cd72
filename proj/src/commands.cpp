#include "salient_teach/commands.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "salient_teach/image_io.hpp"
#include "salient_teach/service.hpp"
#include "salient_teach/session.hpp"

namespace salient_teach {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string dump(const json& doc) { return doc.dump(-1, ' ', false, json::error_handler_t::replace); }

void warn(std::ostream& err, const std::string& message) { err << "warning: " << message << '\n'; }

int fail(std::ostream& err, const std::string& message) {
  err << "error: " << message << '\n';
  return 1;
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::error_code ec;
    if (directories ? entry.is_directory(ec) : entry.is_regular_file(ec)) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

std::vector<std::string> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path, "cannot open label manifest");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

json report_json(const TrainReport& r) {
  return {{"epoch_losses", r.epoch_losses},
          {"train_accuracy", r.train_accuracy},
          {"training_ms", r.training_ms ? json(*r.training_ms) : json(nullptr)}};
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    return fail(err, std::string(to_string(e.code())) + ": " + e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(err, e.what());
  } catch (const std::exception& e) {
    return fail(err, e.what());
  }
}

}  // namespace

int cmd_teach(const TeachOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const fs::path root(o.data_dir);
    if (!fs::is_directory(root)) return fail(err, "data directory '" + o.data_dir + "' does not exist");
    std::vector<std::string> names;
    if (o.labels_file) {
      names = read_manifest(*o.labels_file);
    } else {
      for (const auto& d : sorted_entries(root, true)) names.push_back(d.filename().string());
    }
    if (names.size() < 2) {
      return fail(err, "need at least 2 label directories in '" + o.data_dir + "', found " +
                           std::to_string(names.size()));
    }

    const BackbonePtr backbone = load_backbone(o.backbone);
    TeachingSession session = create_session(*backbone, o.config, o.seed);
    for (const auto& name : names) {
      const std::size_t id = session.add_label(name);
      const fs::path dir = root / name;
      if (!fs::is_directory(dir)) return fail(err, "label directory '" + dir.string() + "' does not exist");
      for (const auto& file : sorted_entries(dir, false)) {
        try {
          session.add_sample(id, read_image(file.string()), *backbone);
        } catch (const LoadError& e) {
          warn(err, std::string("skipping ") + e.what());
        }
      }
      if (session.count(id) == 0) return fail(err, "label '" + name + "' has no readable images");
    }

    const TrainReport report = train_session(session, {}, [&out](int epoch, double loss) {
      out << dump({{"type", "epoch"}, {"epoch", epoch}, {"loss", loss}}) << '\n';
    });
    save_session(session, o.out_path);

    json counts = json::object();
    for (const auto& l : session.labels()) counts[l.name] = session.count(l.id);
    out << dump({{"type", "trained"}, {"session", o.out_path}, {"counts", counts}, {"report", report_json(report)}})
        << '\n';
    return 0;
  });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const BackbonePtr backbone = load_backbone(o.backbone);
    const TeachingSession session = load_session(o.session_path, *backbone);
    session.active_head();

    EvaluateOptions eval;
    eval.overlay.clip_negative = o.clip_negative;
    if (o.class_name) {
      eval.selected_class = session.find_label(*o.class_name);
      if (!eval.selected_class) {
        std::string valid;
        for (const auto& l : session.labels()) valid += (valid.empty() ? "" : ", ") + l.name;
        return fail(err, "unknown class '" + *o.class_name + "'; valid labels: " + valid);
      }
    }

    const fs::path input(o.image_path);
    const bool is_dir = fs::is_directory(input);
    std::vector<fs::path> images = is_dir ? sorted_entries(input, false) : std::vector<fs::path>{input};
    if (is_dir && o.overlay_out) fs::create_directories(*o.overlay_out);

    for (const auto& path : images) {
      Frame frame;
      try {
        frame = read_image(path.string());
      } catch (const LoadError& e) {
        if (!is_dir) throw;
        warn(err, std::string("skipping ") + e.what());
        continue;
      }
      EvaluateOptions opts = eval;
      if (o.overlay_out) opts.overlay_side = center_crop(frame.width, frame.height).side;
      const PredictionResult r = evaluate_frame(session, *backbone, frame, opts);

      json scores = json::array();
      for (const auto& s : r.scores) scores.push_back({{"label_id", s.label_id}, {"name", s.name}, {"p", s.p}});
      json line = {{"image", path.string()},
                   {"scores", scores},
                   {"saliency_class", r.saliency_class},
                   {"saliency_label", session.label(r.saliency_class).name},
                   {"latency",
                    {{"inference_ms", r.latency.inference_ms},
                     {"render_ms", r.latency.render_ms},
                     {"total_ms", r.latency.total_ms}}}};
      if (o.overlay_out) {
        const std::string target =
            is_dir ? (fs::path(*o.overlay_out) / (path.stem().string() + ".overlay.png")).string() : *o.overlay_out;
        write_file(target, encode_png(composite_overlay(frame, *r.overlay)));
        line["overlay"] = target;
      }
      out << dump(line) << '\n';
    }
    return 0;
  });
}

int cmd_bench(const BenchOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const BackbonePtr backbone = load_backbone(o.backbone);
    const TeachingSession session = load_session(o.session_path, *backbone);
    session.active_head();

    // Wall-clock time is not persisted, so re-run the deterministic training on
    // the stored features to measure it.
    const auto retrained = train(session.training_set(), session.config(), session.seed());
    const bool reproduced = retrained.head == *session.head();

    FrameSource source;
    std::vector<Frame> frames;
    if (o.frames_dir) {
      for (const auto& p : sorted_entries(*o.frames_dir, false)) {
        try {
          frames.push_back(read_image(p.string()));
        } catch (const LoadError& e) {
          warn(err, std::string("skipping ") + e.what());
        }
      }
      if (frames.empty()) return fail(err, "no readable frames in '" + *o.frames_dir + "'");
      source = [&frames](std::size_t i) { return frames[i % frames.size()]; };
    }
    const BenchReport report = bench(session, *backbone, o.frames, source, {}, retrained.report.training_ms);
    json doc = json::parse(bench_json(report));
    doc["type"] = "bench";
    doc["training_samples"] = session.training_set().samples.size();
    doc["retrained_head_matches"] = reproduced;
    out << dump(doc) << '\n';
    return 0;
  });
}

}  // namespace salient_teach
