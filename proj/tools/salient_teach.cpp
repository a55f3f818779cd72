#include <CLI11.hpp>

#include <iostream>

#include "salient_teach/commands.hpp"

namespace {

void add_common(CLI::App& cmd, salient_teach::CommonOptions& o) {
  cmd.add_option("--backbone", o.backbone, "ONNX model path or test:<seed>:<K>:<h>:<w>")->required();
  cmd.add_option("--seed", o.seed, "Training seed");
  cmd.add_option("--epochs", o.config.epochs, "Training epochs")->check(CLI::PositiveNumber);
  cmd.add_option("--batch-size", o.config.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  cmd.add_option("--lr", o.config.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teach, evaluate and benchmark image classifiers with saliency maps"};
  app.require_subcommand(1);

  salient_teach::TeachOptions teach;
  auto* teach_cmd = app.add_subcommand("teach", "Train a session from labelled image directories");
  add_common(*teach_cmd, teach);
  teach_cmd->add_option("--data", teach.data_dir, "Directory with one subdirectory per label")->required();
  teach_cmd->add_option("--out", teach.out_path, "Session file to write")->required();
  teach_cmd->add_option("--labels", teach.labels_file, "File listing label names in order");

  salient_teach::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score images with a trained session");
  add_common(*eval_cmd, eval);
  eval_cmd->add_option("--session", eval.session_path, "Session file")->required();
  eval_cmd->add_option("--image", eval.image_path, "Image file or directory")->required();
  eval_cmd->add_option("--class", eval.class_name, "Label whose saliency map to render");
  eval_cmd->add_option("--overlay", eval.overlay_out, "Overlay PNG path (directory for directory input)");
  eval_cmd->add_flag("--clip-negative", eval.clip_negative, "Zero negative evidence before normalising");

  salient_teach::BenchOptions bench;
  auto* bench_cmd = app.add_subcommand("bench", "Measure per-frame latency");
  add_common(*bench_cmd, bench);
  bench_cmd->add_option("--session", bench.session_path, "Session file")->required();
  bench_cmd->add_option("--n", bench.frames, "Number of frames")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--frames", bench.frames_dir, "Directory of frames to cycle through");

  CLI11_PARSE(app, argc, argv);

  if (*teach_cmd) return salient_teach::cmd_teach(teach, std::cout, std::cerr);
  if (*eval_cmd) return salient_teach::cmd_eval(eval, std::cout, std::cerr);
  return salient_teach::cmd_bench(bench, std::cout, std::cerr);
}
