#pragma once

// Minimal ONNX executor for convolutional backbones. It locates the first
// global-average pooling stage, keeps only the nodes that feed it, and runs
// that prefix on the CPU in float32.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "salient_teach/feature_tensor.hpp"

namespace salient_teach::onnx_exec {

enum class Layout { nchw, nhwc };

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;
  std::vector<std::int64_t> ints;
  bool integral = false;

  std::size_t numel() const;
};

using TensorPtr = std::shared_ptr<const Tensor>;

struct Attribute {
  enum class Kind { none, i, f, s, ints, floats, tensor };
  Kind kind = Kind::none;
  std::int64_t i = 0;
  float f = 0.0f;
  std::string s;
  std::vector<std::int64_t> ints;
  std::vector<float> floats;
  TensorPtr tensor;
};

struct Node {
  std::string name;
  std::string op;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, Attribute, std::less<>> attrs;
};

using Env = std::unordered_map<std::string, TensorPtr>;

class Model {
 public:
  /// Parses serialized ModelProto bytes. origin names the source in errors.
  static Model parse(std::string_view bytes, const std::string& origin);

  Layout input_layout() const noexcept { return input_layout_; }
  std::size_t input_side() const noexcept { return side_; }
  Layout tap_layout() const noexcept { return tap_layout_; }
  const std::string& tap_name() const noexcept { return tap_name_; }
  const FeatureShape& tap_shape() const noexcept { return tap_shape_; }
  std::size_t plan_size() const noexcept { return plan_.size(); }

  /// Runs the plan on an HWC side x side x 3 input; returns K x h x w maps.
  std::vector<float> run(std::span<const float> hwc) const;

 private:
  Model() = default;
  Env execute(std::span<const float> hwc, const std::vector<std::size_t>& steps, const std::string& keep) const;
  TensorPtr make_input(std::span<const float> hwc) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> plan_;
  std::vector<std::vector<std::string>> release_after_;
  Env constants_;
  std::int64_t opset_ = 0;
  std::string origin_;
  std::string input_name_;
  Layout input_layout_ = Layout::nchw;
  std::size_t side_ = 224;
  std::string tap_name_;
  Layout tap_layout_ = Layout::nchw;
  FeatureShape tap_shape_;
};

/// Executes one node. Exposed for unit tests of individual operators.
std::vector<TensorPtr> run_node(const Node& node, std::int64_t opset, const Env& env);

}  // namespace salient_teach::onnx_exec
