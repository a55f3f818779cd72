#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "salient_teach/errors.hpp"
#include "salient_teach/feature_tensor.hpp"

namespace salient_teach {

/// Packed 8-bit RGB image, row-major, with a capture timestamp.
struct Frame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
  std::int64_t timestamp_ms = 0;

  void validate() const {
    if (width == 0 || height == 0) throw InvalidArgument("frame has a zero dimension");
    if (pixels.size() != width * height * 3) {
      throw InvalidArgument("frame buffer holds " + std::to_string(pixels.size()) + " bytes, expected " +
                            std::to_string(width * height * 3));
    }
  }
};

/// The centred square a frame is cropped to before resizing.
struct CropRegion {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t side = 0;
  friend bool operator==(const CropRegion&, const CropRegion&) = default;
};

/// Largest centred square of a width x height frame.
inline CropRegion center_crop(std::size_t width, std::size_t height) {
  const std::size_t side = width < height ? width : height;
  return {(width - side) / 2, (height - side) / 2, side};
}

struct InputSpec {
  std::size_t side = 224;
  double range_min = -1.0;
  double range_max = 1.0;
  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

/// side x side x 3 values, HWC order, mapped from [0,255] into the InputSpec range.
struct ModelInput {
  std::size_t side = 0;
  std::vector<float> values;
};

/// Centre-crop to the largest square, bilinear-resize (half-pixel centres) to
/// spec.side, and map each channel linearly from [0,255] onto the spec range
/// (v / 127.5 - 1 for the default [-1,1]).
ModelInput preprocess(const Frame& frame, const InputSpec& spec = {});

/// Frozen feature extractor. Implementations are immutable once built, so a
/// shared instance may serve concurrent extract calls.
class Backbone {
 public:
  virtual ~Backbone() = default;

  /// "sha256:<hex>" of the model file bytes or of the test descriptor string.
  const std::string& identity() const noexcept { return identity_; }
  const InputSpec& input_spec() const noexcept { return input_spec_; }
  const FeatureShape& output_spec() const noexcept { return output_spec_; }
  /// Human-readable origin, e.g. the model path or "test:1:8:4:4".
  const std::string& source() const noexcept { return source_; }

  /// Runs the network to the tapped layer. The pooled vector is recomputed
  /// from the maps, never taken from the model.
  FeatureTensor extract(const ModelInput& input) const;

 protected:
  Backbone(std::string source, std::string identity, InputSpec input, FeatureShape output)
      : source_(std::move(source)), identity_(std::move(identity)), input_spec_(input), output_spec_(output) {}

  /// Channel-major activations (K x h x w) for a validated input.
  virtual std::vector<float> run(const ModelInput& input) const = 0;

 private:
  std::string source_;
  std::string identity_;
  InputSpec input_spec_;
  FeatureShape output_spec_;
};

using BackbonePtr = std::shared_ptr<const Backbone>;

/// Deterministic stand-in network: every cell of an h x w patch grid is
/// described by its channel means and mean absolute gradients, and each of the
/// K channels is tanh of a fixed seeded random projection of that descriptor.
BackbonePtr make_test_backbone(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width);

/// Opens an ONNX model file, or builds a test backbone from "test:<seed>:<K>:<h>:<w>".
BackbonePtr load_backbone(std::string_view source);

/// SHA-256 of a byte string, as "sha256:<lowercase hex>".
std::string content_hash(std::string_view bytes);

}  // namespace salient_teach
