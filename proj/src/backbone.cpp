#include "salient_teach/backbone.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "onnx_model.hpp"
#include "salient_teach/tensor_core.hpp"
#include "salient_teach/trainer.hpp"

namespace salient_teach {

ModelInput preprocess(const Frame& frame, const InputSpec& spec) {
  frame.validate();
  if (spec.side == 0) throw InvalidArgument("preprocess: input side must be positive");
  if (!(spec.range_max > spec.range_min)) throw InvalidArgument("preprocess: empty normalisation range");
  const CropRegion crop = center_crop(frame.width, frame.height);
  const auto rows = detail::resample_taps(crop.side, spec.side);
  const auto cols = detail::resample_taps(crop.side, spec.side);
  const double divisor = 255.0 / (spec.range_max - spec.range_min);
  auto pixel = [&](std::size_t r, std::size_t c, std::size_t ch) {
    return static_cast<double>(frame.pixels[((crop.y + r) * frame.width + crop.x + c) * 3 + ch]);
  };
  ModelInput out{spec.side, std::vector<float>(spec.side * spec.side * 3)};
  for (std::size_t r = 0; r < spec.side; ++r) {
    const auto& ry = rows[r];
    for (std::size_t c = 0; c < spec.side; ++c) {
      const auto& cx = cols[c];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = detail::lerp(pixel(ry.lo, cx.lo, ch), pixel(ry.lo, cx.hi, ch), cx.frac);
        const double bottom = detail::lerp(pixel(ry.hi, cx.lo, ch), pixel(ry.hi, cx.hi, ch), cx.frac);
        const double v = detail::lerp(top, bottom, ry.frac);
        out.values[(r * spec.side + c) * 3 + ch] = static_cast<float>(v / divisor + spec.range_min);
      }
    }
  }
  return out;
}

FeatureTensor Backbone::extract(const ModelInput& input) const {
  const std::size_t side = input_spec_.side;
  if (input.side != side || input.values.size() != side * side * 3) {
    throw InvalidArgument("extract: input is " + std::to_string(input.side) + "x" + std::to_string(input.side) +
                          " with " + std::to_string(input.values.size()) + " values, backbone expects " +
                          std::to_string(side) + "x" + std::to_string(side) + "x3");
  }
  const auto lo = static_cast<float>(input_spec_.range_min);
  const auto hi = static_cast<float>(input_spec_.range_max);
  for (float v : input.values) {
    if (!(v >= lo && v <= hi)) throw InvalidArgument("extract: input value outside the backbone's range");
  }
  auto maps = run(input);
  if (maps.size() != output_spec_.size()) {
    throw InvalidArgument("extract: backbone produced " + std::to_string(maps.size()) + " activations, expected " +
                          to_string(output_spec_));
  }
  return FeatureTensor(output_spec_, std::move(maps));
}

std::string content_hash(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out = "sha256:";
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

namespace {

constexpr std::size_t kDescriptorSize = 6;

std::string test_descriptor(std::uint64_t seed, std::size_t k, std::size_t h, std::size_t w) {
  return "test:" + std::to_string(seed) + ":" + std::to_string(k) + ":" + std::to_string(h) + ":" + std::to_string(w);
}

class TestBackbone final : public Backbone {
 public:
  TestBackbone(std::uint64_t seed, std::size_t k, std::size_t h, std::size_t w)
      : Backbone(test_descriptor(seed, k, h, w), content_hash(test_descriptor(seed, k, h, w)), InputSpec{},
                 FeatureShape{h, w, k}),
        projection_(k * kDescriptorSize),
        offset_(k) {
    detail::ShuffleRng rng(seed);
    auto uniform = [&rng] { return static_cast<double>(rng.next() >> 11) * 0x1.0p-53 * 2.0 - 1.0; };
    for (double& p : projection_) p = uniform();
    for (double& q : offset_) q = 0.5 * uniform();
  }

 protected:
  std::vector<float> run(const ModelInput& input) const override {
    const FeatureShape& shape = output_spec();
    const std::size_t side = input.side;
    std::vector<float> maps(shape.size());
    auto at = [&](std::size_t r, std::size_t c, std::size_t ch) {
      return static_cast<double>(input.values[(r * side + c) * 3 + ch]);
    };
    for (std::size_t i = 0; i < shape.height; ++i) {
      const std::size_t r0 = i * side / shape.height;
      const std::size_t r1 = std::max(r0 + 1, (i + 1) * side / shape.height);
      for (std::size_t j = 0; j < shape.width; ++j) {
        const std::size_t c0 = j * side / shape.width;
        const std::size_t c1 = std::max(c0 + 1, (j + 1) * side / shape.width);
        double desc[kDescriptorSize] = {};
        const double cells = static_cast<double>((r1 - r0) * (c1 - c0));
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double sum = 0.0;
          double grad = 0.0;
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t c = c0; c < c1; ++c) {
              sum += at(r, c, ch);
              if (c + 1 < c1) grad += std::abs(at(r, c + 1, ch) - at(r, c, ch));
              if (r + 1 < r1) grad += std::abs(at(r + 1, c, ch) - at(r, c, ch));
            }
          }
          desc[ch] = sum / cells;
          desc[3 + ch] = grad / cells;
        }
        for (std::size_t k = 0; k < shape.channels; ++k) {
          double z = offset_[k];
          for (std::size_t d = 0; d < kDescriptorSize; ++d) z += projection_[k * kDescriptorSize + d] * desc[d];
          maps[(k * shape.height + i) * shape.width + j] = static_cast<float>(std::tanh(z));
        }
      }
    }
    return maps;
  }

 private:
  std::vector<double> projection_;
  std::vector<double> offset_;
};

class OnnxBackbone final : public Backbone {
 public:
  OnnxBackbone(std::string path, const std::string& bytes, onnx_exec::Model model)
      : Backbone(std::move(path), content_hash(bytes), InputSpec{model.input_side(), -1.0, 1.0}, model.tap_shape()),
        model_(std::move(model)) {}

 protected:
  std::vector<float> run(const ModelInput& input) const override { return model_.run(input.values); }

 private:
  onnx_exec::Model model_;
};

std::size_t parse_field(std::string_view text, std::string_view source) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc{} || end != text.data() + text.size()) {
    throw InvalidArgument("bad test backbone descriptor '" + std::string(source) + "', expected test:<seed>:<K>:<h>:<w>");
  }
  return v;
}

}  // namespace

BackbonePtr make_test_backbone(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width) {
  if (channels == 0 || height == 0 || width == 0) throw InvalidArgument("test backbone dimensions must be positive");
  if (height > InputSpec{}.side || width > InputSpec{}.side) {
    throw InvalidArgument("test backbone grid cannot exceed the input side");
  }
  return std::make_shared<TestBackbone>(seed, channels, height, width);
}

BackbonePtr load_backbone(std::string_view source) {
  if (source.starts_with("test:")) {
    std::vector<std::string_view> parts;
    std::string_view rest = source.substr(5);
    while (true) {
      const auto colon = rest.find(':');
      parts.push_back(rest.substr(0, colon));
      if (colon == std::string_view::npos) break;
      rest = rest.substr(colon + 1);
    }
    if (parts.size() != 4) {
      throw InvalidArgument("bad test backbone descriptor '" + std::string(source) + "', expected test:<seed>:<K>:<h>:<w>");
    }
    const auto seed = parse_field(parts[0], source);
    return make_test_backbone(seed, parse_field(parts[1], source), parse_field(parts[2], source),
                              parse_field(parts[3], source));
  }
  const std::string path(source);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path, "cannot open file");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw LoadError(path, "read failed");
  auto model = onnx_exec::Model::parse(bytes, path);
  return std::make_shared<OnnxBackbone>(path, bytes, std::move(model));
}

}  // namespace salient_teach
