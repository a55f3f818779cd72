#include "salient_teach/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <fstream>
#include <iterator>

namespace salient_teach {

Frame decode_image(std::span<const std::uint8_t> bytes, std::int64_t timestamp_ms) {
  if (bytes.empty()) throw InvalidArgument("image is empty");
  cv::Mat bgr;
  try {
    const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw InvalidArgument(std::string("image could not be decoded: ") + e.what());
  }
  if (bgr.empty()) throw InvalidArgument("image could not be decoded as PNG or JPEG");
  if (static_cast<std::size_t>(bgr.cols) > kMaxImageSide || static_cast<std::size_t>(bgr.rows) > kMaxImageSide) {
    throw InvalidArgument("image exceeds " + std::to_string(kMaxImageSide) + " pixels per side");
  }
  Frame frame{static_cast<std::size_t>(bgr.cols), static_cast<std::size_t>(bgr.rows), {}, timestamp_ms};
  frame.pixels.resize(frame.width * frame.height * 3);
  for (int r = 0; r < bgr.rows; ++r) {
    const auto* src = bgr.ptr<std::uint8_t>(r);
    std::uint8_t* dst = frame.pixels.data() + static_cast<std::size_t>(r) * frame.width * 3;
    for (int c = 0; c < bgr.cols; ++c) {
      dst[3 * c] = src[3 * c + 2];
      dst[3 * c + 1] = src[3 * c + 1];
      dst[3 * c + 2] = src[3 * c];
    }
  }
  return frame;
}

Frame read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path, "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const InvalidArgument& e) {
    throw LoadError(path, e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Frame& frame) {
  frame.validate();
  cv::Mat bgr(static_cast<int>(frame.height), static_cast<int>(frame.width), CV_8UC3);
  for (std::size_t r = 0; r < frame.height; ++r) {
    auto* dst = bgr.ptr<std::uint8_t>(static_cast<int>(r));
    const std::uint8_t* src = frame.pixels.data() + r * frame.width * 3;
    for (std::size_t c = 0; c < frame.width; ++c) {
      dst[3 * c] = src[3 * c + 2];
      dst[3 * c + 1] = src[3 * c + 1];
      dst[3 * c + 2] = src[3 * c];
    }
  }
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", bgr, out)) throw InvalidArgument("PNG encoding failed");
  return out;
}

Frame composite_overlay(const Frame& frame, const SaliencyOverlay& overlay) {
  frame.validate();
  const CropRegion crop = center_crop(frame.width, frame.height);
  if (overlay.width != crop.side || overlay.height != crop.side) {
    throw InvalidArgument("overlay is " + std::to_string(overlay.width) + "x" + std::to_string(overlay.height) +
                          ", crop square is " + std::to_string(crop.side));
  }
  Frame out = frame;
  for (std::size_t y = 0; y < crop.side; ++y) {
    for (std::size_t x = 0; x < crop.side; ++x) {
      const std::size_t o = 4 * (y * crop.side + x);
      const double a = overlay.rgba[o + 3] / 255.0;
      std::uint8_t* px = out.pixels.data() + ((crop.y + y) * frame.width + crop.x + x) * 3;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = px[ch] * (1.0 - a) + overlay.rgba[o + ch] * a;
        px[ch] = static_cast<std::uint8_t>(std::floor(v + 0.5));
      }
    }
  }
  return out;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError(path, "write failed");
}

}  // namespace salient_teach
