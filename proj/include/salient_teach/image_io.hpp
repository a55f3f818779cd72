#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "salient_teach/backbone.hpp"
#include "salient_teach/saliency.hpp"

namespace salient_teach {

/// Largest accepted decoded image, in pixels per side.
inline constexpr std::size_t kMaxImageSide = 8192;

/// Decodes PNG or JPEG bytes into an RGB frame. Throws InvalidArgument on
/// undecodable or oversized input.
Frame decode_image(std::span<const std::uint8_t> bytes, std::int64_t timestamp_ms = 0);

/// Reads and decodes an image file. Throws LoadError if unreadable.
Frame read_image(const std::string& path);

/// PNG-encodes an RGB frame.
std::vector<std::uint8_t> encode_png(const Frame& frame);

/// Alpha-blends a crop-sized overlay over the frame's centre-crop square.
/// Pixels outside the square are untouched.
Frame composite_overlay(const Frame& frame, const SaliencyOverlay& overlay);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace salient_teach
