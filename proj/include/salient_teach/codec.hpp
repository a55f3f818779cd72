#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace salient_teach {

/// Standard base64 with padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);
std::string base64_encode(std::string_view bytes);

/// Strict decoder: rejects bad characters, bad padding and whitespace.
/// Throws InvalidArgument.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Little-endian packing of float payloads for the session file.
std::string pack_f32(std::span<const float> values);
std::string pack_f64(std::span<const double> values);
std::vector<float> unpack_f32(std::span<const std::uint8_t> bytes);
std::vector<double> unpack_f64(std::span<const std::uint8_t> bytes);

}  // namespace salient_teach
