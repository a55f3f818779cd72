#include "salient_teach/codec.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>

#include "salient_teach/errors.hpp"

namespace salient_teach {

static_assert(std::endian::native == std::endian::little, "payloads are stored little-endian");

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_encode(std::string_view bytes) {
  return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw InvalidArgument("base64: length is not a multiple of 4");
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool alnum = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
    if (c == '=') {
      if (i + 2 < text.size()) throw InvalidArgument("base64: padding in the middle of the input");
      ++pad;
    } else if (pad > 0 || !(alnum || c == '+' || c == '/')) {
      throw InvalidArgument("base64: invalid character at position " + std::to_string(i));
    }
  }
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  if (text.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw InvalidArgument("base64: malformed input");
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

template <typename T>
std::string pack(std::span<const T> values) {
  std::string out(values.size_bytes(), '\0');
  if (!values.empty()) std::memcpy(out.data(), values.data(), values.size_bytes());
  return out;
}

template <typename T>
std::vector<T> unpack(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % sizeof(T) != 0) throw InvalidArgument("payload length is not a multiple of the element size");
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace

std::string pack_f32(std::span<const float> values) { return pack(values); }
std::string pack_f64(std::span<const double> values) { return pack(values); }
std::vector<float> unpack_f32(std::span<const std::uint8_t> bytes) { return unpack<float>(bytes); }
std::vector<double> unpack_f64(std::span<const std::uint8_t> bytes) { return unpack<double>(bytes); }

}  // namespace salient_teach
