#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"

namespace dualteacher {

// Checkpoint payload encoding: doubles serialized as little-endian IEEE-754
// bytes regardless of host order, then base64. Round-trips bit-exactly.

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw FormatError("base64: invalid character");
  };
  if (text.size() % 4 != 0) throw FormatError("base64: length must be a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int a = val(text[i]), b = val(text[i + 1]), c = val(text[i + 2]), d = val(text[i + 3]);
    if (a < 0 || b < 0) throw FormatError("base64: malformed padding");
    const std::uint32_t v = (static_cast<std::uint32_t>(a) << 18) |
                            (static_cast<std::uint32_t>(b) << 12) |
                            ((c < 0 ? 0u : static_cast<std::uint32_t>(c)) << 6) |
                            (d < 0 ? 0u : static_cast<std::uint32_t>(d));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    if (c >= 0) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    if (d >= 0) out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

inline std::string encode_doubles(const std::vector<double>& xs) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(xs.size() * 8);
  for (double x : xs) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(x);
    for (int s = 0; s < 64; s += 8) bytes.push_back(static_cast<std::uint8_t>((u >> s) & 0xff));
  }
  return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& text) {
  const std::vector<std::uint8_t> bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw FormatError("decode_doubles: byte count not divisible by 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int s = 0; s < 8; ++s) u |= static_cast<std::uint64_t>(bytes[i * 8 + s]) << (8 * s);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

// FNV-1a over a string, for config fingerprints
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace dualteacher
