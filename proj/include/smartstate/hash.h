#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace smartstate {

// 64-bit FNV-1a; stable across platforms and runs.
constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t hash = 0xcbf29ce484222325ull) {
  for (char c : data) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x00000100000001b3ull;
  }
  return hash;
}

inline std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

}  // namespace smartstate
