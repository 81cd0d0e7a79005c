#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ldseg {

// FNV-1a, 64 bit. Used for config, spec and payload fingerprints; stable
// across platforms, unlike std::hash.
inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// SplitMix64 finalizer; a good bijective mixer for counter-based streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }

template <typename... Rest>
constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix64(mix64(a, b), static_cast<std::uint64_t>(rest)...);
}

// Uniform double in [0,1) from the top 53 bits.
constexpr double to_unit(std::uint64_t x) { return static_cast<double>(x >> 11) * 0x1.0p-53; }

std::string hex64(std::uint64_t v);

}  // namespace ldseg
