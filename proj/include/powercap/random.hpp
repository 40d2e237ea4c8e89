#pragma once

// Seeding scheme: every random stream derives from one root seed by mixing in
// stream identifiers with splitmix64, so root -> experiment -> episode seeds are
// stable regardless of execution order.

#include <cstdint>
#include <random>
#include <string_view>

namespace powercap {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a; used to turn experiment labels into stream ids.
inline std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) {
  return splitmix64(parent ^ splitmix64(stream));
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) {
  return derive_seed(parent, hash_label(label));
}

}  // namespace powercap
