#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace remem {

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Every random stream flows from one root seed plus a purpose label, so runs
// replay exactly and sub-experiments (sweep cells, per-seed repeats) draw from
// independent streams regardless of execution order.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  return splitmix64(root ^ fnv1a64(label));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index) {
  return splitmix64(derive_seed(root, label) + 0x9e3779b97f4a7c15ull * (index + 1));
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

// resample until |z| <= 2*sigma
template <class T, class Rng>
T truncated_normal(Rng& rng, T sigma) {
  std::normal_distribution<T> dist(T(0), sigma);
  for (;;) {
    T z = dist(rng);
    if (std::abs(z) <= T(2) * sigma) return z;
  }
}

}  // namespace remem
