#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "dart/tensor.hpp"

namespace dart {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-based random stream: the value of draw i depends only on
// (seed, substream, i), so streams can be snapshotted by their counter
// and replayed exactly. No libc RNG state is involved.
class RngStream {
 public:
  RngStream() : RngStream(0, "default") {}
  RngStream(std::uint64_t seed, std::string_view substream)
      : seed_(seed), substream_(substream) {
    key_ = detail::splitmix64(seed ^ detail::fnv1a64(substream));
  }

  std::uint64_t next_u64() { return detail::splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw ConfigError("uniform_int: n must be positive");
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // guard log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal truncated to +-2 sigma (resampled), scaled by std.
  double truncated_normal(double stddev) {
    double z = normal();
    while (z < -2.0 || z > 2.0) z = normal();
    return z * stddev;
  }

  // Sample an index from an explicit probability vector (assumed to sum to ~1).
  int categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  std::uint64_t seed() const { return seed_; }
  const std::string& substream() const { return substream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t seed_ = 0;
  std::string substream_;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace dart
