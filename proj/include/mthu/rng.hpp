#pragma once

#include <cstdint>
#include <random>

namespace mthu {

// SplitMix64 finalizer; used to derive independent sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Seed of stream `stream` under root `seed`. Streams are keyed by purpose and
// index, so work split across phases or pixels draws the same numbers
// regardless of evaluation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index) {
  return derive_seed(derive_seed(seed, stream), index);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return unit_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(engine_); }
  double normal() { return normal_(engine_); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Named stream identifiers.
namespace stream {
inline constexpr std::uint64_t kBank = 1;
inline constexpr std::uint64_t kReference = 2;
inline constexpr std::uint64_t kScaling = 3;
inline constexpr std::uint64_t kField = 4;
inline constexpr std::uint64_t kMutation = 5;
inline constexpr std::uint64_t kNoise = 6;
inline constexpr std::uint64_t kSelection = 7;
inline constexpr std::uint64_t kVca = 8;
inline constexpr std::uint64_t kInit = 9;
inline constexpr std::uint64_t kDropout = 10;
}  // namespace stream

}  // namespace mthu
