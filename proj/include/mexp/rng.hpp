#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mexp {

// Independent random streams used across the pipeline. Each (seed, stream,
// index) triple names a reproducible sequence, so parallel producers match
// serial ones exactly.
enum class Stream : std::uint64_t {
  dataset = 1,
  train = 2,
  valid = 3,
  test = 4,
  shuffle = 5,
  init = 6,
  pairs = 7,
  reference = 8,
};

/// Counter-based generator: the k-th output is a SplitMix64 finalization of
/// key + k * golden, where the key hashes (seed, stream, index).
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, Stream stream, std::uint64_t index)
      : key_(derive_key(seed, static_cast<std::uint64_t>(stream), index)) {}

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11U) * 0x1.0p-53; }

  /// Uniform on the closed range [lo, hi]; unbiased (Lemire's method).
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo;
    if (span == UINT64_MAX) {
      return next_u64();
    }
    const std::uint64_t range = span + 1;
    unsigned __int128 product = static_cast<unsigned __int128>(next_u64()) * range;
    auto low = static_cast<std::uint64_t>(product);
    if (low < range) {
      const std::uint64_t threshold = (0 - range) % range;
      while (low < threshold) {
        product = static_cast<unsigned __int128>(next_u64()) * range;
        low = static_cast<std::uint64_t>(product);
      }
    }
    return lo + static_cast<std::uint64_t>(product >> 64U);
  }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t position() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30U)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27U)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31U);
  }

  static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::uint64_t h = mix(seed + kGolden);
    h = mix(h ^ (stream * 0xD1B54A32D192ED03ULL));
    h = mix(h ^ (index + 0x8CB92BA72F3D8DD7ULL));
    return h;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mexp
