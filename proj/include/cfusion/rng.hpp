#pragma once

// Seed derivation and random streams.
//
// Every random draw in the project descends from one u64 root seed. A stream
// is identified by (root, domain, index) and its seed is
//
//   splitmix64(splitmix64(root ^ domain_constant) + index * kGolden)
//
// so streams are independent of the order in which they are requested.

#include <cstdint>
#include <limits>
#include <random>

namespace cfusion {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class StreamDomain : std::uint64_t {
  kReset = 0x01,
  kLatent = 0x02,
  kSensorNoise = 0x03,
  kDemoEpisode = 0x04,
  kParamInit = 0x05,
  kBatchOrder = 0x06,
  kDiffusionNoise = 0x07,
  kEvalEpisode = 0x08,
  kSampling = 0x09,
  kTrainSeed = 0x0A,
};

constexpr std::uint64_t derive_seed(std::uint64_t root, StreamDomain domain,
                                    std::uint64_t index = 0) noexcept {
  const auto base = splitmix64(root ^ (static_cast<std::uint64_t>(domain) * 0xD1B54A32D192ED03ULL));
  return splitmix64(base + index * kGolden);
}

/// Small counter-style generator (UniformRandomBitGenerator). Trivially
/// copyable so that world states carrying one keep value semantics.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  constexpr SplitMix64() noexcept = default;
  constexpr explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += kGolden;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  constexpr std::uint64_t state() const noexcept { return state_; }
  constexpr bool operator==(const SplitMix64&) const noexcept = default;

 private:
  std::uint64_t state_ = 0;
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, StreamDomain domain, std::uint64_t index = 0) {
  return Rng(derive_seed(root, domain, index));
}

template <typename Gen>
double gaussian(Gen& gen) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(gen);
}

template <typename Gen>
double uniform(Gen& gen, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(gen);
}

}  // namespace cfusion
