#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace mqvq {

// Named RNG streams derived from one master seed.
enum class Stream : std::uint64_t {
  kData = 1,
  kInit = 2,
  kBatch = 3,
  kSample = 4,
  kInitStage2 = 5,
  kBatchStage2 = 6,
  kSplit = 7,
};

// splitmix64 finalizer; mixes a master seed with a stream tag.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream s) {
  return derive_seed(master, static_cast<std::uint64_t>(s));
}

// mt19937_64 engine with distribution code written out so sequences do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mqvq
