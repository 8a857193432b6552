#pragma once

#include <cstdint>
#include <random>

namespace sentinet {

/// Seeded pseudorandom source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. None of the std:: distributions are used because their
/// algorithms are implementation-defined; every derived draw is computed here:
///
///  - uniform01():   top 53 bits of one engine output, scaled by 2^-53.
///  - uniform_int(n): rejection sampling on raw 64-bit outputs.
///  - gaussian():    Box-Muller on two uniform01() draws; the second value of
///                   each pair is cached and returned by the next call.
///  - split(k):      a child generator seeded with splitmix64(seed ^ mix(k)).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform01();

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  /// True with probability p.
  bool bernoulli(double p) { return uniform01() < p; }

  double gaussian(double mean = 0.0, double stddev = 1.0);

  /// Independent generator derived from this generator's seed and a stream
  /// index. Does not advance this generator.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double cached_gaussian_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace sentinet
