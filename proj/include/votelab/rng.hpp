#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace votelab {

/// Seeded deterministic random source.
///
/// The engine is std::mt19937_64 (its output sequence is pinned by the
/// standard); all distributions are derived here from raw 64-bit draws so
/// results do not depend on the standard library's distribution
/// implementations. `fork` derives an independent child stream from the
/// construction seed and a label, so forked streams are reproducible
/// regardless of how many draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1).
  double uniform();
  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi);
  bool bernoulli(double p);
  /// Box-Muller normal deviate (consumes two uniform draws per call).
  double normal(double mean = 0.0, double stddev = 1.0);

  Rng fork(std::string_view label) const;
  Rng fork(std::uint64_t index) const;

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// splitmix64 step; used for seed derivation.
std::uint64_t splitmix64(std::uint64_t x);

/// FNV-1a hash of a byte string; used to fold labels into seeds.
std::uint64_t fnv1a64(std::string_view s);

}  // namespace votelab
