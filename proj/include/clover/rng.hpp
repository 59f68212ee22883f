#pragma once

#include <cstdint>

#include "clover/tensor.hpp"

namespace clover {

// Counter-based generator: draw k is a SplitMix64 finalizer applied to
// seed + k * golden_gamma, so streams are a pure function of (seed, k).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; the second variate of each pair is cached.
  double normal();
  std::uint64_t below(std::uint64_t bound);

  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stateless mix of a parent seed with an index, for per-example streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace clover
