#pragma once

// Seeded synthetic attention weights and probe inputs.

#include <cstdint>

#include "clover/attention.hpp"
#include "clover/rng.hpp"

namespace clover {

struct SyntheticSpec {
  std::size_t model_dim = 16;
  std::size_t num_heads = 2;
  std::size_t head_dim = 4;
  // 0 (or >= head_dim) draws dense Gaussian slabs. Otherwise every w_q/w_k/w_v
  // slab is B·C with B a [D, rank] orthonormal basis and C a [rank, d] mixer
  // with unit-norm columns: per-head rank is exactly `rank` while every inner
  // dimension carries the same column norm.
  std::size_t heads_rank = 0;
  bool bias = false;
  double noise = 0.0;  // additive Gaussian noise on all projection entries
  std::uint64_t seed = 0;
};

AttentionWeights synthetic_weights(const SyntheticSpec& spec);

// [m, n] matrix with orthonormal columns (m >= n).
Tensor random_orthonormal(std::size_t m, std::size_t n, Rng& rng);

// Standard normal [b, n, D] probe input.
Tensor random_input(std::size_t batch, std::size_t seq_len, std::size_t model_dim, std::uint64_t seed);

}  // namespace clover
