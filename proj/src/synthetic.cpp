#include "clover/synthetic.hpp"

#include <cmath>
#include <stdexcept>

#include "clover/linalg.hpp"

namespace clover {

Tensor random_orthonormal(std::size_t m, std::size_t n, Rng& rng) {
  return householder_qr(rng.normal_tensor({m, n})).q;
}

namespace {

Tensor low_rank_slab(std::size_t D, std::size_t d, std::size_t rank, Rng& rng) {
  const Tensor basis = random_orthonormal(D, rank, rng);
  Tensor mixer = rng.normal_tensor({rank, d});
  for (std::size_t j = 0; j < d; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < rank; ++i) norm += mixer(i, j) * mixer(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < rank; ++i) mixer(i, j) /= norm;
  }
  return matmul(basis, mixer);
}

}  // namespace

AttentionWeights synthetic_weights(const SyntheticSpec& spec) {
  const std::size_t D = spec.model_dim, h = spec.num_heads, d = spec.head_dim;
  if (D == 0 || h == 0 || d == 0) throw std::invalid_argument("D, h and d must be positive");
  if (d > D) throw std::invalid_argument("head_dim must not exceed model_dim");
  AttentionWeights w = AttentionWeights::zeros(D, h, d);
  Rng rng(spec.seed);
  const double dense = 1.0 / std::sqrt(static_cast<double>(D));
  const bool constructed = spec.heads_rank > 0 && spec.heads_rank < d;

  for (std::size_t i = 0; i < h; ++i) {
    if (constructed) {
      w.set_q_slab(i, low_rank_slab(D, d, spec.heads_rank, rng));
      w.set_k_slab(i, low_rank_slab(D, d, spec.heads_rank, rng));
      w.set_v_slab(i, low_rank_slab(D, d, spec.heads_rank, rng));
      w.set_o_slab(i, transpose(low_rank_slab(D, d, d, rng)));
    } else {
      w.set_q_slab(i, rng.normal_tensor({D, d}, dense));
      w.set_k_slab(i, rng.normal_tensor({D, d}, dense));
      w.set_v_slab(i, rng.normal_tensor({D, d}, dense));
      w.set_o_slab(i, rng.normal_tensor({d, D}, dense));
    }
  }
  if (spec.noise > 0.0) {
    for (Tensor* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_o})
      for (double& v : t->data()) v += spec.noise * rng.normal();
  }
  if (spec.bias) {
    w.b_q = rng.normal_tensor({h, d}, 0.5);
    w.b_k = rng.normal_tensor({h, d}, 0.5);
    w.b_v = rng.normal_tensor({h, d}, 0.5);
    w.b_o = rng.normal_tensor({D}, 0.5);
  }
  return w;
}

Tensor random_input(std::size_t batch, std::size_t seq_len, std::size_t model_dim, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor({batch, seq_len, model_dim});
}

}  // namespace clover
