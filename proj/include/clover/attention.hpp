#pragma once

// Reference multi-head attention in two parameterizations:
//   plain:    W_Q, W_K, W_V, W_O (+ optional biases)
//   factored: per-head U·S·V for the QK and VO pairs, or QR factors of W_Q/W_K
// Both share masking, RoPE and the 1/sqrt(head_dim) logit scale.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "clover/tensor.hpp"

namespace clover {

struct RopeSpec {
  bool enabled = false;
  double base = 10000.0;
};

struct AttentionWeights {
  std::size_t model_dim = 0;  // D
  std::size_t num_heads = 0;  // h
  std::size_t head_dim = 0;   // d; sets the 1/sqrt(d) logit scale

  Tensor w_q;  // [D, h, d_qk]
  Tensor w_k;  // [D, h, d_qk]
  Tensor w_v;  // [D, h, d_vo]
  Tensor w_o;  // [h, d_vo, D]
  std::optional<Tensor> b_q;  // [h, d_qk]
  std::optional<Tensor> b_k;  // [h, d_qk]
  std::optional<Tensor> b_v;  // [h, d_vo]
  std::optional<Tensor> b_o;  // [D]

  // Zero-initialized weights with inner dims equal to head_dim.
  static AttentionWeights zeros(std::size_t model_dim, std::size_t num_heads, std::size_t head_dim);

  // Inner projection widths. Equal to head_dim unless the weights came out of
  // a pruned merge, where they become the per-layer maximum retained rank.
  std::size_t qk_dim() const { return w_q.dim(2); }
  std::size_t vo_dim() const { return w_v.dim(2); }

  void validate() const;

  // Per-head slabs: q/k/v as [D, inner], o as [inner, D].
  Tensor q_slab(std::size_t head) const;
  Tensor k_slab(std::size_t head) const;
  Tensor v_slab(std::size_t head) const;
  Tensor o_slab(std::size_t head) const;
  void set_q_slab(std::size_t head, const Tensor& m);
  void set_k_slab(std::size_t head, const Tensor& m);
  void set_v_slab(std::size_t head, const Tensor& m);
  void set_o_slab(std::size_t head, const Tensor& m);

  bool has_qk_bias() const { return b_q.has_value() || b_k.has_value(); }
};

enum class FactorMode { svd_both, qr_qk_svd_vo };

std::string to_string(FactorMode mode);
FactorMode parse_factor_mode(const std::string& text);

struct CloverFactors {
  FactorMode mode = FactorMode::svd_both;
  std::size_t model_dim = 0;
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  // Query/key biases were folded in by appending a constant-1 input coordinate.
  bool qk_augmented = false;

  // svd_both: W_QK[i] = u_qk[i] · diag(s_qk[i]) · v_qk[i], padded to max rank.
  Tensor u_qk;  // [h, D_q, r]
  Tensor s_qk;  // [h, r]
  Tensor v_qk;  // [h, r, D_q]
  std::vector<std::size_t> rank_qk;

  // qr_qk_svd_vo: W_Q[i] = q_q[i] · r_q[i], W_K[i] = q_k[i] · r_k[i].
  Tensor q_q;  // [h, D, d]
  Tensor r_q;  // [h, d, d]
  Tensor q_k;
  Tensor r_k;

  // W_VO[i] = u_vo[i] · diag(s_vo[i]) · v_vo[i]
  Tensor u_vo;  // [h, D, r]
  Tensor s_vo;  // [h, r]
  Tensor v_vo;  // [h, r, D]
  std::vector<std::size_t> rank_vo;

  std::optional<Tensor> folded_b_o;  // [D]

  // Full head-wise mixing matrices; when present they replace diag(s).
  std::optional<Tensor> trainable_s_qk;  // [h, r, r]
  std::optional<Tensor> trainable_s_vo;  // [h, r, r]

  std::size_t qk_input_dim() const { return model_dim + (qk_augmented ? 1 : 0); }

  // Per-head views cropped to the retained rank.
  Tensor u_qk_head(std::size_t head) const;
  Tensor v_qk_head(std::size_t head) const;
  Tensor s_qk_head(std::size_t head) const;  // [r]
  Tensor u_vo_head(std::size_t head) const;
  Tensor v_vo_head(std::size_t head) const;
  Tensor s_vo_head(std::size_t head) const;
  // The r x r mixing matrix in effect: trainable if present, else diag(s).
  Tensor mix_qk_head(std::size_t head) const;
  Tensor mix_vo_head(std::size_t head) const;

  // Shapes, ranks, orthonormal slabs (within `tol`), sorted nonnegative s.
  void validate(double tol = 1e-10) const;
};

// Rotates consecutive pairs (2j, 2j+1) of each row by pos * base^(-2j/d),
// where pos is the row index. `direction` = -1 applies the inverse rotation.
void rope_rotate_rows(Tensor& rows, double base, double direction = 1.0);

// x: [b, h, n, d]
Tensor rope_apply(const Tensor& x, double base);

// Pre-softmax scaled logits [b, h, n, n] of the plain parameterization.
Tensor attention_logits(const Tensor& x, const AttentionWeights& w, const RopeSpec& rope = {});
Tensor attention_logits_factored(const Tensor& x, const CloverFactors& f, const RopeSpec& rope = {});

// x: [b, n, D] -> [b, n, D]
Tensor mha_forward(const Tensor& x, const AttentionWeights& w, const MaskSpec& mask = {}, const RopeSpec& rope = {});
Tensor mha_forward_factored(const Tensor& x, const CloverFactors& f, const MaskSpec& mask = {},
                            const RopeSpec& rope = {});

// [n, D] batch row of x, optionally with a trailing column of ones.
Tensor sequence_input(const Tensor& x, std::size_t batch, bool augment);

}  // namespace clover
