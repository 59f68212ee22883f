#include "clover/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "clover/linalg.hpp"
#include "clover/simd/kernels.hpp"

namespace clover {

namespace {

void expect_shape(const Tensor& t, const Shape& shape, const char* name) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(name) + " has shape " + shape_to_string(t.shape()) + ", expected " +
                     shape_to_string(shape));
  }
}

// [D, h, k] -> [D, k] for one head.
Tensor input_slab(const Tensor& w, std::size_t head) {
  const std::size_t rows = w.dim(0), inner = w.dim(2);
  Tensor m({rows, inner});
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t k = 0; k < inner; ++k) m(a, k) = w(a, head, k);
  return m;
}

void set_input_slab(Tensor& w, std::size_t head, const Tensor& m) {
  if (m.rank() != 2 || m.rows() != w.dim(0) || m.cols() != w.dim(2)) {
    throw ShapeError("slab " + shape_to_string(m.shape()) + " does not fit " + shape_to_string(w.shape()));
  }
  for (std::size_t a = 0; a < m.rows(); ++a)
    for (std::size_t k = 0; k < m.cols(); ++k) w(a, head, k) = m(a, k);
}

Tensor crop(const Tensor& m, std::size_t rows, std::size_t cols) {
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = m(i, j);
  return out;
}

void add_row_vector(Tensor& m, std::span<const double> bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) simd::axpy(1.0, bias, m.row(i));
}

void scale_columns(Tensor& m, const Tensor& s) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) *= s[j];
}

void check_input(const Tensor& x, std::size_t model_dim) {
  if (x.rank() != 3 || x.dim(2) != model_dim) {
    throw ShapeError("attention input must be [b, n, " + std::to_string(model_dim) + "], got " +
                     shape_to_string(x.shape()));
  }
}

void check_rope(const RopeSpec& rope, std::size_t width) {
  if (!rope.enabled) return;
  if (width % 2 != 0) throw std::invalid_argument("RoPE needs an even head dimension, got " + std::to_string(width));
  if (!(rope.base > 0.0)) throw std::invalid_argument("RoPE base must be positive");
}

Tensor scaled_logits(const Tensor& q, const Tensor& k, std::size_t head_dim) {
  Tensor logits = matmul(q, transpose(k));
  const double denom = std::sqrt(static_cast<double>(head_dim));
  for (auto& v : logits.data()) v /= denom;
  return logits;
}

void store_block(Tensor& dst4, std::size_t b, std::size_t h, const Tensor& block) {
  const std::size_t heads = dst4.dim(1);
  std::copy(block.values().begin(), block.values().end(), dst4.data().begin() + (b * heads + h) * block.size());
}

void accumulate_sequence(Tensor& y, std::size_t batch, const Tensor& contribution) {
  auto dst = y.data().subspan(batch * contribution.size(), contribution.size());
  simd::axpy(1.0, contribution.data(), dst);
}

// Plain per-head Q and K, RoPE applied.
std::pair<Tensor, Tensor> plain_qk(const Tensor& xb, const AttentionWeights& w, std::size_t head, const RopeSpec& rope) {
  Tensor q = matmul(xb, w.q_slab(head));
  Tensor k = matmul(xb, w.k_slab(head));
  if (w.b_q) add_row_vector(q, w.b_q->row(head));
  if (w.b_k) add_row_vector(k, w.b_k->row(head));
  if (rope.enabled) {
    rope_rotate_rows(q, rope.base);
    rope_rotate_rows(k, rope.base);
  }
  return {std::move(q), std::move(k)};
}

Tensor factored_logits_head(const Tensor& xb, const CloverFactors& f, std::size_t head, const RopeSpec& rope) {
  if (f.mode == FactorMode::svd_both) {
    // A fully pruned pair contributes zero logits.
    if (f.rank_qk.at(head) == 0) return Tensor({xb.rows(), xb.rows()});
    const Tensor xa = f.qk_augmented ? [&] {
      Tensor m({xb.rows(), xb.cols() + 1});
      for (std::size_t i = 0; i < xb.rows(); ++i) {
        for (std::size_t j = 0; j < xb.cols(); ++j) m(i, j) = xb(i, j);
        m(i, xb.cols()) = 1.0;
      }
      return m;
    }()
                                     : xb;
    Tensor left = matmul(xa, f.u_qk_head(head));
    const Tensor right = matmul(xa, transpose(f.v_qk_head(head)));
    if (f.trainable_s_qk) {
      left = matmul(left, f.mix_qk_head(head));
    } else {
      scale_columns(left, f.s_qk_head(head));
    }
    return scaled_logits(left, right, f.head_dim);
  }
  const Tensor rq = f.r_q.slab(head);
  const Tensor rk = f.r_k.slab(head);
  Tensor q = matmul(matmul(xb, f.q_q.slab(head)), rq);
  Tensor k = matmul(matmul(xb, f.q_k.slab(head)), rk);
  if (rope.enabled) {
    rope_rotate_rows(q, rope.base);
    rope_rotate_rows(k, rope.base);
  }
  return scaled_logits(q, k, f.head_dim);
}

void check_factor_rope(const CloverFactors& f, const RopeSpec& rope) {
  if (rope.enabled && f.mode == FactorMode::svd_both) {
    throw std::invalid_argument("RoPE sits between W_Q and W_K; svd-both factors cannot represent it (use qr mode)");
  }
  if (f.mode == FactorMode::qr_qk_svd_vo) check_rope(rope, f.head_dim);
}

}  // namespace

AttentionWeights AttentionWeights::zeros(std::size_t model_dim, std::size_t num_heads, std::size_t head_dim) {
  AttentionWeights w;
  w.model_dim = model_dim;
  w.num_heads = num_heads;
  w.head_dim = head_dim;
  w.w_q = Tensor({model_dim, num_heads, head_dim});
  w.w_k = Tensor({model_dim, num_heads, head_dim});
  w.w_v = Tensor({model_dim, num_heads, head_dim});
  w.w_o = Tensor({num_heads, head_dim, model_dim});
  return w;
}

void AttentionWeights::validate() const {
  if (model_dim == 0 || num_heads == 0 || head_dim == 0) throw ShapeError("attention dims must be positive");
  if (w_q.rank() != 3 || w_v.rank() != 3) throw ShapeError("w_q and w_v must be [D, h, inner]");
  const std::size_t dq = w_q.dim(2), dv = w_v.dim(2);
  expect_shape(w_q, {model_dim, num_heads, dq}, "w_q");
  expect_shape(w_k, {model_dim, num_heads, dq}, "w_k");
  expect_shape(w_v, {model_dim, num_heads, dv}, "w_v");
  expect_shape(w_o, {num_heads, dv, model_dim}, "w_o");
  if (b_q) expect_shape(*b_q, {num_heads, dq}, "b_q");
  if (b_k) expect_shape(*b_k, {num_heads, dq}, "b_k");
  if (b_v) expect_shape(*b_v, {num_heads, dv}, "b_v");
  if (b_o) expect_shape(*b_o, {model_dim}, "b_o");
  for (const Tensor* t : {&w_q, &w_k, &w_v, &w_o}) {
    if (!t->all_finite()) throw std::invalid_argument("attention weights contain non-finite values");
  }
  for (const auto* t : {&b_q, &b_k, &b_v, &b_o}) {
    if (*t && !(*t)->all_finite()) throw std::invalid_argument("attention biases contain non-finite values");
  }
}

Tensor AttentionWeights::q_slab(std::size_t head) const { return input_slab(w_q, head); }
Tensor AttentionWeights::k_slab(std::size_t head) const { return input_slab(w_k, head); }
Tensor AttentionWeights::v_slab(std::size_t head) const { return input_slab(w_v, head); }
Tensor AttentionWeights::o_slab(std::size_t head) const { return w_o.slab(head); }
void AttentionWeights::set_q_slab(std::size_t head, const Tensor& m) { set_input_slab(w_q, head, m); }
void AttentionWeights::set_k_slab(std::size_t head, const Tensor& m) { set_input_slab(w_k, head, m); }
void AttentionWeights::set_v_slab(std::size_t head, const Tensor& m) { set_input_slab(w_v, head, m); }
void AttentionWeights::set_o_slab(std::size_t head, const Tensor& m) { w_o.set_slab(head, m); }

std::string to_string(FactorMode mode) { return mode == FactorMode::svd_both ? "svd" : "qr"; }

FactorMode parse_factor_mode(const std::string& text) {
  if (text == "svd" || text == "svd-both") return FactorMode::svd_both;
  if (text == "qr" || text == "qr-qk-svd-vo") return FactorMode::qr_qk_svd_vo;
  throw std::invalid_argument("unknown factor mode '" + text + "' (expected svd or qr)");
}

Tensor CloverFactors::u_qk_head(std::size_t head) const {
  return crop(u_qk.slab(head), qk_input_dim(), rank_qk.at(head));
}
Tensor CloverFactors::v_qk_head(std::size_t head) const {
  return crop(v_qk.slab(head), rank_qk.at(head), qk_input_dim());
}
Tensor CloverFactors::s_qk_head(std::size_t head) const {
  const std::size_t r = rank_qk.at(head);
  Tensor s({r});
  for (std::size_t j = 0; j < r; ++j) s[j] = s_qk(head, j);
  return s;
}
Tensor CloverFactors::u_vo_head(std::size_t head) const { return crop(u_vo.slab(head), model_dim, rank_vo.at(head)); }
Tensor CloverFactors::v_vo_head(std::size_t head) const { return crop(v_vo.slab(head), rank_vo.at(head), model_dim); }
Tensor CloverFactors::s_vo_head(std::size_t head) const {
  const std::size_t r = rank_vo.at(head);
  Tensor s({r});
  for (std::size_t j = 0; j < r; ++j) s[j] = s_vo(head, j);
  return s;
}

namespace {

Tensor diagonal(const Tensor& s) {
  Tensor m({s.size(), s.size()});
  for (std::size_t j = 0; j < s.size(); ++j) m(j, j) = s[j];
  return m;
}

}  // namespace

Tensor CloverFactors::mix_qk_head(std::size_t head) const {
  if (trainable_s_qk) {
    const std::size_t r = rank_qk.at(head);
    return crop(trainable_s_qk->slab(head), r, r);
  }
  return diagonal(s_qk_head(head));
}

Tensor CloverFactors::mix_vo_head(std::size_t head) const {
  if (trainable_s_vo) {
    const std::size_t r = rank_vo.at(head);
    return crop(trainable_s_vo->slab(head), r, r);
  }
  return diagonal(s_vo_head(head));
}

void CloverFactors::validate(double tol) const {
  if (model_dim == 0 || num_heads == 0 || head_dim == 0) throw ShapeError("factor dims must be positive");
  const std::size_t h = num_heads, D = model_dim, dq = qk_input_dim();

  auto check_svd_side = [&](const Tensor& u, const Tensor& s, const Tensor& v, const std::vector<std::size_t>& ranks,
                            std::size_t in_dim, const char* side) {
    if (u.rank() != 3 || s.rank() != 2 || v.rank() != 3) throw ShapeError(std::string(side) + ": bad factor ranks");
    const std::size_t rmax = s.dim(1);
    expect_shape(u, {h, in_dim, rmax}, side);
    expect_shape(s, {h, rmax}, side);
    expect_shape(v, {h, rmax, in_dim}, side);
    if (ranks.size() != h) throw ShapeError(std::string(side) + ": rank vector length != heads");
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t r = ranks[i];
      if (r > rmax || r > head_dim) {
        throw std::invalid_argument(std::string(side) + ": head " + std::to_string(i) + " rank " + std::to_string(r) +
                                    " exceeds bound");
      }
      for (std::size_t j = 0; j < r; ++j) {
        if (!(s(i, j) >= 0.0) || (j > 0 && s(i, j) > s(i, j - 1))) {
          throw std::invalid_argument(std::string(side) + ": head " + std::to_string(i) +
                                      " singular values not sorted nonnegative");
        }
      }
      if (r == 0) continue;
      const double eu = orthonormality_error(crop(u.slab(i), in_dim, r));
      const double ev = row_orthonormality_error(crop(v.slab(i), r, in_dim));
      if (eu > tol || ev > tol) {
        throw std::invalid_argument(std::string(side) + ": head " + std::to_string(i) + " basis not orthonormal (" +
                                    std::to_string(std::max(eu, ev)) + ")");
      }
    }
  };

  if (mode == FactorMode::svd_both) {
    check_svd_side(u_qk, s_qk, v_qk, rank_qk, dq, "qk factors");
    if (trainable_s_qk) expect_shape(*trainable_s_qk, {h, s_qk.dim(1), s_qk.dim(1)}, "trainable_s_qk");
  } else {
    if (qk_augmented) throw std::invalid_argument("qr factors do not support query/key bias augmentation");
    const std::size_t d = head_dim;
    expect_shape(q_q, {h, D, d}, "q_q");
    expect_shape(q_k, {h, D, d}, "q_k");
    expect_shape(r_q, {h, d, d}, "r_q");
    expect_shape(r_k, {h, d, d}, "r_k");
    if (trainable_s_qk) throw std::invalid_argument("qr factors train r_q/r_k directly; trainable_s_qk not allowed");
    for (std::size_t i = 0; i < h; ++i) {
      for (const Tensor* q : {&q_q, &q_k}) {
        const double e = orthonormality_error(q->slab(i));
        if (e > tol) throw std::invalid_argument("qr factors: head " + std::to_string(i) + " basis not orthonormal");
      }
      for (const Tensor* r : {&r_q, &r_k}) {
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < a; ++b)
            if ((*r)(i, a, b) != 0.0) {
              throw std::invalid_argument("qr factors: head " + std::to_string(i) + " R not upper triangular");
            }
      }
    }
  }
  check_svd_side(u_vo, s_vo, v_vo, rank_vo, D, "vo factors");
  if (trainable_s_vo) expect_shape(*trainable_s_vo, {h, s_vo.dim(1), s_vo.dim(1)}, "trainable_s_vo");
  if (folded_b_o) expect_shape(*folded_b_o, {D}, "folded_b_o");
}

void rope_rotate_rows(Tensor& rows, double base, double direction) {
  const std::size_t n = rows.rows(), d = rows.cols();
  if (d % 2 != 0) throw std::invalid_argument("RoPE needs an even head dimension, got " + std::to_string(d));
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      const double angle = direction * static_cast<double>(pos) * freq;
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = rows(pos, 2 * j), b = rows(pos, 2 * j + 1);
      rows(pos, 2 * j) = c * a - s * b;
      rows(pos, 2 * j + 1) = s * a + c * b;
    }
  }
}

Tensor rope_apply(const Tensor& x, double base) {
  if (x.rank() != 4) throw ShapeError("rope_apply expects [b, h, n, d], got " + shape_to_string(x.shape()));
  check_rope({true, base}, x.dim(3));
  const std::size_t n = x.dim(2), d = x.dim(3);
  Tensor out = x;
  const std::size_t blocks = x.dim(0) * x.dim(1);
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    Tensor m({n, d}, std::vector<double>(x.values().begin() + blk * n * d, x.values().begin() + (blk + 1) * n * d));
    rope_rotate_rows(m, base);
    std::copy(m.values().begin(), m.values().end(), out.data().begin() + blk * n * d);
  }
  return out;
}

Tensor sequence_input(const Tensor& x, std::size_t batch, bool augment) {
  const std::size_t n = x.dim(1), D = x.dim(2);
  Tensor m({n, D + (augment ? 1 : 0)});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < D; ++j) m(i, j) = x(batch, i, j);
    if (augment) m(i, D) = 1.0;
  }
  return m;
}

Tensor attention_logits(const Tensor& x, const AttentionWeights& w, const RopeSpec& rope) {
  w.validate();
  check_input(x, w.model_dim);
  check_rope(rope, w.qk_dim());
  const std::size_t b = x.dim(0), n = x.dim(1);
  Tensor out({b, w.num_heads, n, n});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const Tensor xb = sequence_input(x, bi, false);
    for (std::size_t i = 0; i < w.num_heads; ++i) {
      auto [q, k] = plain_qk(xb, w, i, rope);
      store_block(out, bi, i, scaled_logits(q, k, w.head_dim));
    }
  }
  return out;
}

Tensor attention_logits_factored(const Tensor& x, const CloverFactors& f, const RopeSpec& rope) {
  check_input(x, f.model_dim);
  check_factor_rope(f, rope);
  const std::size_t b = x.dim(0), n = x.dim(1);
  Tensor out({b, f.num_heads, n, n});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const Tensor xb = sequence_input(x, bi, false);
    for (std::size_t i = 0; i < f.num_heads; ++i) store_block(out, bi, i, factored_logits_head(xb, f, i, rope));
  }
  return out;
}

Tensor mha_forward(const Tensor& x, const AttentionWeights& w, const MaskSpec& mask, const RopeSpec& rope) {
  w.validate();
  check_input(x, w.model_dim);
  check_rope(rope, w.qk_dim());
  const std::size_t b = x.dim(0), n = x.dim(1), D = w.model_dim;
  mask.validate(n);
  Tensor y({b, n, D});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const Tensor xb = sequence_input(x, bi, false);
    Tensor yb({n, D});
    for (std::size_t i = 0; i < w.num_heads; ++i) {
      auto [q, k] = plain_qk(xb, w, i, rope);
      const Tensor attn = softmax_rows(scaled_logits(q, k, w.head_dim), mask);
      Tensor v = matmul(xb, w.v_slab(i));
      if (w.b_v) add_row_vector(v, w.b_v->row(i));
      yb = add(yb, matmul(matmul(attn, v), w.o_slab(i)));
    }
    if (w.b_o) add_row_vector(yb, w.b_o->data());
    accumulate_sequence(y, bi, yb);
  }
  return y;
}

Tensor mha_forward_factored(const Tensor& x, const CloverFactors& f, const MaskSpec& mask, const RopeSpec& rope) {
  check_input(x, f.model_dim);
  check_factor_rope(f, rope);
  const std::size_t b = x.dim(0), n = x.dim(1), D = f.model_dim;
  if (f.rank_qk.size() != f.num_heads && f.mode == FactorMode::svd_both) {
    throw std::invalid_argument("factors: rank_qk length does not match head count");
  }
  if (f.rank_vo.size() != f.num_heads) throw std::invalid_argument("factors: rank_vo length does not match head count");
  mask.validate(n);
  Tensor y({b, n, D});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const Tensor xb = sequence_input(x, bi, false);
    Tensor yb({n, D});
    for (std::size_t i = 0; i < f.num_heads; ++i) {
      if (f.rank_vo[i] == 0) continue;
      const Tensor attn = softmax_rows(factored_logits_head(xb, f, i, rope), mask);
      Tensor vp = matmul(xb, f.u_vo_head(i));
      if (f.trainable_s_vo) {
        vp = matmul(vp, f.mix_vo_head(i));
      } else {
        scale_columns(vp, f.s_vo_head(i));
      }
      yb = add(yb, matmul(matmul(attn, vp), f.v_vo_head(i)));
    }
    if (f.folded_b_o) add_row_vector(yb, f.folded_b_o->data());
    accumulate_sequence(y, bi, yb);
  }
  return y;
}

}  // namespace clover
