#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "clover/synthetic.hpp"
#include "clover/transform.hpp"
#include "oracles.hpp"

using clover::AttentionWeights;
using clover::FactorMode;
using clover::MaskSpec;
using clover::Tensor;

namespace {

AttentionWeights weights(std::size_t D, std::size_t h, std::size_t d, std::uint64_t seed, bool bias = false,
                         std::size_t rank = 0, double noise = 0.0) {
  clover::SyntheticSpec spec{D, h, d, rank, bias, noise, seed};
  return clover::synthetic_weights(spec);
}

// Every head's q/k/v slab is the first d columns of the identity; o is its transpose.
AttentionWeights slab_weights(std::size_t D, std::size_t h, std::size_t d) {
  AttentionWeights w = AttentionWeights::zeros(D, h, d);
  Tensor slab({D, d});
  for (std::size_t j = 0; j < d; ++j) slab(j, j) = 1.0;
  for (std::size_t i = 0; i < h; ++i) {
    w.set_q_slab(i, slab);
    w.set_k_slab(i, slab);
    w.set_v_slab(i, slab);
    w.set_o_slab(i, clover::transpose(slab));
  }
  return w;
}

double forward_gap(const AttentionWeights& a, const AttentionWeights& b, const MaskSpec& mask = {}) {
  const Tensor x = clover::random_input(2, 6, a.model_dim, 99);
  return clover::max_abs_diff(clover::mha_forward(x, a, mask), clover::mha_forward(x, b, mask));
}

double factored_gap(const AttentionWeights& w, const clover::CloverFactors& f, const MaskSpec& mask = {}) {
  const Tensor x = clover::random_input(2, 6, w.model_dim, 98);
  return clover::max_abs_diff(clover::mha_forward(x, w, mask), clover::mha_forward_factored(x, f, mask));
}

clover::ParamQuery dims(std::size_t D, std::size_t h, std::size_t d) {
  clover::ParamQuery q;
  q.model_dim = D;
  q.num_heads = h;
  q.head_dim = d;
  return q;
}

}  // namespace

TEST(AbsorbQk, OrthonormalSlabsGiveProjector) {
  const auto qk = clover::absorb_qk(slab_weights(6, 2, 3));
  EXPECT_FALSE(qk.augmented);
  for (const auto& head : qk.heads) {
    const Tensor p = oracle::matmul(head.left, head.right);
    for (std::size_t a = 0; a < 6; ++a)
      for (std::size_t b = 0; b < 6; ++b) EXPECT_EQ(p(a, b), a == b && a < 3 ? 1.0 : 0.0);
  }
}

TEST(AbsorbQk, ZeroKeyGivesZero) {
  AttentionWeights w = weights(8, 2, 4, 1);
  w.w_k = Tensor(w.w_k.shape());
  for (const auto& head : clover::absorb_qk(w).heads) EXPECT_EQ(clover::max_abs(oracle::matmul(head.left, head.right)), 0.0);
}

TEST(AbsorbQk, ExplicitProductWithBiasAugmentation) {
  const AttentionWeights w = weights(16, 2, 4, 2, true);
  const auto qk = clover::absorb_qk(w);
  ASSERT_TRUE(qk.augmented);
  for (std::size_t i = 0; i < 2; ++i) {
    // Oracle: [w_q; b_q] · [w_k; b_k]^T built entry by entry.
    Tensor expected({17, 17});
    for (std::size_t a = 0; a < 17; ++a)
      for (std::size_t b = 0; b < 17; ++b) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
          const double q = a < 16 ? w.w_q(a, i, j) : (*w.b_q)(i, j);
          const double k = b < 16 ? w.w_k(b, i, j) : (*w.b_k)(i, j);
          sum += q * k;
        }
        expected(a, b) = sum;
      }
    EXPECT_LE(clover::max_abs_diff(oracle::matmul(qk.heads[i].left, qk.heads[i].right), expected), 1e-14);
  }
}

TEST(AbsorbVo, FoldedBias) {
  AttentionWeights w = weights(8, 2, 4, 3, true);
  w.b_v = Tensor(w.b_v->shape());
  EXPECT_EQ(*clover::absorb_vo(w).folded_b_o, *w.b_o);

  AttentionWeights one = slab_weights(5, 1, 2);
  one.b_o = Tensor({5}, 0.5);
  one.b_v = Tensor({1, 2});
  (*one.b_v)(0, 0) = 1.0;
  const Tensor folded = *clover::absorb_vo(one).folded_b_o;
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(folded[c], c == 0 ? 1.5 : 0.5);
}

TEST(AbsorbVo, FoldedBiasForwardEquivalent) {
  const AttentionWeights w = weights(12, 3, 4, 4, true);
  AttentionWeights folded = w;
  folded.b_o = clover::absorb_vo(w).folded_b_o;
  folded.b_v.reset();
  for (const MaskSpec& mask : {MaskSpec::none(), MaskSpec::causal(), MaskSpec::sliding_window(2)}) {
    EXPECT_LE(forward_gap(w, folded, mask), 1e-12);
  }
}

TEST(Decompose, OrthonormalSlabsHaveUnitSpectrum) {
  const auto f = clover::decompose_factors(slab_weights(8, 2, 3));
  for (double s : f.s_qk.values()) EXPECT_NEAR(s, 1.0, 1e-15);
  for (double s : f.s_vo.values()) EXPECT_NEAR(s, 1.0, 1e-15);
}

TEST(Decompose, DuplicateValueColumnDropsRank) {
  AttentionWeights w = weights(10, 2, 4, 5);
  Tensor v = w.v_slab(1);
  for (std::size_t a = 0; a < 10; ++a) v(a, 3) = v(a, 1);
  w.set_v_slab(1, v);
  const auto f = clover::decompose_factors(w);
  EXPECT_LE(f.s_vo(1, 3), 1e-12);
  EXPECT_GT(f.s_vo(1, 2), 1e-3);
}

TEST(Decompose, ForwardEquivalentAcrossSweep) {
  std::uint64_t seed = 0;
  for (std::size_t D : {8, 16}) {
    for (std::size_t d : {2, 4}) {
      for (bool bias : {false, true}) {
        const AttentionWeights w = weights(D, 2, d, ++seed, bias);
        const auto f = clover::decompose_factors(w);
        f.validate();
        for (const MaskSpec& mask : {MaskSpec::none(), MaskSpec::causal(), MaskSpec::sliding_window(3)}) {
          EXPECT_LE(factored_gap(w, f, mask), 1e-10) << "D=" << D << " d=" << d << " bias=" << bias;
        }
      }
    }
  }
}

TEST(Decompose, QrModeFactors) {
  const AttentionWeights w = weights(12, 2, 4, 6);
  const auto f = clover::decompose_factors(w, FactorMode::qr_qk_svd_vo);
  f.validate();
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_LE(clover::relative_frobenius_error(clover::matmul(f.q_q.slab(i), f.r_q.slab(i)), w.q_slab(i)), 1e-12);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < a; ++b) EXPECT_EQ(f.r_k(i, a, b), 0.0);
  }
  EXPECT_LE(factored_gap(w, f, MaskSpec::causal()), 1e-10);
  EXPECT_THROW(clover::decompose_factors(weights(12, 2, 4, 6, true), FactorMode::qr_qk_svd_vo), std::invalid_argument);
}

TEST(Prune, ZeroThresholdIsBitIdentical) {
  const AttentionWeights w = weights(12, 2, 4, 7, true);
  const auto f = clover::decompose_factors(w);
  const auto r = clover::prune_factors(f, 0.0, 0.0);
  EXPECT_EQ(r.factors.rank_qk, f.rank_qk);
  EXPECT_EQ(r.factors.rank_vo, f.rank_vo);
  const Tensor x = clover::random_input(2, 5, 12, 8);
  EXPECT_EQ(clover::mha_forward_factored(x, f), clover::mha_forward_factored(x, r.factors));
  EXPECT_EQ(r.stats.params_after_total(), r.stats.params_before_total());
}

TEST(Prune, ZeroThresholdDropsExactZeros) {
  AttentionWeights w = weights(8, 2, 2, 9);
  w.set_v_slab(1, Tensor({8, 2}));
  const auto r = clover::prune_factors(clover::decompose_factors(w), 0.0, 0.0);
  EXPECT_EQ(r.factors.rank_vo[1], 0u);
  EXPECT_EQ(r.factors.rank_vo[0], 2u);
  EXPECT_LE(factored_gap(w, r.factors), 1e-12);
}

TEST(Prune, ConstructedHalfRank) {
  const std::size_t D = 16, h = 2, d = 8;
  const AttentionWeights w = weights(D, h, d, 10, false, d / 2);
  const auto f = clover::decompose_factors(w);
  const auto r = clover::prune_factors(f, 1e-8, 1e-8);
  for (std::size_t i = 0; i < h; ++i) {
    EXPECT_EQ(r.factors.rank_qk[i], d / 2);
    EXPECT_EQ(r.factors.rank_vo[i], d / 2);
  }
  EXPECT_EQ(r.stats.qk.params_before, h * d * (2 * D + 1));
  EXPECT_DOUBLE_EQ(r.stats.qk.reduction_pct(), 50.0);
  EXPECT_DOUBLE_EQ(r.stats.vo.reduction_pct(), 50.0);
  EXPECT_LE(factored_gap(w, r.factors, MaskSpec::causal()), 1e-10);
}

TEST(Prune, ThresholdBandAboveNoiseFloor) {
  const std::size_t D = 16, h = 2, d = 8;
  const AttentionWeights w = weights(D, h, d, 11, false, d / 2, 1e-4);
  const auto f = clover::decompose_factors(w);
  const auto low = clover::prune_factors(f, 1e-3, 1e-3);
  const auto reference = clover::prune_factors(f, 5e-3, 6e-3);
  EXPECT_EQ(low.factors.rank_qk, reference.factors.rank_qk);
  EXPECT_EQ(low.factors.rank_vo, reference.factors.rank_vo);
  for (std::size_t i = 0; i < h; ++i) EXPECT_EQ(reference.factors.rank_vo[i], d / 2);
}

TEST(Prune, LosslessBelowRelativeZero) {
  const AttentionWeights w = weights(16, 2, 8, 12, false, 4);
  const auto f = clover::decompose_factors(w);
  double smax = 0.0;
  for (double s : f.s_qk.values()) smax = std::max(smax, s);
  for (double s : f.s_vo.values()) smax = std::max(smax, s);
  const auto r = clover::prune_factors(f, 1e-12 * smax, 1e-12 * smax);
  EXPECT_LE(factored_gap(w, r.factors), 1e-10);
}

TEST(Prune, MonotoneLadder) {
  const AttentionWeights w = weights(16, 2, 8, 13, true);
  const auto f = clover::decompose_factors(w);
  std::uint64_t prev_params = ~0ULL;
  double prev_gap = 0.0;
  for (double t : {0.0, 1e-6, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.5, 1.0, 5.0}) {
    const auto r = clover::prune_factors(f, t, t);
    EXPECT_LE(r.stats.params_after_total(), prev_params);
    const double gap = factored_gap(w, r.factors);
    EXPECT_GE(gap + 1e-12, prev_gap) << "threshold " << t;
    prev_params = r.stats.params_after_total();
    prev_gap = gap;
    for (std::size_t rank : r.factors.rank_qk) EXPECT_LE(rank, 8u);
  }
}

TEST(Prune, ScalingLeavesRelativeSpectrum) {
  const AttentionWeights w = weights(12, 2, 4, 14);
  AttentionWeights scaled = w;
  scaled.w_v = clover::scale(w.w_v, 3.5);
  const auto a = clover::decompose_factors(w), b = clover::decompose_factors(scaled);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(b.s_vo(i, j), 3.5 * a.s_vo(i, j), 1e-12 * b.s_vo(i, 0));
      EXPECT_NEAR(b.s_vo(i, j) / b.s_vo(i, 0), a.s_vo(i, j) / a.s_vo(i, 0), 1e-12);
    }
  }
}

TEST(Prune, RejectsNegativeThresholdAndQrFactors) {
  const AttentionWeights w = weights(8, 1, 2, 15);
  EXPECT_THROW(clover::prune_factors(clover::decompose_factors(w), -1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(clover::prune_factors(clover::decompose_factors(w, FactorMode::qr_qk_svd_vo), 0.0, 0.0),
               std::invalid_argument);
}

TEST(VanillaPrune, KeepAllIsIdentity) {
  const AttentionWeights w = weights(8, 2, 4, 16, true);
  const AttentionWeights p = clover::vanilla_prune(w, 1.0);
  EXPECT_EQ(p.w_q, w.w_q);
  EXPECT_EQ(p.w_o, w.w_o);
  EXPECT_EQ(*p.b_v, *w.b_v);
}

TEST(VanillaPrune, TinyDimensionRemovedFirst) {
  AttentionWeights w = weights(8, 1, 4, 17);
  for (std::size_t a = 0; a < 8; ++a) {
    w.w_q(a, 0, 2) *= 1e-9;
    w.w_k(a, 0, 2) *= 1e-9;
  }
  const AttentionWeights p = clover::vanilla_prune(w, 0.75, 1.0);
  for (std::size_t a = 0; a < 8; ++a) {
    EXPECT_EQ(p.w_q(a, 0, 2), 0.0);
    EXPECT_EQ(p.w_q(a, 0, 1), w.w_q(a, 0, 1));
  }
}

TEST(VanillaPrune, NormPruningDegradesWhereSpectralIsLossless) {
  const std::size_t D = 16, h = 2, d = 8;
  const AttentionWeights w = weights(D, h, d, 18, false, d / 2);
  const auto norms = clover::dimension_norms(w);
  for (const auto& head : norms.qk)
    for (double n : head) EXPECT_NEAR(n, std::sqrt(2.0), 1e-12);
  const double vanilla = forward_gap(w, clover::vanilla_prune(w, 0.5));
  const auto spectral = clover::prune_factors(clover::decompose_factors(w), 1e-8, 1e-8);
  EXPECT_GE(vanilla, 1e-2);
  EXPECT_LE(factored_gap(w, spectral.factors), 1e-10);
}

TEST(VanillaPrune, KeepCount) {
  EXPECT_EQ(clover::kept_dimensions(0.5, 8), 4u);
  EXPECT_EQ(clover::kept_dimensions(0.3, 4), 2u);
  EXPECT_EQ(clover::kept_dimensions(1.0, 4), 4u);
  EXPECT_THROW(clover::kept_dimensions(0.0, 4), std::invalid_argument);
  EXPECT_THROW(clover::kept_dimensions(1.5, 4), std::invalid_argument);
}

TEST(MergeBack, RoundTrip) {
  for (bool bias : {false, true}) {
    const AttentionWeights w = weights(12, 3, 4, 19, bias);
    for (FactorMode mode : {FactorMode::svd_both, FactorMode::qr_qk_svd_vo}) {
      if (bias && mode == FactorMode::qr_qk_svd_vo) continue;
      const AttentionWeights m = clover::merge_back(clover::decompose_factors(w, mode));
      EXPECT_LE(forward_gap(w, m, MaskSpec::causal()), 1e-10);
      EXPECT_EQ(m.has_qk_bias(), bias && mode == FactorMode::svd_both);
    }
  }
}

TEST(MergeBack, ScaledSDoublesLogits) {
  const AttentionWeights w = weights(10, 2, 4, 20);
  auto f = clover::decompose_factors(w);
  const Tensor x = clover::random_input(1, 5, 10, 21);
  const Tensor before = clover::attention_logits(x, clover::merge_back(f));
  for (std::size_t j = 0; j < 4; ++j) f.s_qk(1, j) *= 2.0;
  const Tensor after = clover::attention_logits(x, clover::merge_back(f));
  for (std::size_t k = 0; k < 25; ++k) {
    EXPECT_NEAR(after[25 + k], 2.0 * before[25 + k], 1e-12 * (1.0 + std::abs(before[25 + k])));
    EXPECT_EQ(after[k], before[k]);
  }
}

TEST(MergeBack, PrunedShapes) {
  const AttentionWeights w = weights(16, 2, 8, 22, false, 4);
  const auto r = clover::prune_factors(clover::decompose_factors(w), 1e-8, 1e-8);
  const AttentionWeights m = clover::merge_back(r.factors);
  EXPECT_EQ(m.qk_dim(), 4u);
  EXPECT_EQ(m.vo_dim(), 4u);
  EXPECT_EQ(m.head_dim, 8u);
  EXPECT_LE(forward_gap(w, m), 1e-10);
}

TEST(CountParams, LargeModelDims) {
  clover::ParamQuery q = dims(4096, 32, 128);
  EXPECT_EQ(clover::count_params(q).trainable, 1052672u);
  EXPECT_EQ(*clover::count_params(q).trainable_alt, 1052672u + 32u * 128 * 128);
  q = clover::parse_param_method("lora:64", q);
  EXPECT_EQ(clover::count_params(q).trainable, 1572864u);
  EXPECT_EQ(clover::count_params(q).trainable, 3u * 2 * 4096 * 64);
}

TEST(CountParams, SmallCases) {
  const clover::ParamQuery q = dims(8, 2, 4);
  EXPECT_EQ(clover::count_params(clover::parse_param_method("lora:0", q)).trainable, 0u);
  EXPECT_EQ(clover::count_params(clover::parse_param_method("full", q)).trainable, 256u);
  EXPECT_EQ(clover::count_params(clover::parse_param_method("clover-svd", q)).trainable, 2u * 2 * 16);
  const auto lora = clover::count_params(clover::parse_param_method("lora:2", q));
  const auto dora = clover::count_params(clover::parse_param_method("dora:2", q));
  EXPECT_EQ(dora.trainable, lora.trainable + 3 * 8);
  EXPECT_THROW(clover::parse_param_method("lora:x", q), std::invalid_argument);
  EXPECT_THROW(clover::parse_param_method("pissa", q), std::invalid_argument);
}

TEST(Spectrum, FlatForOrthonormalSlabs) {
  const auto rep = clover::spectrum_report(slab_weights(8, 2, 3));
  for (const auto& hs : rep.heads) {
    ASSERT_EQ(hs.sv_qk.size(), 3u);
    for (double v : hs.sv_qk) EXPECT_NEAR(v, 1.0, 1e-15);
    for (double v : hs.norm_qk) EXPECT_NEAR(v, std::sqrt(2.0), 1e-15);
  }
}

TEST(Spectrum, ConstructedRankHasHalfZeros) {
  const auto rep = clover::spectrum_report(weights(16, 2, 8, 23, false, 4));
  for (const auto& hs : rep.heads) {
    EXPECT_EQ(std::count_if(hs.sv_qk.begin(), hs.sv_qk.end(), [](double v) { return v > 1e-12; }), 4);
    EXPECT_EQ(std::count_if(hs.sv_vo.begin(), hs.sv_vo.end(), [](double v) { return v > 1e-12; }), 4);
    for (double n : hs.norm_qk) EXPECT_GT(n, 0.1);
    EXPECT_TRUE(std::is_sorted(hs.sv_qk.rbegin(), hs.sv_qk.rend()));
  }
}

TEST(Spectrum, ZeroWeights) {
  const auto rep = clover::spectrum_report(AttentionWeights::zeros(6, 2, 2));
  for (const auto& hs : rep.heads)
    for (const auto* v : {&hs.sv_qk, &hs.sv_vo, &hs.norm_qk, &hs.norm_vo})
      for (double x : *v) EXPECT_EQ(x, 0.0);
}

TEST(Csv, SpectrumAndPruneSchemas) {
  const AttentionWeights w = weights(8, 1, 2, 24);
  std::ostringstream spec, prune;
  clover::write_spectrum_csv(spec, clover::spectrum_report(w));
  EXPECT_EQ(spec.str().substr(0, spec.str().find('\n')), "layer,head,index,value,kind");
  EXPECT_NE(spec.str().find(",norm_vo\n"), std::string::npos);
  const auto r = clover::prune_factors(clover::decompose_factors(w), 0.0, 0.0);
  clover::write_prune_csv(prune, r.stats);
  EXPECT_EQ(prune.str().substr(0, prune.str().find('\n')), "layer,head,pair,rank_before,rank_after,params_before,params_after");
  EXPECT_EQ(clover::format_double(0.1), "0.10000000000000001");
}
