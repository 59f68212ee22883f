#pragma once

// Absorb-decompose transforms over a single attention layer: absorb Q/K and
// V/O projection pairs per head, factor them into orthonormal bases plus
// singular values (or QR factors when RoPE separates Q and K), prune
// vanishing directions, and fold everything back into plain weights.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "clover/attention.hpp"
#include "clover/linalg.hpp"

namespace clover {

// W[i] = left[i] · right[i] for each head, never formed explicitly.
struct LowRankPair {
  Tensor left;   // [D_in, d]
  Tensor right;  // [d, D_out]
};

struct QkAbsorption {
  std::vector<LowRankPair> heads;
  bool augmented = false;  // inputs carry a trailing constant-1 coordinate
};

struct VoAbsorption {
  std::vector<LowRankPair> heads;
  std::optional<Tensor> folded_b_o;  // b_o + sum_i b_v[i] · w_o[i]
};

// Query/key biases become an extra input row: left = [w_q; b_q^T], right = [w_k; b_k^T]^T.
QkAbsorption absorb_qk(const AttentionWeights& w);
VoAbsorption absorb_vo(const AttentionWeights& w);

CloverFactors decompose_factors(const AttentionWeights& w, FactorMode mode = FactorMode::svd_both);

// Singular values at or below this are treated as exact zeros even with a zero threshold.
inline constexpr double kMachineZero = 1e-300;
// Relative cut used when reporting numerically-exact rank.
inline constexpr double kExactZeroRelative = 1e-12;

struct PairStats {
  std::vector<std::size_t> rank_before;
  std::vector<std::size_t> rank_after;
  std::uint64_t params_per_direction = 0;  // D_in + D_out + 1
  std::uint64_t params_before = 0;
  std::uint64_t params_after = 0;
  double reduction_pct() const;
};

struct PruneStats {
  PairStats qk;
  PairStats vo;
  std::uint64_t params_before_total() const { return qk.params_before + vo.params_before; }
  std::uint64_t params_after_total() const { return qk.params_after + vo.params_after; }
  double reduction_total_pct() const;
};

struct PruneResult {
  CloverFactors factors;
  PruneStats stats;
};

// Drops singular triples with s <= threshold (and exact zeros) per head.
// Parameter counts use r·(D_in + D_out + 1) per head and pair.
PruneResult prune_factors(const CloverFactors& f, double threshold_qk, double threshold_vo);

// Parameter count of one factored pair head: r·(D_in + D_out + 1).
std::uint64_t factored_pair_params(std::size_t rank, std::size_t in_dim, std::size_t out_dim);

// Per-dimension L2 scores used by the norm-pruning baseline, [h][inner].
struct DimensionNorms {
  std::vector<std::vector<double>> qk;
  std::vector<std::vector<double>> vo;
};
DimensionNorms dimension_norms(const AttentionWeights& w);

// Number of inner dimensions a keep fraction retains out of `width`.
std::size_t kept_dimensions(double keep_fraction, std::size_t width);

// Zeroes the lowest-norm inner dimensions of every head (and their biases).
AttentionWeights vanilla_prune(const AttentionWeights& w, double keep_fraction_qk, double keep_fraction_vo);
inline AttentionWeights vanilla_prune(const AttentionWeights& w, double keep_fraction) {
  return vanilla_prune(w, keep_fraction, keep_fraction);
}

// Folds S (or R) into the left basis. Inner dims become the maximum retained
// rank, with zero padding for heads that kept fewer directions.
AttentionWeights merge_back(const CloverFactors& f);

enum class PeftMethod { clover, lora, dora, full };

struct ParamQuery {
  std::size_t model_dim = 0;
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  PeftMethod method = PeftMethod::clover;
  FactorMode clover_mode = FactorMode::qr_qk_svd_vo;
  std::size_t lora_rank = 0;
  std::string targets;  // subset of "qkvo"; empty picks the method default
};

struct ParamReport {
  std::string method;
  std::string targets;
  std::uint64_t trainable = 0;
  std::uint64_t frozen = 0;
  std::string formula;
  // Second reading of the clover qr count where S_qk is also a full d x d block.
  std::optional<std::uint64_t> trainable_alt;
  std::string formula_alt;
};

ParamReport count_params(const ParamQuery& query);
// `clover`, `clover-svd`, `clover-qr`, `lora:R`, `dora:R`, `full`.
ParamQuery parse_param_method(const std::string& text, ParamQuery base);

struct HeadSpectrum {
  std::vector<double> sv_qk;
  std::vector<double> sv_vo;
  std::vector<double> norm_qk;
  std::vector<double> norm_vo;
};

struct SpectrumReport {
  std::size_t layer = 0;
  std::vector<HeadSpectrum> heads;
};

SpectrumReport spectrum_report(const AttentionWeights& w, std::size_t layer = 0);

// Count of values above rel * max(values), or 0 when all are zero.
std::size_t numerical_rank(const std::vector<double>& sorted_desc, double rel = kExactZeroRelative);

// CSV schemas (header row included, 17 significant digits):
//   spectrum: layer,head,index,value,kind
//   prune:    layer,head,pair,rank_before,rank_after,params_before,params_after
void write_spectrum_csv(std::ostream& os, const SpectrumReport& report);
void write_prune_csv(std::ostream& os, const PruneStats& stats, std::size_t layer = 0);

std::string format_double(double v);

}  // namespace clover
