#include "clover/transform.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace clover {

namespace {

// [D, d] slab with bias appended as row D when `augment`.
Tensor augmented_slab(const Tensor& slab, const std::optional<Tensor>& bias, std::size_t head, bool augment) {
  if (!augment) return slab;
  Tensor m({slab.rows() + 1, slab.cols()});
  for (std::size_t a = 0; a < slab.rows(); ++a)
    for (std::size_t k = 0; k < slab.cols(); ++k) m(a, k) = slab(a, k);
  if (bias) {
    for (std::size_t k = 0; k < slab.cols(); ++k) m(slab.rows(), k) = (*bias)(head, k);
  }
  return m;
}

std::runtime_error head_error(const char* stage, std::size_t head, const std::exception& e) {
  return std::runtime_error(std::string(stage) + " failed at layer 0, head " + std::to_string(head) + ": " + e.what());
}

void put_svd_head(Tensor& u, Tensor& s, Tensor& v, std::size_t head, const SVDFactors& svd) {
  u.set_slab(head, svd.u);
  v.set_slab(head, svd.v);
  for (std::size_t j = 0; j < svd.s.size(); ++j) s(head, j) = svd.s[j];
}

}  // namespace

QkAbsorption absorb_qk(const AttentionWeights& w) {
  w.validate();
  QkAbsorption out;
  out.augmented = w.has_qk_bias();
  out.heads.reserve(w.num_heads);
  for (std::size_t i = 0; i < w.num_heads; ++i) {
    Tensor left = augmented_slab(w.q_slab(i), w.b_q, i, out.augmented);
    Tensor right = transpose(augmented_slab(w.k_slab(i), w.b_k, i, out.augmented));
    out.heads.push_back({std::move(left), std::move(right)});
  }
  return out;
}

VoAbsorption absorb_vo(const AttentionWeights& w) {
  w.validate();
  VoAbsorption out;
  out.heads.reserve(w.num_heads);
  for (std::size_t i = 0; i < w.num_heads; ++i) out.heads.push_back({w.v_slab(i), w.o_slab(i)});
  if (w.b_o || w.b_v) {
    Tensor folded = w.b_o ? *w.b_o : Tensor({w.model_dim});
    if (w.b_v) {
      for (std::size_t i = 0; i < w.num_heads; ++i) {
        const Tensor bv = w.b_v->slab(i).reshaped({1, w.vo_dim()});
        folded = add(folded, matmul(bv, w.o_slab(i)).reshaped({w.model_dim}));
      }
    }
    out.folded_b_o = std::move(folded);
  }
  return out;
}

CloverFactors decompose_factors(const AttentionWeights& w, FactorMode mode) {
  w.validate();
  const std::size_t h = w.num_heads, D = w.model_dim;
  CloverFactors f;
  f.mode = mode;
  f.model_dim = D;
  f.num_heads = h;
  f.head_dim = w.head_dim;

  if (mode == FactorMode::svd_both) {
    const QkAbsorption qk = absorb_qk(w);
    const std::size_t dq = D + (qk.augmented ? 1 : 0);
    const std::size_t r = w.qk_dim();
    f.qk_augmented = qk.augmented;
    f.u_qk = Tensor({h, dq, r});
    f.s_qk = Tensor({h, r});
    f.v_qk = Tensor({h, r, dq});
    f.rank_qk.assign(h, r);
    for (std::size_t i = 0; i < h; ++i) {
      try {
        put_svd_head(f.u_qk, f.s_qk, f.v_qk, i, product_svd(qk.heads[i].left, qk.heads[i].right));
      } catch (const std::exception& e) {
        throw head_error("qk decomposition", i, e);
      }
    }
  } else {
    if (w.has_qk_bias()) {
      throw std::invalid_argument("qr mode does not support query/key biases (RoPE rotates only head coordinates)");
    }
    if (w.qk_dim() != w.head_dim) {
      throw std::invalid_argument("qr mode needs query/key width equal to head_dim");
    }
    const std::size_t d = w.head_dim;
    f.q_q = Tensor({h, D, d});
    f.r_q = Tensor({h, d, d});
    f.q_k = Tensor({h, D, d});
    f.r_k = Tensor({h, d, d});
    for (std::size_t i = 0; i < h; ++i) {
      try {
        QRFactors qq = householder_qr(w.q_slab(i));
        QRFactors qk = householder_qr(w.k_slab(i));
        f.q_q.set_slab(i, qq.q);
        f.r_q.set_slab(i, qq.r);
        f.q_k.set_slab(i, qk.q);
        f.r_k.set_slab(i, qk.r);
      } catch (const std::exception& e) {
        throw head_error("qk qr factorization", i, e);
      }
    }
  }

  const VoAbsorption vo = absorb_vo(w);
  const std::size_t rv = w.vo_dim();
  f.u_vo = Tensor({h, D, rv});
  f.s_vo = Tensor({h, rv});
  f.v_vo = Tensor({h, rv, D});
  f.rank_vo.assign(h, rv);
  for (std::size_t i = 0; i < h; ++i) {
    try {
      put_svd_head(f.u_vo, f.s_vo, f.v_vo, i, product_svd(vo.heads[i].left, vo.heads[i].right));
    } catch (const std::exception& e) {
      throw head_error("vo decomposition", i, e);
    }
  }
  f.folded_b_o = vo.folded_b_o;
  return f;
}

double PairStats::reduction_pct() const {
  if (params_before == 0) return 0.0;
  return 100.0 * static_cast<double>(params_before - params_after) / static_cast<double>(params_before);
}

double PruneStats::reduction_total_pct() const {
  const auto before = params_before_total();
  if (before == 0) return 0.0;
  return 100.0 * static_cast<double>(before - params_after_total()) / static_cast<double>(before);
}

std::uint64_t factored_pair_params(std::size_t rank, std::size_t in_dim, std::size_t out_dim) {
  return static_cast<std::uint64_t>(rank) * (in_dim + out_dim + 1);
}

namespace {

struct PrunedSide {
  Tensor u, s, v;
  std::optional<Tensor> trainable;
  PairStats stats;
  std::vector<std::size_t> ranks;
};

PrunedSide prune_side(const Tensor& u, const Tensor& s, const Tensor& v, const std::optional<Tensor>& trainable,
                      const std::vector<std::size_t>& ranks, double threshold, std::size_t in_dim,
                      std::size_t out_dim) {
  const std::size_t h = ranks.size();
  const double cut = std::max(threshold, kMachineZero);
  PrunedSide out;
  out.stats.rank_before = ranks;
  out.stats.params_per_direction = factored_pair_params(1, in_dim, out_dim);
  out.ranks.resize(h);
  for (std::size_t i = 0; i < h; ++i) {
    std::size_t keep = 0;
    // Sorted nonincreasing, so the kept set is a prefix.
    while (keep < ranks[i] && s(i, keep) > cut) ++keep;
    out.ranks[i] = keep;
    out.stats.params_before += factored_pair_params(ranks[i], in_dim, out_dim);
    out.stats.params_after += factored_pair_params(keep, in_dim, out_dim);
  }
  out.stats.rank_after = out.ranks;
  const std::size_t rmax = std::max<std::size_t>(1, *std::max_element(out.ranks.begin(), out.ranks.end()));
  out.u = Tensor({h, in_dim, rmax});
  out.s = Tensor({h, rmax});
  out.v = Tensor({h, rmax, out_dim});
  if (trainable) out.trainable = Tensor({h, rmax, rmax});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t r = out.ranks[i];
    for (std::size_t j = 0; j < r; ++j) {
      out.s(i, j) = s(i, j);
      for (std::size_t a = 0; a < in_dim; ++a) out.u(i, a, j) = u(i, a, j);
      for (std::size_t a = 0; a < out_dim; ++a) out.v(i, j, a) = v(i, j, a);
      if (trainable) {
        for (std::size_t k = 0; k < r; ++k) (*out.trainable)(i, j, k) = (*trainable)(i, j, k);
      }
    }
  }
  return out;
}

}  // namespace

PruneResult prune_factors(const CloverFactors& f, double threshold_qk, double threshold_vo) {
  if (threshold_qk < 0.0 || threshold_vo < 0.0 || std::isnan(threshold_qk) || std::isnan(threshold_vo)) {
    throw std::invalid_argument("prune thresholds must be nonnegative");
  }
  if (f.mode != FactorMode::svd_both) {
    throw std::invalid_argument("prune_factors needs svd factors; qr factors carry no singular values for Q/K");
  }
  PruneResult result;
  result.factors = f;
  const std::size_t dq = f.qk_input_dim();
  PrunedSide qk = prune_side(f.u_qk, f.s_qk, f.v_qk, f.trainable_s_qk, f.rank_qk, threshold_qk, dq, dq);
  PrunedSide vo =
      prune_side(f.u_vo, f.s_vo, f.v_vo, f.trainable_s_vo, f.rank_vo, threshold_vo, f.model_dim, f.model_dim);
  result.factors.u_qk = std::move(qk.u);
  result.factors.s_qk = std::move(qk.s);
  result.factors.v_qk = std::move(qk.v);
  result.factors.trainable_s_qk = std::move(qk.trainable);
  result.factors.rank_qk = std::move(qk.ranks);
  result.factors.u_vo = std::move(vo.u);
  result.factors.s_vo = std::move(vo.s);
  result.factors.v_vo = std::move(vo.v);
  result.factors.trainable_s_vo = std::move(vo.trainable);
  result.factors.rank_vo = std::move(vo.ranks);
  result.stats.qk = std::move(qk.stats);
  result.stats.vo = std::move(vo.stats);
  return result;
}

DimensionNorms dimension_norms(const AttentionWeights& w) {
  w.validate();
  DimensionNorms out;
  out.qk.assign(w.num_heads, std::vector<double>(w.qk_dim()));
  out.vo.assign(w.num_heads, std::vector<double>(w.vo_dim()));
  for (std::size_t i = 0; i < w.num_heads; ++i) {
    for (std::size_t k = 0; k < w.qk_dim(); ++k) {
      double sum = 0.0;
      for (std::size_t a = 0; a < w.model_dim; ++a) {
        sum += w.w_q(a, i, k) * w.w_q(a, i, k);
        sum += w.w_k(a, i, k) * w.w_k(a, i, k);
      }
      out.qk[i][k] = std::sqrt(sum);
    }
    for (std::size_t k = 0; k < w.vo_dim(); ++k) {
      double sum = 0.0;
      for (std::size_t a = 0; a < w.model_dim; ++a) {
        sum += w.w_v(a, i, k) * w.w_v(a, i, k);
        sum += w.w_o(i, k, a) * w.w_o(i, k, a);
      }
      out.vo[i][k] = std::sqrt(sum);
    }
  }
  return out;
}

std::size_t kept_dimensions(double keep_fraction, std::size_t width) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("keep fraction must lie in (0, 1]");
  }
  const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(width) - 1e-9));
  if (keep == 0) throw std::invalid_argument("keep fraction retains no dimension in a head");
  return std::min(keep, width);
}

namespace {

// Indices of the lowest-scoring dimensions, ties broken toward later indices.
std::vector<std::size_t> dropped_dimensions(const std::vector<double>& scores, std::size_t keep) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return {order.begin() + static_cast<std::ptrdiff_t>(keep), order.end()};
}

}  // namespace

AttentionWeights vanilla_prune(const AttentionWeights& w, double keep_fraction_qk, double keep_fraction_vo) {
  const DimensionNorms norms = dimension_norms(w);
  const std::size_t keep_qk = kept_dimensions(keep_fraction_qk, w.qk_dim());
  const std::size_t keep_vo = kept_dimensions(keep_fraction_vo, w.vo_dim());
  AttentionWeights out = w;
  for (std::size_t i = 0; i < w.num_heads; ++i) {
    for (std::size_t k : dropped_dimensions(norms.qk[i], keep_qk)) {
      for (std::size_t a = 0; a < w.model_dim; ++a) {
        out.w_q(a, i, k) = 0.0;
        out.w_k(a, i, k) = 0.0;
      }
      if (out.b_q) (*out.b_q)(i, k) = 0.0;
      if (out.b_k) (*out.b_k)(i, k) = 0.0;
    }
    for (std::size_t k : dropped_dimensions(norms.vo[i], keep_vo)) {
      for (std::size_t a = 0; a < w.model_dim; ++a) {
        out.w_v(a, i, k) = 0.0;
        out.w_o(i, k, a) = 0.0;
      }
      if (out.b_v) (*out.b_v)(i, k) = 0.0;
    }
  }
  return out;
}

AttentionWeights merge_back(const CloverFactors& f) {
  f.validate();
  const std::size_t h = f.num_heads, D = f.model_dim;
  AttentionWeights w;
  w.model_dim = D;
  w.num_heads = h;
  w.head_dim = f.head_dim;

  if (f.mode == FactorMode::svd_both) {
    const std::size_t rmax = std::max<std::size_t>(1, *std::max_element(f.rank_qk.begin(), f.rank_qk.end()));
    w.w_q = Tensor({D, h, rmax});
    w.w_k = Tensor({D, h, rmax});
    if (f.qk_augmented) {
      w.b_q = Tensor({h, rmax});
      w.b_k = Tensor({h, rmax});
    }
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t r = f.rank_qk[i];
      if (r == 0) continue;
      const Tensor left = matmul(f.u_qk_head(i), f.mix_qk_head(i));  // [D_q, r]
      const Tensor right = transpose(f.v_qk_head(i));                 // [D_q, r]
      for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t a = 0; a < D; ++a) {
          w.w_q(a, i, j) = left(a, j);
          w.w_k(a, i, j) = right(a, j);
        }
        if (f.qk_augmented) {
          (*w.b_q)(i, j) = left(D, j);
          (*w.b_k)(i, j) = right(D, j);
        }
      }
    }
  } else {
    const std::size_t d = f.head_dim;
    w.w_q = Tensor({D, h, d});
    w.w_k = Tensor({D, h, d});
    for (std::size_t i = 0; i < h; ++i) {
      w.set_q_slab(i, matmul(f.q_q.slab(i), f.r_q.slab(i)));
      w.set_k_slab(i, matmul(f.q_k.slab(i), f.r_k.slab(i)));
    }
  }

  const std::size_t rmax = std::max<std::size_t>(1, *std::max_element(f.rank_vo.begin(), f.rank_vo.end()));
  w.w_v = Tensor({D, h, rmax});
  w.w_o = Tensor({h, rmax, D});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t r = f.rank_vo[i];
    if (r == 0) continue;
    const Tensor left = matmul(f.u_vo_head(i), f.mix_vo_head(i));
    const Tensor right = f.v_vo_head(i);
    for (std::size_t j = 0; j < r; ++j) {
      for (std::size_t a = 0; a < D; ++a) {
        w.w_v(a, i, j) = left(a, j);
        w.w_o(i, j, a) = right(j, a);
      }
    }
  }
  w.b_o = f.folded_b_o;
  return w;
}

namespace {

std::size_t count_targets(const std::string& targets, const char* allowed) {
  for (char c : targets) {
    if (std::string(allowed).find(c) == std::string::npos) {
      throw std::invalid_argument(std::string("unknown target '") + c + "' (expected letters from " + allowed + ")");
    }
  }
  return targets.size();
}

}  // namespace

ParamReport count_params(const ParamQuery& q) {
  const std::uint64_t D = q.model_dim, h = q.num_heads, d = q.head_dim, r = q.lora_rank;
  const std::uint64_t hd = h * d;
  ParamReport rep;
  std::ostringstream formula;
  switch (q.method) {
    case PeftMethod::clover: {
      rep.targets = "qk,vo";
      rep.frozen = 4 * D * hd;
      if (q.clover_mode == FactorMode::qr_qk_svd_vo) {
        rep.method = "clover-qr";
        const std::uint64_t tri = d * (d + 1) / 2;
        rep.trainable = 2 * h * tri + h * d * d;
        formula << "2*h*d(d+1)/2 [R_q, R_k] + h*d^2 [S_vo] = 2*" << h << "*" << tri << " + " << h << "*" << d * d;
        rep.trainable_alt = rep.trainable + h * d * d;
        std::ostringstream alt;
        alt << "2*h*d(d+1)/2 + h*d^2 [S_vo] + h*d^2 [full S_qk] = " << *rep.trainable_alt;
        rep.formula_alt = alt.str();
      } else {
        rep.method = "clover-svd";
        rep.trainable = 2 * h * d * d;
        formula << "2*h*d^2 [S_qk, S_vo] = 2*" << h << "*" << d * d;
      }
      break;
    }
    case PeftMethod::lora:
    case PeftMethod::dora: {
      rep.targets = q.targets.empty() ? "qkv" : q.targets;
      const bool dora = q.method == PeftMethod::dora;
      rep.method = std::string(dora ? "dora:" : "lora:") + std::to_string(r);
      count_targets(rep.targets, "qkvo");
      std::uint64_t trainable = 0;
      std::uint64_t magnitudes = 0;
      for (char c : rep.targets) {
        // Each target is a D x (h*d) projection (or its transpose for o).
        trainable += r * (D + hd);
        magnitudes += (c == 'o') ? D : hd;
      }
      rep.trainable = trainable + (dora ? magnitudes : 0);
      rep.frozen = rep.targets.size() * D * hd;
      formula << rep.targets.size() << "*r*(D + h*d)";
      if (dora) formula << " + magnitude vectors (" << magnitudes << ")";
      formula << " = " << rep.targets.size() << "*" << r << "*(" << D << " + " << hd << ")";
      if (dora) formula << " + " << magnitudes;
      break;
    }
    case PeftMethod::full: {
      rep.method = "full";
      rep.targets = q.targets.empty() ? "qkvo" : q.targets;
      count_targets(rep.targets, "qkvo");
      rep.trainable = rep.targets.size() * D * hd;
      rep.frozen = 0;
      formula << rep.targets.size() << "*D*h*d = " << rep.targets.size() << "*" << D << "*" << hd;
      break;
    }
  }
  formula << " = " << rep.trainable;
  rep.formula = formula.str();
  return rep;
}

ParamQuery parse_param_method(const std::string& text, ParamQuery base) {
  auto rank_after_colon = [&](std::size_t prefix) {
    const std::string num = text.substr(prefix);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(num, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != num.size()) throw std::invalid_argument("bad rank in method '" + text + "'");
    return static_cast<std::size_t>(v);
  };
  if (text == "clover" || text == "clover-qr") {
    base.method = PeftMethod::clover;
    base.clover_mode = FactorMode::qr_qk_svd_vo;
  } else if (text == "clover-svd") {
    base.method = PeftMethod::clover;
    base.clover_mode = FactorMode::svd_both;
  } else if (text.rfind("lora:", 0) == 0) {
    base.method = PeftMethod::lora;
    base.lora_rank = rank_after_colon(5);
  } else if (text.rfind("dora:", 0) == 0) {
    base.method = PeftMethod::dora;
    base.lora_rank = rank_after_colon(5);
  } else if (text == "full") {
    base.method = PeftMethod::full;
  } else {
    throw std::invalid_argument("unknown method '" + text + "' (expected clover|lora:R|dora:R|full)");
  }
  return base;
}

SpectrumReport spectrum_report(const AttentionWeights& w, std::size_t layer) {
  const CloverFactors f = decompose_factors(w, FactorMode::svd_both);
  const DimensionNorms norms = dimension_norms(w);
  SpectrumReport rep;
  rep.layer = layer;
  rep.heads.resize(w.num_heads);
  for (std::size_t i = 0; i < w.num_heads; ++i) {
    HeadSpectrum& hs = rep.heads[i];
    const Tensor sq = f.s_qk_head(i);
    const Tensor sv = f.s_vo_head(i);
    hs.sv_qk.assign(sq.values().begin(), sq.values().end());
    hs.sv_vo.assign(sv.values().begin(), sv.values().end());
    hs.norm_qk = norms.qk[i];
    hs.norm_vo = norms.vo[i];
    std::sort(hs.norm_qk.begin(), hs.norm_qk.end(), std::greater<>());
    std::sort(hs.norm_vo.begin(), hs.norm_vo.end(), std::greater<>());
  }
  return rep;
}

std::size_t numerical_rank(const std::vector<double>& sorted_desc, double rel) {
  if (sorted_desc.empty() || sorted_desc.front() <= 0.0) return 0;
  const double cut = rel * sorted_desc.front();
  return static_cast<std::size_t>(
      std::count_if(sorted_desc.begin(), sorted_desc.end(), [cut](double v) { return v > cut; }));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_spectrum_csv(std::ostream& os, const SpectrumReport& report) {
  os << "layer,head,index,value,kind\n";
  for (std::size_t i = 0; i < report.heads.size(); ++i) {
    const HeadSpectrum& hs = report.heads[i];
    auto emit = [&](const std::vector<double>& values, const char* kind) {
      for (std::size_t j = 0; j < values.size(); ++j) {
        os << report.layer << ',' << i << ',' << j << ',' << format_double(values[j]) << ',' << kind << '\n';
      }
    };
    emit(hs.sv_qk, "sv_qk");
    emit(hs.sv_vo, "sv_vo");
    emit(hs.norm_qk, "norm_qk");
    emit(hs.norm_vo, "norm_vo");
  }
}

void write_prune_csv(std::ostream& os, const PruneStats& stats, std::size_t layer) {
  os << "layer,head,pair,rank_before,rank_after,params_before,params_after\n";
  auto emit = [&](const PairStats& p, const char* pair) {
    const std::uint64_t unit = p.params_per_direction;
    for (std::size_t i = 0; i < p.rank_before.size(); ++i) {
      os << layer << ',' << i << ',' << pair << ',' << p.rank_before[i] << ',' << p.rank_after[i] << ','
         << unit * p.rank_before[i] << ',' << unit * p.rank_after[i] << '\n';
    }
    os << layer << ",total," << pair << ','
       << std::accumulate(p.rank_before.begin(), p.rank_before.end(), std::size_t{0}) << ','
       << std::accumulate(p.rank_after.begin(), p.rank_after.end(), std::size_t{0}) << ',' << p.params_before << ','
       << p.params_after << '\n';
  };
  emit(stats.qk, "qk");
  emit(stats.vo, "vo");
}

}  // namespace clover
