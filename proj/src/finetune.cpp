#include "clover/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "clover/rng.hpp"
#include "clover/simd/kernels.hpp"
#include "clover/transform.hpp"

namespace clover {

namespace {

// Adds an [r, c] block into head `head` of a padded [h, R, C] tensor.
void add_head_block(Tensor& dst, std::size_t head, const Tensor& block, bool upper_only = false) {
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = upper_only ? i : 0; j < block.cols(); ++j) dst(head, i, j) += block(i, j);
}

Tensor sequence_block(const Tensor& y, std::size_t batch) {
  const std::size_t n = y.dim(1), D = y.dim(2);
  return Tensor({n, D}, std::vector<double>(y.values().begin() + batch * n * D, y.values().begin() + (batch + 1) * n * D));
}

Tensor diag_matrix(const Tensor& s, std::size_t rmax) {
  Tensor m({rmax, rmax});
  for (std::size_t j = 0; j < s.size(); ++j) m(j, j) = s[j];
  return m;
}

double inv_sqrt_dim(std::size_t d) { return 1.0 / std::sqrt(static_cast<double>(d)); }

}  // namespace

CloverFactors with_trainable_s(const CloverFactors& f, TrainableSelection sel) {
  CloverFactors out = f;
  const std::size_t h = f.num_heads;
  if (sel.qk && f.mode == FactorMode::svd_both && !out.trainable_s_qk) {
    const std::size_t rmax = f.s_qk.dim(1);
    Tensor t({h, rmax, rmax});
    for (std::size_t i = 0; i < h; ++i) t.set_slab(i, diag_matrix(f.s_qk_head(i), rmax));
    out.trainable_s_qk = std::move(t);
  }
  if (sel.vo && !out.trainable_s_vo) {
    const std::size_t rmax = f.s_vo.dim(1);
    Tensor t({h, rmax, rmax});
    for (std::size_t i = 0; i < h; ++i) t.set_slab(i, diag_matrix(f.s_vo_head(i), rmax));
    out.trainable_s_vo = std::move(t);
  }
  return out;
}

CachedForward factored_forward_cached(const Tensor& x, const CloverFactors& f, const MaskSpec& mask,
                                      const RopeSpec& rope) {
  if (x.rank() != 3 || x.dim(2) != f.model_dim) {
    throw ShapeError("input must be [b, n, " + std::to_string(f.model_dim) + "], got " + shape_to_string(x.shape()));
  }
  if (rope.enabled && f.mode == FactorMode::svd_both) {
    throw std::invalid_argument("RoPE needs qr factors");
  }
  const std::size_t b = x.dim(0), n = x.dim(1), D = f.model_dim;
  mask.validate(n);
  CachedForward out{Tensor({b, n, D}), {}};
  ForwardCache& cache = out.cache;
  cache.batch = b;
  cache.seq_len = n;
  cache.mask = mask;
  cache.rope = rope;
  cache.heads.resize(b);
  const double scale = inv_sqrt_dim(f.head_dim);

  for (std::size_t bi = 0; bi < b; ++bi) {
    const Tensor xb = sequence_input(x, bi, false);
    const Tensor xa = f.qk_augmented ? sequence_input(x, bi, true) : xb;
    Tensor yb({n, D});
    cache.heads[bi].resize(f.num_heads);
    for (std::size_t i = 0; i < f.num_heads; ++i) {
      ForwardCache::Head& hc = cache.heads[bi][i];
      if (f.rank_vo.at(i) == 0) {
        hc.active = false;
        continue;
      }
      Tensor logits({n, n});
      if (f.mode == FactorMode::svd_both) {
        if (f.rank_qk.at(i) > 0) {
          hc.proj_q = matmul(xa, f.u_qk_head(i));
          hc.left = matmul(hc.proj_q, f.mix_qk_head(i));
          hc.right = matmul(xa, transpose(f.v_qk_head(i)));
          logits = matmul(hc.left, transpose(hc.right));
        }
      } else {
        hc.proj_q = matmul(xb, f.q_q.slab(i));
        hc.proj_k = matmul(xb, f.q_k.slab(i));
        hc.left = matmul(hc.proj_q, f.r_q.slab(i));
        hc.right = matmul(hc.proj_k, f.r_k.slab(i));
        if (rope.enabled) {
          rope_rotate_rows(hc.left, rope.base);
          rope_rotate_rows(hc.right, rope.base);
        }
        logits = matmul(hc.left, transpose(hc.right));
      }
      for (auto& v : logits.data()) v *= scale;
      hc.attn = softmax_rows(logits, mask);
      hc.values = matmul(xb, f.u_vo_head(i));
      hc.mixed = matmul(hc.values, f.mix_vo_head(i));
      yb = add(yb, matmul(matmul(hc.attn, hc.mixed), f.v_vo_head(i)));
    }
    if (f.folded_b_o) {
      for (std::size_t t = 0; t < n; ++t) simd::axpy(1.0, f.folded_b_o->data(), yb.row(t));
    }
    std::copy(yb.values().begin(), yb.values().end(), out.output.data().begin() + bi * n * D);
  }
  return out;
}

Gradients factored_backward(const ForwardCache& cache, const CloverFactors& f, const Tensor& upstream,
                            TrainableSelection sel) {
  if (upstream.shape() != Shape{cache.batch, cache.seq_len, f.model_dim}) {
    throw ShapeError("upstream gradient has shape " + shape_to_string(upstream.shape()) + ", expected " +
                     shape_to_string({cache.batch, cache.seq_len, f.model_dim}));
  }
  if (cache.heads.size() != cache.batch) throw std::invalid_argument("factored_backward: forward cache is missing");
  const std::size_t h = f.num_heads;
  const bool svd = f.mode == FactorMode::svd_both;
  Gradients g;
  if (sel.vo) {
    if (!f.trainable_s_vo) throw std::invalid_argument("factored_backward: S_vo is not trainable");
    g.s_vo = Tensor(f.trainable_s_vo->shape());
  }
  if (sel.qk) {
    if (svd) {
      if (!f.trainable_s_qk) throw std::invalid_argument("factored_backward: S_qk is not trainable");
      g.s_qk = Tensor(f.trainable_s_qk->shape());
    } else {
      g.r_q = Tensor(f.r_q.shape());
      g.r_k = Tensor(f.r_k.shape());
    }
  }
  const double scale = inv_sqrt_dim(f.head_dim);

  for (std::size_t bi = 0; bi < cache.batch; ++bi) {
    const Tensor grad_y = sequence_block(upstream, bi);
    for (std::size_t i = 0; i < h; ++i) {
      const ForwardCache::Head& hc = cache.heads.at(bi).at(i);
      if (!hc.active) continue;
      const Tensor d_head = matmul(grad_y, transpose(f.v_vo_head(i)));  // d(attn·mixed)
      if (sel.vo) {
        const Tensor d_mixed = matmul(transpose(hc.attn), d_head);
        add_head_block(*g.s_vo, i, matmul(transpose(hc.values), d_mixed));
      }
      if (!sel.qk) continue;
      if (svd && f.rank_qk.at(i) == 0) continue;

      // Softmax Jacobian: dL = A ⊙ (dA - rowsum(dA ⊙ A)); masked entries have A = 0.
      Tensor d_logits = matmul(d_head, transpose(hc.mixed));
      for (std::size_t t = 0; t < d_logits.rows(); ++t) {
        double inner = 0.0;
        for (std::size_t k = 0; k < d_logits.cols(); ++k) inner += d_logits(t, k) * hc.attn(t, k);
        for (std::size_t k = 0; k < d_logits.cols(); ++k) {
          d_logits(t, k) = hc.attn(t, k) * (d_logits(t, k) - inner) * scale;
        }
      }

      if (svd) {
        const Tensor d_left = matmul(d_logits, hc.right);
        add_head_block(*g.s_qk, i, matmul(transpose(hc.proj_q), d_left));
      } else {
        Tensor d_q = matmul(d_logits, hc.right);
        Tensor d_k = matmul(transpose(d_logits), hc.left);
        if (cache.rope.enabled) {
          rope_rotate_rows(d_q, cache.rope.base, -1.0);
          rope_rotate_rows(d_k, cache.rope.base, -1.0);
        }
        add_head_block(*g.r_q, i, matmul(transpose(hc.proj_q), d_q), true);
        add_head_block(*g.r_k, i, matmul(transpose(hc.proj_k), d_k), true);
      }
    }
  }
  return g;
}

std::string to_string(ToyKind kind) { return kind == ToyKind::associative_recall ? "recall" : "regress"; }

ToyKind parse_toy_kind(const std::string& text) {
  if (text == "recall" || text == "associative-recall") return ToyKind::associative_recall;
  if (text == "regress" || text == "sequence-regression") return ToyKind::sequence_regression;
  throw std::invalid_argument("unknown toy task '" + text + "' (expected recall or regress)");
}

namespace {

void check_toy_dims(const ToyDims& dims) {
  if (dims.batch == 0 || dims.seq_len == 0 || dims.model_dim == 0) throw std::invalid_argument("toy dims must be positive");
  if (dims.batch > 8 || dims.seq_len > 32 || dims.model_dim > 32) {
    throw std::invalid_argument("toy tasks are limited to b <= 8, n <= 32, D <= 32");
  }
}

Tensor seeded_inputs(std::uint64_t seed, const ToyDims& dims) {
  Tensor x({dims.batch, dims.seq_len, dims.model_dim});
  for (std::size_t e = 0; e < dims.batch; ++e) {
    Rng rng(derive_seed(seed, e));
    for (std::size_t t = 0; t < dims.seq_len; ++t)
      for (std::size_t c = 0; c < dims.model_dim; ++c) x(e, t, c) = rng.normal();
  }
  return x;
}

}  // namespace

ToyTask make_regression_task(std::uint64_t seed, ToyDims dims, const CloverFactors& teacher, const MaskSpec& mask,
                             const RopeSpec& rope) {
  check_toy_dims(dims);
  if (dims.model_dim != teacher.model_dim) throw ShapeError("toy task model_dim does not match the teacher");
  ToyTask task;
  task.kind = ToyKind::sequence_regression;
  task.seed = seed;
  task.dims = dims;
  task.mask = mask;
  task.rope = rope;
  task.inputs = seeded_inputs(seed, dims);
  task.targets = mha_forward_factored(task.inputs, teacher, mask, rope);
  return task;
}

ToyTask make_recall_task(std::uint64_t seed, ToyDims dims, std::size_t vocab) {
  check_toy_dims(dims);
  if (dims.seq_len < 2) throw std::invalid_argument("recall needs at least one key/value pair and a query");
  const std::size_t pairs = dims.seq_len - 1;
  if (vocab == 0) vocab = std::max<std::size_t>(pairs, 4);
  if (vocab < pairs) throw std::invalid_argument("recall vocabulary must cover the distinct keys of a sequence");
  const std::size_t D = dims.model_dim;

  ToyTask task;
  task.kind = ToyKind::associative_recall;
  task.seed = seed;
  task.dims = dims;
  task.vocab = vocab;
  Rng table_rng(derive_seed(seed, 0xE3B0C442ULL));
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(D));
  const Tensor key_emb = table_rng.normal_tensor({vocab, D}, 1.0);
  const Tensor val_emb = table_rng.normal_tensor({vocab, D}, 1.0);
  task.readout_init = table_rng.normal_tensor({D, vocab}, emb_scale);

  task.inputs = Tensor({dims.batch, dims.seq_len, D});
  task.labels.resize(dims.batch);
  for (std::size_t e = 0; e < dims.batch; ++e) {
    Rng rng(derive_seed(seed, e));
    std::vector<std::size_t> keys(vocab);
    std::iota(keys.begin(), keys.end(), 0);
    for (std::size_t k = vocab; k > 1; --k) std::swap(keys[k - 1], keys[rng.below(k)]);
    std::vector<std::size_t> values(pairs);
    for (auto& v : values) v = rng.below(vocab);
    for (std::size_t t = 0; t < pairs; ++t)
      for (std::size_t c = 0; c < D; ++c) task.inputs(e, t, c) = key_emb(keys[t], c) + val_emb(values[t], c);
    const std::size_t probe = rng.below(pairs);
    for (std::size_t c = 0; c < D; ++c) task.inputs(e, pairs, c) = key_emb(keys[probe], c);
    task.labels[e] = values[probe];
  }
  return task;
}

CloverFactors perturbed_teacher(const CloverFactors& student, std::uint64_t seed, double magnitude,
                                TrainableSelection sel) {
  CloverFactors t = with_trainable_s(student, {true, true});
  Rng rng(seed);
  auto perturb = [&](Tensor& stack, const std::vector<std::size_t>& ranks, bool upper) {
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      const std::size_t r = ranks[i];
      if (r == 0) continue;
      double norm = 0.0;
      for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = 0; b < r; ++b) norm += stack(i, a, b) * stack(i, a, b);
      const double unit = magnitude * std::sqrt(norm) / static_cast<double>(r);
      for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = upper ? a : 0; b < r; ++b) stack(i, a, b) += unit * rng.normal();
    }
  };
  if (sel.qk) {
    if (t.mode == FactorMode::svd_both) {
      perturb(*t.trainable_s_qk, t.rank_qk, false);
    } else {
      const std::vector<std::size_t> full(t.num_heads, t.head_dim);
      perturb(t.r_q, full, true);
      perturb(t.r_k, full, true);
    }
  }
  if (sel.vo) perturb(*t.trainable_s_vo, t.rank_vo, false);
  return t;
}

ToyTask make_toy_task(ToyKind kind, std::uint64_t seed, ToyDims dims, const CloverFactors& student,
                      const MaskSpec& mask, const RopeSpec& rope) {
  if (kind == ToyKind::associative_recall) {
    ToyTask task = make_recall_task(seed, dims);
    task.mask = mask;
    task.rope = rope;
    return task;
  }
  return make_regression_task(seed, dims, perturbed_teacher(student, derive_seed(seed, 0x7EAC4E5ULL), 0.5), mask, rope);
}

LossEval evaluate_task(const CloverFactors& f, const std::optional<Tensor>& readout, const ToyTask& task,
                       TrainableSelection sel, bool with_grad) {
  CachedForward fwd = factored_forward_cached(task.inputs, f, task.mask, task.rope);
  const Tensor& y = fwd.output;
  LossEval out;
  Tensor upstream(y.shape());

  if (task.kind == ToyKind::sequence_regression) {
    if (task.targets.shape() != y.shape()) throw ShapeError("regression targets do not match model output");
    const double count = static_cast<double>(y.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double diff = y[k] - task.targets[k];
      sum += diff * diff;
      upstream[k] = 2.0 * diff / count;
    }
    out.loss = sum / count;
  } else {
    if (!readout) throw std::invalid_argument("recall task needs readout weights");
    const Tensor& w = *readout;
    const std::size_t b = y.dim(0), n = y.dim(1), D = y.dim(2), vocab = task.vocab;
    if (w.shape() != Shape{D, vocab}) throw ShapeError("readout must be [D, vocab]");
    Tensor last({b, D});
    for (std::size_t e = 0; e < b; ++e)
      for (std::size_t c = 0; c < D; ++c) last(e, c) = y(e, n - 1, c);
    Tensor logits = matmul(last, w);
    Tensor d_logits({b, vocab});
    double total = 0.0;
    for (std::size_t e = 0; e < b; ++e) {
      double peak = logits(e, 0);
      for (std::size_t v = 1; v < vocab; ++v) peak = std::max(peak, logits(e, v));
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(logits(e, v) - peak);
      const double log_z = peak + std::log(z);
      total += log_z - logits(e, task.labels[e]);
      for (std::size_t v = 0; v < vocab; ++v) {
        const double p = std::exp(logits(e, v) - log_z);
        d_logits(e, v) = (p - (v == task.labels[e] ? 1.0 : 0.0)) / static_cast<double>(b);
      }
    }
    out.loss = total / static_cast<double>(b);
    if (with_grad) {
      out.grads.readout = matmul(transpose(last), d_logits);
      const Tensor d_last = matmul(d_logits, transpose(w));
      for (std::size_t e = 0; e < b; ++e)
        for (std::size_t c = 0; c < D; ++c) upstream(e, n - 1, c) = d_last(e, c);
    }
  }
  if (with_grad) {
    Gradients g = factored_backward(fwd.cache, f, upstream, sel);
    g.readout = std::move(out.grads.readout);
    out.grads = std::move(g);
  }
  return out;
}

std::uint64_t frozen_checksum(const CloverFactors& f) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  auto fold = [&h](const Tensor& t) {
    if (t.empty()) return;
    h ^= checksum(t) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  };
  for (const Tensor* t : {&f.u_qk, &f.s_qk, &f.v_qk, &f.q_q, &f.q_k, &f.u_vo, &f.s_vo, &f.v_vo}) fold(*t);
  if (f.folded_b_o) fold(*f.folded_b_o);
  return h;
}

namespace {

struct ParamRef {
  std::string name;
  Tensor* value;
  const Tensor* grad;
};

std::vector<ParamRef> trainable_refs(CloverFactors& f, std::optional<Tensor>& readout, Gradients& g) {
  std::vector<ParamRef> refs;
  if (g.s_qk) refs.push_back({"s_qk", &*f.trainable_s_qk, &*g.s_qk});
  if (g.r_q) refs.push_back({"r_q", &f.r_q, &*g.r_q});
  if (g.r_k) refs.push_back({"r_k", &f.r_k, &*g.r_k});
  if (g.s_vo) refs.push_back({"s_vo", &*f.trainable_s_vo, &*g.s_vo});
  if (g.readout) refs.push_back({"readout", &*readout, &*g.readout});
  return refs;
}

double grad_norm(const std::vector<ParamRef>& refs) {
  double sum = 0.0;
  for (const auto& r : refs) sum += simd::dot(r.grad->data(), r.grad->data());
  return std::sqrt(sum);
}

Tensor& moment(std::vector<std::pair<std::string, Tensor>>& moments, const std::string& key, const Shape& shape) {
  for (auto& [k, t] : moments)
    if (k == key) return t;
  moments.emplace_back(key, Tensor(shape));
  return moments.back().second;
}

}  // namespace

TrainState train_toy(const CloverFactors& f, const ToyTask& task, const TrainConfig& config) {
  if (config.steps == 0) throw std::invalid_argument("train_toy needs at least one step");
  if (!(config.lr >= 0.0)) throw std::invalid_argument("learning rate must be nonnegative");
  TrainState state;
  state.factors = with_trainable_s(f, config.trainable);
  if (task.kind == ToyKind::associative_recall) state.readout = task.readout_init;
  state.frozen_checksum = frozen_checksum(state.factors);

  for (std::size_t step = 0; step < config.steps; ++step) {
    LossEval eval = evaluate_task(state.factors, state.readout, task, config.trainable, true);
    if (!std::isfinite(eval.loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (loss not finite)", step);
    }
    std::vector<ParamRef> refs = trainable_refs(state.factors, state.readout, eval.grads);
    state.history.push_back({step, eval.loss, grad_norm(refs)});

    double lr = config.lr;
    if (config.linear_decay) lr *= 1.0 - static_cast<double>(step) / static_cast<double>(config.steps);
    const double t = static_cast<double>(step + 1);
    for (const ParamRef& ref : refs) {
      auto value = ref.value->data();
      const auto grad = ref.grad->data();
      if (config.optimizer == Optimizer::sgd) {
        simd::axpy(-lr, grad, value);
        continue;
      }
      Tensor& m = moment(state.moments, "m_" + ref.name, ref.value->shape());
      Tensor& v = moment(state.moments, "v_" + ref.name, ref.value->shape());
      const double c1 = 1.0 - std::pow(config.beta1, t);
      const double c2 = 1.0 - std::pow(config.beta2, t);
      for (std::size_t k = 0; k < value.size(); ++k) {
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * grad[k];
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * grad[k] * grad[k];
        value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.epsilon);
      }
    }
    ++state.step;
    if (frozen_checksum(state.factors) != state.frozen_checksum) {
      throw std::logic_error("frozen bases changed during training at step " + std::to_string(step));
    }
  }
  state.final_loss = evaluate_task(state.factors, state.readout, task, config.trainable, false).loss;
  if (!std::isfinite(state.final_loss)) {
    throw TrainingDiverged("training diverged after the last step (loss not finite)", config.steps);
  }
  return state;
}

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& history) {
  os << "step,loss,grad_norm\n";
  for (const auto& r : history) os << r.step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm) << '\n';
}

namespace {

double gradient_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

void check_epsilon(double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw std::invalid_argument("finite-difference epsilon must lie in [1e-7, 1e-3]");
  }
}

std::vector<std::size_t> strided(std::vector<std::size_t> eligible, std::size_t max_coords) {
  if (max_coords == 0 || eligible.size() <= max_coords) return eligible;
  std::vector<std::size_t> picked(max_coords);
  for (std::size_t k = 0; k < max_coords; ++k) picked[k] = eligible[k * eligible.size() / max_coords];
  return picked;
}

GradCheck check_coords(std::span<double> params, std::span<const double> analytic, const std::vector<std::size_t>& coords,
                       const std::function<double()>& loss, double epsilon) {
  GradCheck out;
  for (std::size_t k : coords) {
    const double saved = params[k];
    params[k] = saved + epsilon;
    const double up = loss();
    params[k] = saved - epsilon;
    const double down = loss();
    params[k] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    out.max_error = std::max(out.max_error, gradient_error(analytic[k], numeric));
    ++out.coords_checked;
  }
  return out;
}

}  // namespace

GradCheck finite_diff_check(std::span<double> params, std::span<const double> analytic,
                            const std::function<double()>& loss, double epsilon, std::size_t max_coords) {
  check_epsilon(epsilon);
  if (params.size() != analytic.size()) throw ShapeError("finite_diff_check: params/gradient length mismatch");
  std::vector<std::size_t> all(params.size());
  std::iota(all.begin(), all.end(), 0);
  return check_coords(params, analytic, strided(std::move(all), max_coords), loss, epsilon);
}

GradCheck finite_diff_check(const CloverFactors& f, const std::optional<Tensor>& readout, const ToyTask& task,
                            TrainableSelection sel, double epsilon, std::size_t max_coords) {
  check_epsilon(epsilon);
  CloverFactors work = with_trainable_s(f, sel);
  std::optional<Tensor> head = readout;
  if (task.kind == ToyKind::associative_recall && !head) head = task.readout_init;
  LossEval base = evaluate_task(work, head, task, sel, true);
  std::vector<ParamRef> refs = trainable_refs(work, head, base.grads);

  // Eligible coordinates: retained-rank blocks only, upper triangle for R.
  std::vector<std::pair<std::size_t, std::size_t>> eligible;  // (ref index, element)
  for (std::size_t r = 0; r < refs.size(); ++r) {
    const Tensor& t = *refs[r].value;
    if (refs[r].name == "readout") {
      for (std::size_t k = 0; k < t.size(); ++k) eligible.emplace_back(r, k);
      continue;
    }
    const bool upper = refs[r].name == "r_q" || refs[r].name == "r_k";
    const std::vector<std::size_t>* ranks = refs[r].name == "s_qk" ? &work.rank_qk
                                            : refs[r].name == "s_vo" ? &work.rank_vo
                                                                     : nullptr;
    const std::size_t rows = t.dim(1), cols = t.dim(2);
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      const std::size_t lim = ranks ? (*ranks)[i] : rows;
      for (std::size_t a = 0; a < lim; ++a)
        for (std::size_t b = upper ? a : 0; b < lim; ++b) eligible.emplace_back(r, (i * rows + a) * cols + b);
    }
  }
  std::vector<std::size_t> index(eligible.size());
  std::iota(index.begin(), index.end(), 0);
  index = strided(std::move(index), max_coords);

  auto loss = [&] { return evaluate_task(work, head, task, sel, false).loss; };
  GradCheck out;
  for (std::size_t k : index) {
    const auto [r, e] = eligible[k];
    const GradCheck one = check_coords(refs[r].value->data(), refs[r].grad->data(), {e}, loss, epsilon);
    out.max_error = std::max(out.max_error, one.max_error);
    out.coords_checked += one.coords_checked;
  }
  return out;
}

}  // namespace clover
