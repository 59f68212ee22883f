#pragma once

// Constrained fine-tuning of factored attention: orthonormal bases stay
// frozen, only the head-wise mixing matrices S (and R_q/R_k in qr mode) move.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clover/attention.hpp"

namespace clover {

struct TrainableSelection {
  bool qk = true;  // S_qk (svd) or R_q/R_k (qr)
  bool vo = true;  // S_vo
};

// Attaches full head-wise S matrices initialised to diag(s), so the model
// reproduces the decomposed function exactly before any update.
CloverFactors with_trainable_s(const CloverFactors& f, TrainableSelection sel = {});

struct Gradients {
  std::optional<Tensor> s_qk;  // [h, r, r]
  std::optional<Tensor> s_vo;  // [h, r, r]
  std::optional<Tensor> r_q;   // [h, d, d], zero below the diagonal
  std::optional<Tensor> r_k;
  std::optional<Tensor> readout;  // [D, vocab]
};

// Intermediates of one factored forward, consumed by factored_backward.
struct ForwardCache {
  struct Head {
    Tensor left;    // svd: x'·u_qk·S  | qr: rope(x·q_q·r_q)
    Tensor right;   // svd: x'·v_qk^T  | qr: rope(x·q_k·r_k)
    Tensor proj_q;  // svd: x'·u_qk    | qr: x·q_q
    Tensor proj_k;  // qr: x·q_k
    Tensor attn;    // softmax output [n, n]
    Tensor values;  // x·u_vo [n, r_vo]
    Tensor mixed;   // values·S_vo
    bool active = true;
  };
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  MaskSpec mask;
  RopeSpec rope;
  std::vector<std::vector<Head>> heads;  // [batch][head]
};

struct CachedForward {
  Tensor output;  // [b, n, D]
  ForwardCache cache;
};

CachedForward factored_forward_cached(const Tensor& x, const CloverFactors& f, const MaskSpec& mask = {},
                                      const RopeSpec& rope = {});

// Analytic gradients of <upstream, output> with respect to the trainable
// parameters selected in `sel`. Frozen bases receive no gradient.
Gradients factored_backward(const ForwardCache& cache, const CloverFactors& f, const Tensor& upstream,
                            TrainableSelection sel = {});

enum class ToyKind { associative_recall, sequence_regression };

std::string to_string(ToyKind kind);
ToyKind parse_toy_kind(const std::string& text);

struct ToyDims {
  std::size_t batch = 4;
  std::size_t seq_len = 8;
  std::size_t model_dim = 16;
};

struct ToyTask {
  ToyKind kind = ToyKind::sequence_regression;
  std::uint64_t seed = 0;
  ToyDims dims;
  MaskSpec mask;
  RopeSpec rope;
  Tensor inputs;  // [b, n, D]
  // sequence_regression
  Tensor targets;  // [b, n, D]
  // associative_recall: readout of the final position into `vocab` classes
  std::size_t vocab = 0;
  std::vector<std::size_t> labels;
  Tensor readout_init;  // [D, vocab]
};

// Teacher-student regression: targets are the factored forward of `teacher`.
ToyTask make_regression_task(std::uint64_t seed, ToyDims dims, const CloverFactors& teacher, const MaskSpec& mask = {},
                             const RopeSpec& rope = {});

// Key/value sequences; the last token repeats one key and the label is its value.
ToyTask make_recall_task(std::uint64_t seed, ToyDims dims, std::size_t vocab = 0);

// Student's bases with trainable parameters perturbed by relative noise of
// the given magnitude on the selected sides.
CloverFactors perturbed_teacher(const CloverFactors& student, std::uint64_t seed, double magnitude,
                                TrainableSelection sel = {});

// Regression uses perturbed_teacher(student, seed, 0.5); recall ignores `student`.
ToyTask make_toy_task(ToyKind kind, std::uint64_t seed, ToyDims dims, const CloverFactors& student,
                      const MaskSpec& mask = {}, const RopeSpec& rope = {});

struct LossEval {
  double loss = 0.0;
  Gradients grads;
};

// Loss on the task; gradients filled when `with_grad`. `readout` is used by recall only.
LossEval evaluate_task(const CloverFactors& f, const std::optional<Tensor>& readout, const ToyTask& task,
                       TrainableSelection sel, bool with_grad);

enum class Optimizer { sgd, adam };

struct TrainConfig {
  std::size_t steps = 500;
  double lr = 1e-2;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool linear_decay = false;  // lr * (1 - step/steps)
  TrainableSelection trainable;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainState {
  CloverFactors factors;
  std::optional<Tensor> readout;
  // Adam moments keyed like the archive: m_s_qk, v_s_qk, m_r_q, ...
  std::vector<std::pair<std::string, Tensor>> moments;
  std::size_t step = 0;
  std::vector<LossRecord> history;  // loss before each update
  double final_loss = 0.0;
  std::uint64_t frozen_checksum = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Checksum over every frozen tensor of the factors.
std::uint64_t frozen_checksum(const CloverFactors& f);

TrainState train_toy(const CloverFactors& f, const ToyTask& task, const TrainConfig& config);

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& history);

// Central differences on up to `max_coords` coordinates of `params`
// (evenly strided when there are more). Returns the worst
// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor maps
// an absolute tolerance onto the relative one (1e-8 / 1e-6 = 1e-2).
struct GradCheck {
  double max_error = 0.0;
  std::size_t coords_checked = 0;
};

inline constexpr double kGradCheckFloor = 1e-2;

GradCheck finite_diff_check(std::span<double> params, std::span<const double> analytic,
                            const std::function<double()>& loss, double epsilon, std::size_t max_coords = 0);

// Checks every trainable tensor of `f` (and the readout for recall tasks).
GradCheck finite_diff_check(const CloverFactors& f, const std::optional<Tensor>& readout, const ToyTask& task,
                            TrainableSelection sel, double epsilon, std::size_t max_coords = 0);

}  // namespace clover
