// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "clover/archive.hpp"
#include "clover/finetune.hpp"
#include "clover/linalg.hpp"
#include "clover/model_io.hpp"
#include "clover/rng.hpp"
#include "clover/simd/kernels.hpp"
#include "clover/synthetic.hpp"
#include "clover/transform.hpp"

using namespace clover;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

AttentionWeights weights(std::size_t D, std::size_t h, std::size_t d, std::uint64_t seed, bool bias = false,
                         std::size_t heads_rank = 0) {
  SyntheticSpec spec;
  spec.model_dim = D;
  spec.num_heads = h;
  spec.head_dim = d;
  spec.heads_rank = heads_rank;
  spec.bias = bias;
  spec.seed = seed;
  return synthetic_weights(spec);
}

double mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
  return acc / static_cast<double>(a.size());
}

Outcome lossless_orthogonalization() {
  std::size_t configs = 0;
  double worst = 0.0;
  double worst_merge = 0.0;
  std::uint64_t seed = 100;
  for (std::size_t D : {8, 16, 32})
    for (std::size_t h : {1, 2, 4})
      for (std::size_t d : {2, 4, 8})
        for (const char* mask_text : {"none", "causal", "window:3"})
          for (bool bias : {false, true}) {
            const auto w = weights(D, h, d, ++seed, bias);
            const MaskSpec mask = parse_mask(mask_text);
            const Tensor x = random_input(2, 6, D, derive_seed(seed, 1));
            const Tensor plain = mha_forward(x, w, mask);
            const auto f = decompose_factors(w);
            worst = std::max(worst, max_abs_diff(plain, mha_forward_factored(x, f, mask)));
            worst_merge = std::max(worst_merge, max_abs_diff(plain, mha_forward(x, merge_back(f), mask)));
            if (!bias) {
              const auto q = decompose_factors(w, FactorMode::qr_qk_svd_vo);
              worst = std::max(worst, max_abs_diff(plain, mha_forward_factored(x, q, mask)));
              const RopeSpec rope{true, 10000.0};
              worst = std::max(worst, max_abs_diff(mha_forward(x, w, mask, rope), mha_forward_factored(x, q, mask, rope)));
            }
            ++configs;
          }
  return {configs >= 54 && worst <= 1e-10 && worst_merge <= 1e-10,
          std::to_string(configs) + " configs, factored max deviation " + sci(worst) + ", merged " + sci(worst_merge) +
              " (limit 1e-10)"};
}

Outcome rank_bound() {
  Rng rng(2);
  std::size_t passed = 0;
  std::size_t worst_excess = 0;
  constexpr int kTrials = 100;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t D = 4 + rng.below(29);
    const std::size_t h = 1 + rng.below(4);
    const std::size_t d = 1 + rng.below(D - 1);
    const auto w = weights(D, h, d, derive_seed(7, trial));
    bool ok = true;
    for (std::size_t i = 0; i < h; ++i) {
      for (const Tensor& formed : {matmul(w.q_slab(i), transpose(w.k_slab(i))), matmul(w.v_slab(i), w.o_slab(i))}) {
        const auto svd = jacobi_svd(formed);
        const auto above = static_cast<std::size_t>(
            std::count_if(svd.s.values().begin(), svd.s.values().end(), [](double s) { return s > 1e-12; }));
        if (above > d) {
          ok = false;
          worst_excess = std::max(worst_excess, above - d);
        }
      }
    }
    passed += ok;
  }
  return {passed == kTrials, std::to_string(passed) + "/" + std::to_string(kTrials) +
                                 " trials with at most d singular values above 1e-12 (D <= 32)" +
                                 (worst_excess ? ", worst excess " + std::to_string(worst_excess) : "")};
}

Outcome training_free_pruning() {
  double spectral_worst = 0.0;
  double vanilla_best = INFINITY;
  bool ranks_halved = true;
  std::size_t cases = 0;
  for (std::size_t D : {16, 32})
    for (std::size_t h : {2, 4})
      for (std::size_t d : {4, 8}) {
        const std::uint64_t seed = 300 + cases;
        const auto w = weights(D, h, d, seed, false, d / 2);
        const Tensor x = random_input(2, 8, D, derive_seed(seed, 1));
        const Tensor plain = mha_forward(x, w, MaskSpec::causal());
        const auto pruned = prune_factors(decompose_factors(w), 1e-10, 1e-10);
        for (std::size_t i = 0; i < h; ++i) {
          ranks_halved &= pruned.stats.qk.rank_after[i] == d / 2 && pruned.stats.vo.rank_after[i] == d / 2;
        }
        spectral_worst = std::max(spectral_worst, max_abs_diff(plain, mha_forward_factored(x, pruned.factors, MaskSpec::causal())));
        spectral_worst = std::max(spectral_worst, max_abs_diff(plain, mha_forward(x, merge_back(pruned.factors), MaskSpec::causal())));
        vanilla_best = std::min(vanilla_best, max_abs_diff(plain, mha_forward(x, vanilla_prune(w, 0.5), MaskSpec::causal())));
        ++cases;
      }
  return {ranks_halved && spectral_worst <= 1e-10 && vanilla_best >= 1e-2,
          std::to_string(cases) + " rank-d/2 cases at 50% kept" + (ranks_halved ? "" : " (rank mismatch)") +
              ", spectral max deviation " + sci(spectral_worst) + " (<= 1e-10), vanilla min deviation " +
              sci(vanilla_best) + " (>= 1e-2)"};
}

Outcome product_svd_oracle() {
  Rng rng(4);
  double worst = 0.0;
  constexpr int kTrials = 100;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t d = 1 + rng.below(16);
    const std::size_t D = d + rng.below(65 - d);
    const std::size_t D2 = d + rng.below(65 - d);
    const Tensor a = rng.normal_tensor({D, d});
    const Tensor b = rng.normal_tensor({d, D2});
    const auto fast = product_svd(a, b);
    const auto ref = jacobi_svd(matmul(a, b));
    for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::abs(fast.s[k] - ref.s[k]));
  }
  return {worst <= 1e-10, std::to_string(kTrials) + " instances (D <= 64, d <= 16), max singular value error " +
                              sci(worst) + " (limit 1e-10)"};
}

Outcome gradient_correctness() {
  struct Case {
    const char* name;
    FactorMode mode;
    bool bias;
    bool rope;
  };
  const Case cases[] = {{"svd", FactorMode::svd_both, true, false},
                        {"qr", FactorMode::qr_qk_svd_vo, false, false},
                        {"qr+rope", FactorMode::qr_qk_svd_vo, false, true}};
  bool ok = true;
  std::ostringstream detail;
  std::uint64_t seed = 500;
  for (const Case& c : cases) {
    const auto f = decompose_factors(weights(16, 4, 8, ++seed, c.bias), c.mode);
    const auto task = make_toy_task(ToyKind::sequence_regression, ++seed, {3, 6, 16}, f, MaskSpec::causal(),
                                    {c.rope, 10000.0});
    const auto r = finite_diff_check(f, std::nullopt, task, {}, 1e-5);
    ok &= r.coords_checked >= 200 && r.max_error <= 1e-6;
    detail << c.name << " " << r.coords_checked << " coords err " << sci(r.max_error) << "; ";
  }
  const auto f = decompose_factors(weights(16, 4, 8, ++seed));
  const auto recall = make_toy_task(ToyKind::associative_recall, ++seed, {3, 6, 16}, f);
  const auto r = finite_diff_check(f, std::nullopt, recall, {}, 1e-5);
  ok &= r.coords_checked >= 200 && r.max_error <= 1e-6;
  detail << "recall " << r.coords_checked << " coords err " << sci(r.max_error) << " (limit 1e-6 relative)";
  return {ok, detail.str()};
}

Outcome stability_at_init() {
  double worst = 0.0;
  std::size_t batches = 0;
  for (std::uint64_t seed = 600; seed < 620; ++seed) {
    const bool qr = seed % 2 == 1;
    const bool bias = !qr && seed % 4 == 0;
    const auto w = weights(16, 2, 4, seed, bias);
    const auto f = decompose_factors(w, qr ? FactorMode::qr_qk_svd_vo : FactorMode::svd_both);
    const MaskSpec mask = seed % 3 == 0 ? MaskSpec::causal() : MaskSpec::none();
    const RopeSpec rope{qr && seed % 4 == 1, 10000.0};
    // The teacher is irrelevant here; only the inputs and targets matter.
    const auto task = make_toy_task(ToyKind::sequence_regression, seed, {4, 8, 16}, f, mask, rope);
    const double plain = mse(mha_forward(task.inputs, w, mask, rope), task.targets);
    const double factored = evaluate_task(with_trainable_s(f), std::nullopt, task, {}, false).loss;
    worst = std::max(worst, std::abs(plain - factored));
    ++batches;
  }
  return {worst <= 1e-10, std::to_string(batches) + " batches (svd/qr, bias, causal, rope), max |loss difference| " +
                              sci(worst) + " (limit 1e-10)"};
}

Outcome teacher_student() {
  struct Case {
    const char* name;
    FactorMode mode;
    bool rope;
  };
  bool ok = true;
  std::ostringstream detail;
  for (const Case& c : {Case{"svd", FactorMode::svd_both, false}, Case{"qr+rope", FactorMode::qr_qk_svd_vo, true}}) {
    const auto f = decompose_factors(weights(16, 2, 4, 700), c.mode);
    const RopeSpec rope{c.rope, 10000.0};
    const auto task = make_toy_task(ToyKind::sequence_regression, 701, {4, 8, 16}, f, MaskSpec::causal(), rope);
    TrainConfig config;
    config.steps = 2000;
    config.lr = 1e-2;
    const auto state = train_toy(f, task, config);
    const double initial = state.history.front().loss;
    std::size_t reached = 0;
    for (const auto& rec : state.history) {
      if (rec.loss < 1e-3 * initial) {
        reached = rec.step;
        break;
      }
    }
    const bool converged = state.final_loss < 1e-3 * initial;
    const bool frozen = frozen_checksum(state.factors) == frozen_checksum(f);
    const Tensor held_out = random_input(4, 8, 16, 702);
    const double merge_dev = max_abs_diff(mha_forward(held_out, merge_back(state.factors), MaskSpec::causal(), rope),
                                          mha_forward_factored(held_out, state.factors, MaskSpec::causal(), rope));
    ok &= converged && frozen && merge_dev <= 1e-10;
    detail << c.name << ": loss " << sci(initial) << " -> " << sci(state.final_loss) << " (ratio "
           << sci(state.final_loss / initial) << ", below 1e-3 by step "
           << (converged ? std::to_string(reached) : std::string("never")) << "), checksum "
           << (frozen ? "unchanged" : "CHANGED") << ", merge deviation " << sci(merge_dev) << "; ";
  }
  std::string text = detail.str();
  text.resize(text.size() - 2);
  return {ok, text};
}

Outcome parameter_accounting() {
  ParamQuery base;
  base.model_dim = 4096;
  base.num_heads = 32;
  base.head_dim = 128;
  const auto lora = count_params(parse_param_method("lora:64", base));
  const auto clover_qr = count_params(parse_param_method("clover", base));
  std::cout << "    lora:64   trainable " << lora.trainable << " = " << lora.formula << "\n";
  std::cout << "    clover-qr trainable " << clover_qr.trainable << " = " << clover_qr.formula << "\n";
  if (clover_qr.trainable_alt) {
    std::cout << "    clover-qr alternate reading " << *clover_qr.trainable_alt << " = " << clover_qr.formula_alt << "\n";
  }
  const bool ok = lora.trainable == 1572864 && clover_qr.trainable == 1052672;
  return {ok, "LoRA(64) on q,k,v = " + std::to_string(lora.trainable) + " (expected 1572864), clover qr = " +
                  std::to_string(clover_qr.trainable) + " (expected 1052672); the two differ by " +
                  std::to_string(lora.trainable - clover_qr.trainable)};
}

std::string set_header(const std::string& bytes, const std::string& header) {
  std::uint64_t old_len = 0;
  for (int i = 0; i < 8; ++i) old_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  std::string out(8, '\0');
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((header.size() >> (8 * i)) & 0xFF);
  out += header;
  out.resize((out.size() + 63) / 64 * 64, '\0');
  return out + bytes.substr((8 + old_len + 63) / 64 * 64);
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  if (pos != std::string::npos) s.replace(pos, from.size(), to);
  return s;
}

Outcome archive_round_trip() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "clover_acceptance";
  fs::create_directories(dir);
  const fs::path file = dir / "trial.clv";

  Rng rng(9);
  std::size_t identical = 0;
  constexpr int kTrials = 1000;
  for (int trial = 0; trial < kTrials; ++trial) {
    TensorArchive a;
    const std::size_t count = 1 + rng.below(4);
    for (std::size_t k = 0; k < count; ++k) {
      Shape shape(1 + rng.below(3));
      for (auto& e : shape) e = 1 + rng.below(6);
      Tensor t(shape);
      // Random finite bit patterns, including subnormals and signed zeros.
      for (double& v : t.data()) v = std::bit_cast<double>(rng.next_u64() & 0xBFEFFFFFFFFFFFFFULL);
      a.add("t" + std::to_string(k), std::move(t));
    }
    a.meta["trial"] = trial;
    write_archive(file, a);
    const TensorArchive r = read_archive(file);
    bool same = r.tensors.size() == count;
    for (std::size_t k = 0; same && k < count; ++k) {
      const Tensor& x = a.get("t" + std::to_string(k));
      const Tensor& y = r.get("t" + std::to_string(k));
      same = x.shape() == y.shape() && std::memcmp(x.values().data(), y.values().data(), 8 * x.size()) == 0;
    }
    identical += same && encode_archive(r) == encode_archive(a);
  }

  TensorArchive sample;
  sample.add("beta", Rng(1).normal_tensor({3, 5}));
  sample.add("alpha", Rng(2).normal_tensor({2, 2}));
  const std::string good = encode_archive(sample);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(good[i])) << (8 * i);
  const std::string header = good.substr(8, header_len);
  const std::size_t base = (8 + header_len + 63) / 64 * 64;
  std::string nan_payload = good;
  const double nan = std::nan("");
  std::memcpy(nan_payload.data() + base, &nan, 8);
  std::string huge_len = good;
  huge_len[7] = '\x7f';

  struct Corruption {
    const char* name;
    std::function<void()> action;
    ArchiveErrorKind expected;
  };
  auto decode = [](std::string bytes) { return [bytes] { decode_archive(bytes); }; };
  const std::vector<Corruption> corruptions = {
      {"short file", decode(good.substr(0, 5)), ArchiveErrorKind::truncated},
      {"cut payload", decode(good.substr(0, good.size() - 8)), ArchiveErrorKind::truncated},
      {"oversized header length", decode(huge_len), ArchiveErrorKind::truncated},
      {"offset past end", decode(set_header(good, replace_once(header, "\"offset\":64", "\"offset\":6400"))),
       ArchiveErrorKind::truncated},
      {"wrong format version", decode(set_header(good, replace_once(header, "clover-v1", "clover-v0"))),
       ArchiveErrorKind::version},
      {"overlapping tensors", decode(set_header(good, replace_once(header, "\"offset\":64", "\"offset\":0"))),
       ArchiveErrorKind::overlap},
      {"misaligned offset", decode(set_header(good, replace_once(header, "\"offset\":64", "\"offset\":65"))),
       ArchiveErrorKind::malformed},
      {"wrong dtype", decode(set_header(good, replace_once(header, "\"f64\"", "\"f32\""))), ArchiveErrorKind::malformed},
      {"length mismatch", decode(set_header(good, replace_once(header, "\"length\":32", "\"length\":40"))),
       ArchiveErrorKind::malformed},
      {"invalid JSON", decode(set_header(good, "{\"meta\":")), ArchiveErrorKind::malformed},
      {"trailing bytes", decode(good + std::string(8, '\0')), ArchiveErrorKind::malformed},
      {"repeated key",
       decode(set_header(good, "{" + header.substr(1, header.find("},")) + "," + header.substr(1))),
       ArchiveErrorKind::duplicate},
      {"NaN payload", decode(nan_payload), ArchiveErrorKind::non_finite},
      {"empty tensor name", decode(set_header(good, replace_once(header, "\"alpha\"", "\"\""))),
       ArchiveErrorKind::invalid_name},
      {"write NaN",
       [] {
         TensorArchive a;
         a.add("x", Tensor({1}, {std::nan("")}));
         encode_archive(a);
       },
       ArchiveErrorKind::non_finite},
      {"write duplicate name",
       [] {
         TensorArchive a;
         a.add("x", Tensor({1}, {1.0}));
         a.add("x", Tensor({1}, {2.0}));
         encode_archive(a);
       },
       ArchiveErrorKind::duplicate},
      {"write name 'meta'",
       [] {
         TensorArchive a;
         a.add("meta", Tensor({1}, {1.0}));
         encode_archive(a);
       },
       ArchiveErrorKind::invalid_name},
      {"missing file", [&] { read_archive(dir / "absent.clv"); }, ArchiveErrorKind::io},
      {"unwritable path", [&] { write_archive(dir / "no" / "such" / "dir.clv", sample); }, ArchiveErrorKind::io},
  };
  std::size_t detected = 0;
  std::string misses;
  for (const auto& c : corruptions) {
    std::string got = "accepted";
    try {
      c.action();
    } catch (const ArchiveError& e) {
      got = to_string(e.kind());
      if (e.kind() == c.expected) {
        ++detected;
        continue;
      }
    }
    misses += std::string("; ") + c.name + " gave " + got + " not " + to_string(c.expected);
  }
  fs::remove_all(dir);
  return {identical == kTrials && detected == corruptions.size(),
          std::to_string(identical) + "/" + std::to_string(kTrials) + " bit-identical round trips, " +
              std::to_string(detected) + "/" + std::to_string(corruptions.size()) +
              " corruptions detected with the expected kind" + misses};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional: --backend scalar|avx2|neon runs the suite on a specific kernel set.
  for (int k = 1; k + 1 < argc; k += 2) {
    const std::string flag = argv[k];
    const std::string value = argv[k + 1];
    if (flag != "--backend") {
      std::cerr << "usage: clover_acceptance [--backend scalar|avx2|neon]\n";
      return 2;
    }
    bool found = false;
    for (auto b : {simd::Backend::scalar, simd::Backend::avx2, simd::Backend::neon}) {
      if (simd::backend_name(b) != value) continue;
      found = true;
      if (!simd::backend_available(b)) {
        std::cout << "backend " << value << " unavailable on this CPU; skipping\n";
        return 0;
      }
      simd::set_backend(b);
    }
    if (!found) {
      std::cerr << "unknown backend '" << value << "'\n";
      return 2;
    }
  }
  struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
    double limit_s;  // 0 when untimed
  };
  const Criterion criteria[] = {
      {1, "lossless orthogonalization", lossless_orthogonalization, 60},
      {2, "rank bound", rank_bound, 0},
      {3, "training-free pruning", training_free_pruning, 30},
      {4, "product-SVD oracle", product_svd_oracle, 0},
      {5, "gradient correctness", gradient_correctness, 120},
      {6, "stability at init", stability_at_init, 0},
      {7, "teacher-student recovery", teacher_student, 0},
      {8, "parameter accounting", parameter_accounting, 0},
      {9, "archive round-trip", archive_round_trip, 0},
  };
  std::cout << "simd backend: " << simd::backend_name(simd::active_backend()) << "\n";
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool pass = out.pass;
    std::string timing = sci(secs) + " s";
    if (c.limit_s > 0) {
      pass &= secs < c.limit_s;
      timing += " (limit " + sci(c.limit_s) + " s)";
    }
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": " << out.detail << " ["
              << timing << "]\n";
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
