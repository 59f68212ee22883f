#include "clover/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "clover/archive.hpp"
#include "clover/finetune.hpp"
#include "clover/model_io.hpp"
#include "clover/synthetic.hpp"
#include "clover/transform.hpp"

namespace clover {

namespace {

std::string grouped(std::uint64_t v) {
  std::string digits = std::to_string(v);
  for (int pos = static_cast<int>(digits.size()) - 3; pos > 0; pos -= 3) digits.insert(static_cast<std::size_t>(pos), ",");
  return digits;
}

std::string fixed(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  return os;
}

std::string ranks_string(const std::vector<std::size_t>& ranks) {
  std::string s = "[";
  for (std::size_t i = 0; i < ranks.size(); ++i) s += (i ? ", " : "") + std::to_string(ranks[i]);
  return s + "]";
}

void print_spectrum_summary(std::ostream& out, const SpectrumReport& rep) {
  out << "head  pair  s_max         s_min         rank(>1e-12 rel)\n";
  for (std::size_t i = 0; i < rep.heads.size(); ++i) {
    for (const auto& [name, sv] : {std::pair{"qk", &rep.heads[i].sv_qk}, std::pair{"vo", &rep.heads[i].sv_vo}}) {
      char line[128];
      std::snprintf(line, sizeof line, "%-5zu %-5s %-13.6e %-13.6e %zu\n", i, name, sv->front(), sv->back(),
                    numerical_rank(*sv));
      out << line;
    }
  }
}

void print_prune_table(std::ostream& out, const PruneStats& stats) {
  out << "head  rank_qk  rank_vo\n";
  for (std::size_t i = 0; i < stats.qk.rank_after.size(); ++i) {
    char line[96];
    std::snprintf(line, sizeof line, "%-5zu %zu->%-5zu %zu->%zu\n", i, stats.qk.rank_before[i], stats.qk.rank_after[i],
                  stats.vo.rank_before[i], stats.vo.rank_after[i]);
    out << line;
  }
  auto row = [&](const char* name, std::uint64_t before, std::uint64_t after, double pct) {
    out << name << ": params " << before << " -> " << after << " (reduction " << fixed(pct, 4) << "%)\n";
  };
  row("qk", stats.qk.params_before, stats.qk.params_after, stats.qk.reduction_pct());
  row("vo", stats.vo.params_before, stats.vo.params_after, stats.vo.reduction_pct());
  row("total", stats.params_before_total(), stats.params_after_total(), stats.reduction_total_pct());
}

void print_param_report(std::ostream& out, const ParamQuery& q, const ParamReport& rep) {
  out << "dims: D=" << q.model_dim << " h=" << q.num_heads << " d=" << q.head_dim << "\n";
  out << "method: " << rep.method << "\n";
  out << "targets: " << rep.targets << "\n";
  out << "trainable: " << rep.trainable << " (" << grouped(rep.trainable) << ")\n";
  out << "  formula: " << rep.formula << "\n";
  out << "frozen: " << rep.frozen << " (" << grouped(rep.frozen) << ")\n";
  if (rep.trainable_alt) {
    out << "trainable (alternate reading): " << *rep.trainable_alt << " (" << grouped(*rep.trainable_alt) << ")\n";
    out << "  formula: " << rep.formula_alt << "\n";
  }
}

struct Options {
  std::string in, out, second;
  std::string mode = "svd";
  std::uint64_t seed = 0;
  double threshold_qk = 0.0, threshold_vo = 0.0;
  std::string csv;
  double tol = 1e-10;
  std::string mask;
  bool rope = false;
  double rope_base = 10000.0;
  std::size_t batch = 2, seq_len = 8;
  std::size_t D = 0, h = 0, d = 0;
  std::string method = "clover";
  std::string targets;
  std::string task = "regress";
  std::size_t steps = 500;
  double lr = 1e-2;
  std::string optimizer = "adam";
  bool linear_decay = false;
  std::string trainable = "qk,vo";
  std::string loss_csv;
  std::size_t heads_rank = 0;
  bool bias = false;
  double noise = 0.0;
};

CLI::Validator mask_validator() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          parse_mask(s);
          return {};
        } catch (const std::exception& e) {
          return e.what();
        }
      },
      "none|causal|window:W", "mask");
}

CLI::Validator method_validator() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          parse_param_method(s, {});
          return {};
        } catch (const std::exception& e) {
          return e.what();
        }
      },
      "clover|clover-qr|clover-svd|lora:R|dora:R|full", "method");
}

AttentionConfig config_from(const Options& o, const AttentionConfig& fallback, bool mask_given, bool rope_given) {
  AttentionConfig c = fallback;
  if (mask_given) c.mask = parse_mask(o.mask);
  if (rope_given) c.rope = {o.rope, o.rope_base};
  return c;
}

int run_inspect(const Options& o, std::ostream& out) {
  const TensorArchive a = read_archive(o.in);
  const std::string kind = archive_kind(a);
  out << "archive: " << o.in << "\n";
  out << "kind: " << kind << "\n";
  const AttentionConfig config = attention_config(a);
  out << "mask: " << config.mask.name() << "\n";
  out << "rope: " << (config.rope.enabled ? "on (base " + fixed(config.rope.base) + ")" : std::string("off")) << "\n";
  out << "tensors:";
  for (const auto& [name, t] : a.tensors) out << " " << name << shape_to_string(t.shape());
  out << "\n";
  if (kind == "weights") {
    const AttentionWeights w = weights_from_archive(a);
    out << "dims: D=" << w.model_dim << " h=" << w.num_heads << " d=" << w.head_dim << "\n";
    out << "biases: " << (w.b_q ? "q" : "") << (w.b_k ? "k" : "") << (w.b_v ? "v" : "") << (w.b_o ? "o" : "")
        << (w.has_qk_bias() || w.b_v || w.b_o ? "" : "none") << "\n";
    print_spectrum_summary(out, spectrum_report(w));
  } else if (kind == "factors" || kind == "train_state") {
    const CloverFactors f = load_factors(o.in);
    out << "dims: D=" << f.model_dim << " h=" << f.num_heads << " d=" << f.head_dim << "\n";
    out << "mode: " << to_string(f.mode) << (f.qk_augmented ? " (qk bias augmented)" : "") << "\n";
    if (f.mode == FactorMode::svd_both) out << "ranks_qk: " << ranks_string(f.rank_qk) << "\n";
    out << "ranks_vo: " << ranks_string(f.rank_vo) << "\n";
    out << "trainable: " << (f.trainable_s_qk ? "s_qk " : "") << (f.trainable_s_vo ? "s_vo" : "")
        << (f.trainable_s_qk || f.trainable_s_vo ? "" : "none") << "\n";
    print_spectrum_summary(out, spectrum_report(merge_back(f)));
    if (kind == "train_state") {
      const TrainState s = train_state_from_archive(a);
      out << "step: " << s.step << "\nfinal_loss: " << format_double(s.final_loss) << "\n";
    }
  } else {
    throw std::runtime_error("unknown archive kind '" + kind + "'");
  }
  return kExitOk;
}

int run_transform(const Options& o, std::ostream& out) {
  const TensorArchive a = read_archive(o.in);
  const AttentionWeights w = weights_from_archive(a);
  const CloverFactors f = decompose_factors(w, parse_factor_mode(o.mode));
  TensorArchive fa = factors_to_archive(f, attention_config(a));
  fa.meta["seed"] = o.seed;
  write_archive(o.out, fa);
  out << "mode: " << to_string(f.mode) << "\nseed: " << o.seed << "\nwrote " << o.out << "\n";
  return kExitOk;
}

int run_prune(const Options& o, std::ostream& out) {
  const TensorArchive a = read_archive(o.in);
  const CloverFactors f = archive_kind(a) == "weights" ? decompose_factors(weights_from_archive(a))
                                                       : factors_from_archive(a);
  const PruneResult r = prune_factors(f, o.threshold_qk, o.threshold_vo);
  write_archive(o.out, factors_to_archive(r.factors, attention_config(a)));
  out << "thresholds: qk=" << format_double(o.threshold_qk) << " vo=" << format_double(o.threshold_vo) << "\n";
  print_prune_table(out, r.stats);
  if (!o.csv.empty()) {
    std::ofstream os = open_output(o.csv);
    write_prune_csv(os, r.stats);
    out << "wrote " << o.csv << "\n";
  } else {
    write_prune_csv(out, r.stats);
  }
  out << "wrote " << o.out << "\n";
  return kExitOk;
}

int run_verify(const Options& o, bool mask_given, bool rope_given, std::ostream& out) {
  const TensorArchive wa = read_archive(o.in);
  const AttentionWeights w = load_plain_weights(o.in);
  const CloverFactors f = load_factors(o.second);
  if (w.model_dim != f.model_dim || w.num_heads != f.num_heads) {
    throw std::runtime_error("weights and factors have different dims");
  }
  const AttentionConfig config = config_from(o, attention_config(wa), mask_given, rope_given);
  const Tensor x = random_input(o.batch, o.seq_len, w.model_dim, o.seed);
  const Tensor plain = mha_forward(x, w, config.mask, config.rope);
  const Tensor factored = mha_forward_factored(x, f, config.mask, config.rope);
  const double dev = max_abs_diff(plain, factored);
  const bool ok = dev <= o.tol;
  out << "seed: " << o.seed << "\n";
  out << "input: b=" << o.batch << " n=" << o.seq_len << " D=" << w.model_dim << "\n";
  out << "mask: " << config.mask.name() << "\nrope: " << (config.rope.enabled ? "on" : "off") << "\n";
  out << "max_abs_deviation: " << format_double(dev) << "\n";
  out << "tolerance: " << format_double(o.tol) << "\n";
  out << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitOk : kExitFailure;
}

int run_spectrum(const Options& o, std::ostream& out) {
  const SpectrumReport rep = spectrum_report(load_plain_weights(o.in));
  std::ofstream os = open_output(o.csv);
  write_spectrum_csv(os, rep);
  print_spectrum_summary(out, rep);
  out << "wrote " << o.csv << "\n";
  return kExitOk;
}

int run_count(const Options& o, std::ostream& out) {
  ParamQuery base;
  base.model_dim = o.D;
  base.num_heads = o.h;
  base.head_dim = o.d;
  base.targets = o.targets;
  const ParamQuery q = parse_param_method(o.method, base);
  print_param_report(out, q, count_params(q));
  return kExitOk;
}

TrainableSelection parse_trainable(const std::string& text) {
  TrainableSelection sel{false, false};
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part == "qk") sel.qk = true;
    else if (part == "vo") sel.vo = true;
    else throw std::invalid_argument("unknown trainable group '" + part + "' (expected qk, vo)");
  }
  if (!sel.qk && !sel.vo) throw std::invalid_argument("nothing to train");
  return sel;
}

int run_train(const Options& o, bool mask_given, bool rope_given, std::ostream& out) {
  const TensorArchive a = read_archive(o.in);
  const CloverFactors f = load_factors(o.in);
  const AttentionConfig config = config_from(o, attention_config(a), mask_given, rope_given);
  const ToyDims dims{o.batch, o.seq_len, f.model_dim};
  const ToyTask task = make_toy_task(parse_toy_kind(o.task), o.seed, dims, f, config.mask, config.rope);
  TrainConfig tc;
  tc.steps = o.steps;
  tc.lr = o.lr;
  tc.optimizer = o.optimizer == "sgd" ? Optimizer::sgd : Optimizer::adam;
  tc.linear_decay = o.linear_decay;
  tc.trainable = parse_trainable(o.trainable);
  const TrainState state = train_toy(f, task, tc);
  write_archive(o.out, train_state_to_archive(state, task, tc));
  if (!o.loss_csv.empty()) {
    std::ofstream os = open_output(o.loss_csv);
    write_loss_csv(os, state.history);
  }
  out << "task: " << to_string(task.kind) << " seed=" << o.seed << " b=" << dims.batch << " n=" << dims.seq_len
      << " D=" << dims.model_dim << "\n";
  out << "steps: " << state.step << "\n";
  out << "initial_loss: " << format_double(state.history.front().loss) << "\n";
  out << "final_loss: " << format_double(state.final_loss) << "\n";
  out << "frozen_checksum: " << state.frozen_checksum << " (unchanged)\n";
  out << "wrote " << o.out << "\n";
  return kExitOk;
}

int run_merge(const Options& o, std::ostream& out) {
  const TensorArchive a = read_archive(o.in);
  const AttentionWeights w = merge_back(load_factors(o.in));
  write_archive(o.out, weights_to_archive(w, attention_config(a)));
  out << "inner dims: qk=" << w.qk_dim() << " vo=" << w.vo_dim() << "\nwrote " << o.out << "\n";
  return kExitOk;
}

int run_gen(const Options& o, std::ostream& out) {
  SyntheticSpec spec;
  spec.model_dim = o.D;
  spec.num_heads = o.h;
  spec.head_dim = o.d;
  spec.heads_rank = o.heads_rank;
  spec.bias = o.bias;
  spec.noise = o.noise;
  spec.seed = o.seed;
  write_archive(o.out, weights_to_archive(synthetic_weights(spec)));
  out << "dims: D=" << o.D << " h=" << o.h << " d=" << o.d << "\nheads_rank: "
      << (o.heads_rank > 0 && o.heads_rank < o.d ? std::to_string(o.heads_rank) : std::string("full")) << "\nseed: "
      << o.seed << "\nwrote " << o.out << "\n";
  return kExitOk;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Absorb-decompose transforms for multi-head attention weights", "clover"};
  app.require_subcommand(1);
  Options o;

  auto* inspect = app.add_subcommand("inspect", "print dims and per-head spectra of an archive");
  inspect->add_option("archive", o.in)->required();

  auto* transform = app.add_subcommand("transform", "decompose plain weights into factors");
  transform->add_option("in", o.in)->required();
  transform->add_option("out", o.out)->required();
  transform->add_option("--mode", o.mode)->check(CLI::IsMember({"svd", "qr"}));
  transform->add_option("--seed", o.seed);

  auto* prune = app.add_subcommand("prune", "drop singular directions at or below thresholds");
  prune->add_option("in", o.in)->required();
  prune->add_option("out", o.out)->required();
  prune->add_option("--threshold-qk", o.threshold_qk)->required()->check(CLI::NonNegativeNumber);
  prune->add_option("--threshold-vo", o.threshold_vo)->required()->check(CLI::NonNegativeNumber);
  prune->add_option("--csv", o.csv, "write the prune CSV here instead of stdout");

  auto* verify = app.add_subcommand("verify", "compare plain and factored forward on random input");
  verify->add_option("weights", o.in)->required();
  verify->add_option("factors", o.second)->required();
  verify->add_option("--tol", o.tol)->check(CLI::NonNegativeNumber);
  auto* verify_mask = verify->add_option("--mask", o.mask)->check(mask_validator());
  auto* verify_rope = verify->add_flag("--rope", o.rope);
  verify->add_option("--rope-base", o.rope_base)->check(CLI::PositiveNumber);
  verify->add_option("--seed", o.seed);
  verify->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
  verify->add_option("--seq-len", o.seq_len)->check(CLI::PositiveNumber);

  auto* spectrum = app.add_subcommand("spectrum", "write singular-value and norm curves as CSV");
  spectrum->add_option("in", o.in)->required();
  spectrum->add_option("--csv", o.csv)->required();

  auto* count = app.add_subcommand("count-params", "trainable/frozen parameter counts");
  count->set_help_flag("--help", "print this help");  // -h would collide with --h
  count->add_option("--D", o.D)->required()->check(CLI::PositiveNumber);
  count->add_option("--h", o.h)->required()->check(CLI::PositiveNumber);
  count->add_option("--d", o.d)->required()->check(CLI::PositiveNumber);
  count->add_option("--method", o.method)->check(method_validator());
  count->add_option("--targets", o.targets, "subset of qkvo");

  auto* train = app.add_subcommand("train-toy", "fine-tune S (and R) on a toy task");
  train->add_option("factors", o.in)->required();
  train->add_option("--task", o.task)->check(CLI::IsMember({"recall", "regress"}));
  train->add_option("--steps", o.steps)->check(CLI::PositiveNumber);
  train->add_option("--lr", o.lr)->check(CLI::NonNegativeNumber);
  train->add_option("--seed", o.seed);
  train->add_option("--out", o.out)->required();
  train->add_option("--loss-csv", o.loss_csv);
  train->add_option("--optimizer", o.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  train->add_flag("--linear-decay", o.linear_decay);
  train->add_option("--trainable", o.trainable, "comma list of qk, vo");
  auto* train_mask = train->add_option("--mask", o.mask)->check(mask_validator());
  auto* train_rope = train->add_flag("--rope", o.rope);
  train->add_option("--rope-base", o.rope_base)->check(CLI::PositiveNumber);
  train->add_option("--batch", o.batch)->check(CLI::Range(1, 8));
  train->add_option("--seq-len", o.seq_len)->check(CLI::Range(2, 32));

  auto* merge = app.add_subcommand("merge", "fold S/R back into plain weights");
  merge->add_option("factors", o.in)->required();
  merge->add_option("out", o.out)->required();

  auto* gen = app.add_subcommand("gen", "generate synthetic weights");
  gen->set_help_flag("--help", "print this help");
  gen->add_option("out", o.out)->required();
  gen->add_option("--D", o.D)->required()->check(CLI::PositiveNumber);
  gen->add_option("--h", o.h)->required()->check(CLI::PositiveNumber);
  gen->add_option("--d", o.d)->required()->check(CLI::PositiveNumber);
  gen->add_option("--heads-rank", o.heads_rank, "0 for dense random weights");
  gen->add_option("--seed", o.seed);
  gen->add_flag("--bias", o.bias);
  gen->add_option("--noise", o.noise)->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    if (inspect->parsed()) return run_inspect(o, out);
    if (transform->parsed()) return run_transform(o, out);
    if (prune->parsed()) return run_prune(o, out);
    if (verify->parsed()) return run_verify(o, verify_mask->count() > 0, verify_rope->count() > 0, out);
    if (spectrum->parsed()) return run_spectrum(o, out);
    if (count->parsed()) return run_count(o, out);
    if (train->parsed()) return run_train(o, train_mask->count() > 0, train_rope->count() > 0, out);
    if (merge->parsed()) return run_merge(o, out);
    if (gen->parsed()) return run_gen(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

int cli_dispatch(int argc, const char* const* argv) { return cli_dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace clover
