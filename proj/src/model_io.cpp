#include "clover/model_io.hpp"

#include "clover/transform.hpp"

namespace clover {

using nlohmann::json;

namespace {

[[noreturn]] void malformed(const std::string& msg) { throw ArchiveError(ArchiveErrorKind::malformed, msg); }

json dims_json(std::size_t D, std::size_t h, std::size_t d) { return {{"D", D}, {"h", h}, {"d", d}}; }

void put_config(TensorArchive& a, const AttentionConfig& config) {
  a.meta["mask"] = config.mask.kind == MaskSpec::Kind::explicit_grid ? "explicit" : config.mask.name();
  if (config.mask.kind == MaskSpec::Kind::explicit_grid) a.add("mask_grid", config.mask.grid);
  a.meta["rope"] = {{"enabled", config.rope.enabled}, {"base", config.rope.base}};
}

template <typename T>
T meta_value(const json& meta, const char* key) {
  if (!meta.contains(key)) malformed(std::string("archive meta lacks '") + key + "'");
  try {
    return meta[key].get<T>();
  } catch (const json::exception&) {
    malformed(std::string("archive meta field '") + key + "' has the wrong type");
  }
}

void expect_kind(const TensorArchive& a, const std::string& kind) {
  const std::string found = archive_kind(a);
  if (found != kind) malformed("expected a " + kind + " archive, found '" + found + "'");
}

std::optional<Tensor> optional_tensor(const TensorArchive& a, const char* name) {
  if (!a.contains(name)) return std::nullopt;
  return a.get(name);
}

void read_dims(const json& meta, std::size_t& D, std::size_t& h, std::size_t& d) {
  const json dims = meta_value<json>(meta, "dims");
  D = meta_value<std::size_t>(dims, "D");
  h = meta_value<std::size_t>(dims, "h");
  d = meta_value<std::size_t>(dims, "d");
}

void add_factor_tensors(TensorArchive& a, const CloverFactors& f) {
  if (f.mode == FactorMode::svd_both) {
    a.add("u_qk", f.u_qk);
    a.add("s_qk", f.s_qk);
    a.add("v_qk", f.v_qk);
  } else {
    a.add("q_q", f.q_q);
    a.add("r_q", f.r_q);
    a.add("q_k", f.q_k);
    a.add("r_k", f.r_k);
  }
  a.add("u_vo", f.u_vo);
  a.add("s_vo", f.s_vo);
  a.add("v_vo", f.v_vo);
  if (f.folded_b_o) a.add("folded_b_o", *f.folded_b_o);
  if (f.trainable_s_qk) a.add("trainable_s_qk", *f.trainable_s_qk);
  if (f.trainable_s_vo) a.add("trainable_s_vo", *f.trainable_s_vo);
  a.meta["dims"] = dims_json(f.model_dim, f.num_heads, f.head_dim);
  a.meta["mode"] = to_string(f.mode);
  a.meta["qk_augmented"] = f.qk_augmented;
  a.meta["ranks"] = {{"qk", f.rank_qk}, {"vo", f.rank_vo}};
}

CloverFactors read_factor_tensors(const TensorArchive& a) {
  CloverFactors f;
  read_dims(a.meta, f.model_dim, f.num_heads, f.head_dim);
  try {
    f.mode = parse_factor_mode(meta_value<std::string>(a.meta, "mode"));
  } catch (const std::invalid_argument& e) {
    malformed(e.what());
  }
  f.qk_augmented = meta_value<bool>(a.meta, "qk_augmented");
  const json ranks = meta_value<json>(a.meta, "ranks");
  f.rank_qk = meta_value<std::vector<std::size_t>>(ranks, "qk");
  f.rank_vo = meta_value<std::vector<std::size_t>>(ranks, "vo");
  if (f.mode == FactorMode::svd_both) {
    f.u_qk = a.get("u_qk");
    f.s_qk = a.get("s_qk");
    f.v_qk = a.get("v_qk");
  } else {
    f.q_q = a.get("q_q");
    f.r_q = a.get("r_q");
    f.q_k = a.get("q_k");
    f.r_k = a.get("r_k");
  }
  f.u_vo = a.get("u_vo");
  f.s_vo = a.get("s_vo");
  f.v_vo = a.get("v_vo");
  f.folded_b_o = optional_tensor(a, "folded_b_o");
  f.trainable_s_qk = optional_tensor(a, "trainable_s_qk");
  f.trainable_s_vo = optional_tensor(a, "trainable_s_vo");
  try {
    f.validate();
  } catch (const std::exception& e) {
    malformed(std::string("invalid factors: ") + e.what());
  }
  return f;
}

}  // namespace

std::string archive_kind(const TensorArchive& archive) {
  if (!archive.meta.contains("kind") || !archive.meta["kind"].is_string()) return "unknown";
  return archive.meta["kind"].get<std::string>();
}

AttentionConfig attention_config(const TensorArchive& archive) {
  AttentionConfig config;
  const json& meta = archive.meta;
  if (meta.contains("mask")) {
    const std::string mask = meta_value<std::string>(meta, "mask");
    try {
      config.mask = mask == "explicit" ? MaskSpec::explicit_grid(archive.get("mask_grid")) : parse_mask(mask);
    } catch (const std::invalid_argument& e) {
      malformed(std::string("archive mask: ") + e.what());
    }
  }
  if (meta.contains("rope")) {
    const json rope = meta["rope"];
    config.rope.enabled = meta_value<bool>(rope, "enabled");
    config.rope.base = meta_value<double>(rope, "base");
  }
  return config;
}

TensorArchive weights_to_archive(const AttentionWeights& w, const AttentionConfig& config) {
  w.validate();
  TensorArchive a;
  a.meta["kind"] = "weights";
  a.meta["dims"] = dims_json(w.model_dim, w.num_heads, w.head_dim);
  put_config(a, config);
  a.add("w_q", w.w_q);
  a.add("w_k", w.w_k);
  a.add("w_v", w.w_v);
  a.add("w_o", w.w_o);
  if (w.b_q) a.add("b_q", *w.b_q);
  if (w.b_k) a.add("b_k", *w.b_k);
  if (w.b_v) a.add("b_v", *w.b_v);
  if (w.b_o) a.add("b_o", *w.b_o);
  return a;
}

AttentionWeights weights_from_archive(const TensorArchive& a) {
  expect_kind(a, "weights");
  AttentionWeights w;
  read_dims(a.meta, w.model_dim, w.num_heads, w.head_dim);
  w.w_q = a.get("w_q");
  w.w_k = a.get("w_k");
  w.w_v = a.get("w_v");
  w.w_o = a.get("w_o");
  w.b_q = optional_tensor(a, "b_q");
  w.b_k = optional_tensor(a, "b_k");
  w.b_v = optional_tensor(a, "b_v");
  w.b_o = optional_tensor(a, "b_o");
  try {
    w.validate();
  } catch (const std::exception& e) {
    malformed(std::string("invalid weights: ") + e.what());
  }
  return w;
}

TensorArchive factors_to_archive(const CloverFactors& f, const AttentionConfig& config) {
  f.validate();
  TensorArchive a;
  a.meta["kind"] = "factors";
  put_config(a, config);
  add_factor_tensors(a, f);
  return a;
}

CloverFactors factors_from_archive(const TensorArchive& a) {
  expect_kind(a, "factors");
  return read_factor_tensors(a);
}

TensorArchive train_state_to_archive(const TrainState& state, const ToyTask& task, const TrainConfig& config) {
  TensorArchive a;
  a.meta["kind"] = "train_state";
  put_config(a, {task.mask, task.rope});
  add_factor_tensors(a, state.factors);
  if (state.readout) a.add("readout", *state.readout);
  for (const auto& [name, t] : state.moments) a.add(name, t);
  if (!state.history.empty()) {
    Tensor hist({state.history.size(), 3});
    for (std::size_t k = 0; k < state.history.size(); ++k) {
      hist(k, 0) = static_cast<double>(state.history[k].step);
      hist(k, 1) = state.history[k].loss;
      hist(k, 2) = state.history[k].grad_norm;
    }
    a.add("loss_history", std::move(hist));
  }
  a.meta["train"] = {
      {"step", state.step},
      {"final_loss", state.final_loss},
      {"frozen_checksum", state.frozen_checksum},
      {"task",
       {{"kind", to_string(task.kind)},
        {"seed", task.seed},
        {"batch", task.dims.batch},
        {"seq_len", task.dims.seq_len},
        {"model_dim", task.dims.model_dim},
        {"vocab", task.vocab}}},
      {"config",
       {{"steps", config.steps},
        {"lr", config.lr},
        {"optimizer", config.optimizer == Optimizer::adam ? "adam" : "sgd"},
        {"beta1", config.beta1},
        {"beta2", config.beta2},
        {"epsilon", config.epsilon},
        {"linear_decay", config.linear_decay},
        {"trainable_qk", config.trainable.qk},
        {"trainable_vo", config.trainable.vo}}},
  };
  return a;
}

TrainState train_state_from_archive(const TensorArchive& a) {
  expect_kind(a, "train_state");
  TrainState state;
  state.factors = read_factor_tensors(a);
  state.readout = optional_tensor(a, "readout");
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("m_", 0) == 0 || name.rfind("v_", 0) == 0) {
      if (name != "v_qk" && name != "v_vo") state.moments.emplace_back(name, t);
    }
  }
  if (a.contains("loss_history")) {
    const Tensor& hist = a.get("loss_history");
    if (hist.rank() != 2 || hist.cols() != 3) malformed("loss_history must be [steps, 3]");
    for (std::size_t k = 0; k < hist.rows(); ++k) {
      state.history.push_back({static_cast<std::size_t>(hist(k, 0)), hist(k, 1), hist(k, 2)});
    }
  }
  const json train = meta_value<json>(a.meta, "train");
  state.step = meta_value<std::size_t>(train, "step");
  state.final_loss = meta_value<double>(train, "final_loss");
  state.frozen_checksum = meta_value<std::uint64_t>(train, "frozen_checksum");
  if (frozen_checksum(state.factors) != state.frozen_checksum) malformed("frozen checksum does not match the stored bases");
  return state;
}

AttentionWeights load_plain_weights(const std::filesystem::path& path) {
  const TensorArchive a = read_archive(path);
  const std::string kind = archive_kind(a);
  if (kind == "weights") return weights_from_archive(a);
  if (kind == "factors" || kind == "train_state") return merge_back(read_factor_tensors(a));
  malformed(path.string() + ": unknown archive kind '" + kind + "'");
}

CloverFactors load_factors(const std::filesystem::path& path) {
  const TensorArchive a = read_archive(path);
  const std::string kind = archive_kind(a);
  if (kind == "factors" || kind == "train_state") return read_factor_tensors(a);
  malformed(path.string() + ": expected factors, found '" + kind + "'");
}

}  // namespace clover
