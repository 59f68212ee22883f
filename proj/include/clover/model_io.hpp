#pragma once

// Mapping of weights, factors and training state onto tensor archives.
// meta["kind"] is one of "weights", "factors", "train_state".

#include <filesystem>
#include <string>

#include "clover/archive.hpp"
#include "clover/attention.hpp"
#include "clover/finetune.hpp"

namespace clover {

// Attention configuration the tensors are meant to run under.
struct AttentionConfig {
  MaskSpec mask;
  RopeSpec rope;
};

TensorArchive weights_to_archive(const AttentionWeights& w, const AttentionConfig& config = {});
AttentionWeights weights_from_archive(const TensorArchive& archive);

TensorArchive factors_to_archive(const CloverFactors& f, const AttentionConfig& config = {});
CloverFactors factors_from_archive(const TensorArchive& archive);

// Factors (with trainable S/R), readout, Adam moments, loss history and the
// task recipe needed to regenerate the data.
TensorArchive train_state_to_archive(const TrainState& state, const ToyTask& task, const TrainConfig& config);
TrainState train_state_from_archive(const TensorArchive& archive);

std::string archive_kind(const TensorArchive& archive);
AttentionConfig attention_config(const TensorArchive& archive);

// Reads weights, or factors / train state folded back with merge_back.
AttentionWeights load_plain_weights(const std::filesystem::path& path);
// Reads factors or the factors of a train state.
CloverFactors load_factors(const std::filesystem::path& path);

}  // namespace clover
