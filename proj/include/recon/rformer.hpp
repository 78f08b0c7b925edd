#pragma once

// RFormer: a decoder-only transformer for mesh-free field reconstruction.
// Observed points become tokens carrying position and value; unobserved
// positions become query tokens with zeroed value channels. A structured
// attention mask lets queries attend to all observations (and themselves)
// while observations attend causally among themselves. Outputs at query
// positions are decoded to field values; training minimizes relative RMSE
// over query positions only.

#include <cstdint>
#include <string>
#include <vector>

#include "recon/checkpoint.hpp"
#include "recon/field.hpp"
#include "recon/tensor.hpp"

namespace recon {

struct ModelConfig {
  int num_layers = 4;
  int num_heads = 8;
  int d_token = 128;
  int ffn_hidden = 128;
  int head_hidden = 128;
  int max_seq_len = 1024;
  int d_x = 2;
  int d_v = 3;

  int token_width() const { return d_x + d_v; }
  void validate() const;
};

enum class TokenRole : uint8_t { kObs = 0, kQuery = 1 };

// Observation tokens first (in split order), then query tokens. Observation
// tokens carry [x, v]; query tokens carry [x, 0]. `origin` maps each token
// back to its point index in the snapshot (-1 for padding tokens).
struct TokenSequence {
  int d_x = 0;
  int d_v = 0;
  std::vector<double> tokens;  // [s * (d_x + d_v)]
  std::vector<TokenRole> roles;
  std::vector<int> origin;

  int size() const { return static_cast<int>(roles.size()); }
  int num_obs() const;
  double* token(int i) { return &tokens[static_cast<size_t>(i) * (d_x + d_v)]; }
  const double* token(int i) const {
    return &tokens[static_cast<size_t>(i) * (d_x + d_v)];
  }
};

struct AttentionMask {
  BoolMatrix allowed;
};

// Normalizes the sampled points with `stats` and assembles the sequence.
TokenSequence build_tokens(const Snapshot& snap, const ObservationSplit& split,
                           const NormalizationStats& stats, const ModelConfig& cfg);

// Index-level variant used by chunked inference; query indices may repeat
// (padding). Origins of padded entries are set to -1 by the caller contract:
// entries beyond `real_queries` are padding.
TokenSequence build_tokens_from_indices(const Snapshot& snap,
                                        const NormalizationStats& stats,
                                        const std::vector<int>& obs_indices,
                                        const std::vector<int>& query_indices,
                                        int real_queries, const ModelConfig& cfg);

// Query rows may attend to every observation plus themselves; observation
// rows attend to earlier observations and themselves.
AttentionMask build_mask(const std::vector<TokenRole>& roles);

template <class T>
struct RFormerModelT {
  ModelConfig config;
  std::vector<ParameterT<T>> params;

  static RFormerModelT init(const ModelConfig& cfg, uint64_t seed);

  // Predictions at query positions, shape [n x d_v]. Requires the sequence
  // to be observation-first.
  Var forward(TapeT<T>& tape, const TokenSequence& seq, const AttentionMask& mask);

  ParameterT<T>& param(const std::string& name);
  int64_t param_count() const;

  template <class U>
  RFormerModelT<U> cast() const {
    RFormerModelT<U> out;
    out.config = config;
    out.params.reserve(params.size());
    for (const auto& p : params)
      out.params.emplace_back(p.name, p.value.template cast<U>());
    return out;
  }
};

using RFormerModel = RFormerModelT<float>;

// Expected parameter directory (name, shape) for a config; checkpoints are
// validated against it.
std::vector<std::pair<std::string, std::vector<int>>> rformer_param_spec(
    const ModelConfig& cfg);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  int obs_per_sequence = 256;
  int query_per_sequence = 256;
  float learning_rate = 0.001f;
  uint64_t seed = 1;
  int steps_per_epoch = 0;   // 0 = derive from query coverage
  double noise_scale = 0.0;  // observation noise, in multiples of training std
  int start_epoch = 0;       // resume support; epochs is the final target
  std::string checkpoint_path;  // when set, saved atomically after each epoch
  bool verbose = false;
};

struct TrainResult {
  std::vector<double> loss_history;  // one entry per optimizer step
  int epochs_completed = 0;
};

// Steps per epoch when TrainConfig.steps_per_epoch == 0: enough steps that
// the expected number of supervised query samples covers the training set.
int default_steps_per_epoch(const Dataset& train_set, const TrainConfig& cfg);

TrainResult train(RFormerModel& model, const Dataset& train_set,
                  const std::vector<ObservationSplit>& splits,
                  const NormalizationStats& stats, const TrainConfig& cfg,
                  AdamState* optimizer_state = nullptr,
                  const std::vector<double>* previous_losses = nullptr);

Checkpoint make_checkpoint(const RFormerModel& model, const NormalizationStats& stats,
                           const nlohmann::json& metadata,
                           const AdamState* optimizer_state = nullptr);
RFormerModel model_from_checkpoint(const Checkpoint& ck, NormalizationStats* stats_out,
                                   AdamState* optimizer_state_out = nullptr);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Reconstructs the full field: one fixed observation set reused across
// chunks of at most `chunk_budget` queries; the final short chunk is padded
// with copies of the first query point and padded outputs are discarded.
// Observed positions carry their observed values; positions in neither index
// set are NaN.
std::vector<double> reconstruct_chunked(RFormerModel& model, const Snapshot& snap,
                                        const ObservationSplit& split,
                                        const NormalizationStats& stats,
                                        int chunk_budget);

}  // namespace recon
