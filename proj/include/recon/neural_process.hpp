#pragma once

// Neural-process baselines. CNP: MLP encoder with mean aggregation and an
// MLP decoder. TNP: transformer encoder with learned context/query role
// embeddings and full bidirectional attention. Both predict a Gaussian per
// query with sigma = 0.1 + 0.9 * softplus(sigma_raw) and train on the
// Gaussian negative log likelihood.

#include <cstdint>
#include <string>
#include <vector>

#include "recon/checkpoint.hpp"
#include "recon/field.hpp"
#include "recon/tensor.hpp"

namespace recon {

struct NpConfig {
  int hidden = 128;
  int cnp_encoder_layers = 4;
  int cnp_decoder_layers = 3;
  int tnp_layers = 4;
  int tnp_heads = 4;
  float learning_rate = 1e-4f;
  float weight_decay = 0.01f;  // TNP only (decoupled)
  int batch_size = 64;
  int epochs = 1000;
  int max_queries_per_batch = 2048;
  int max_context_per_batch = 0;  // 0 = all observed points
  bool include_context_as_targets = true;
  int steps_per_epoch = 0;  // 0 = derive from query coverage
  uint64_t seed = 1;
  int d_x = 2;
  int d_v = 3;

  void validate() const;
};

enum class NpKind { kCnp, kTnp };

template <class T>
struct NeuralProcessT {
  NpKind kind = NpKind::kCnp;
  NpConfig config;
  std::vector<ParameterT<T>> params;

  static NeuralProcessT init(NpKind kind, const NpConfig& cfg, uint64_t seed);

  // Gaussian prediction heads at target positions. context/targets are
  // [m x (d_x + d_v)] and [n x d_x] row-major, in normalized units.
  // Returns mean [n x d_v] and sigma [n x d_v].
  std::pair<Var, Var> forward(TapeT<T>& tape, const std::vector<double>& context,
                              int num_context, const std::vector<double>& target_coords,
                              int num_targets);

  ParameterT<T>& param(const std::string& name);
  int64_t param_count() const;

  template <class U>
  NeuralProcessT<U> cast() const {
    NeuralProcessT<U> out;
    out.kind = kind;
    out.config = config;
    out.params.reserve(params.size());
    for (const auto& p : params)
      out.params.emplace_back(p.name, p.value.template cast<U>());
    return out;
  }
};

using NeuralProcess = NeuralProcessT<float>;

std::vector<std::pair<std::string, std::vector<int>>> np_param_spec(NpKind kind,
                                                                    const NpConfig& cfg);

struct NpTrainResult {
  std::vector<double> loss_history;
};

NpTrainResult np_train(NeuralProcess& model, const Dataset& train_set,
                       const std::vector<ObservationSplit>& splits,
                       const NormalizationStats& stats);

// Posterior-mean reconstruction at the split's query points, chunked by the
// configured query limit; returns [n x d_v] in split.query order
// (denormalized).
std::vector<double> np_reconstruct(NeuralProcess& model, const Snapshot& snap,
                                   const ObservationSplit& split,
                                   const NormalizationStats& stats);

Checkpoint np_make_checkpoint(const NeuralProcess& model, const NormalizationStats& stats,
                              const nlohmann::json& metadata);
NeuralProcess np_from_checkpoint(const Checkpoint& ck, NormalizationStats* stats_out);

nlohmann::json np_config_to_json(const NpConfig& cfg);
NpConfig np_config_from_json(const nlohmann::json& j);

}  // namespace recon
