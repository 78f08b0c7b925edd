#pragma once

// Checkpoint container: a JSON header (kind, config, normalization stats,
// metadata, parameter directory with name/shape/byte-offset) followed by raw
// little-endian 32-bit float blocks in directory order. Round trips are
// bit-exact.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recon/field.hpp"
#include "recon/tensor.hpp"

namespace recon {

struct Checkpoint {
  std::string kind;  // model family identifier, e.g. "rformer", "cnp", "tnp"
  nlohmann::json config;
  NormalizationStats stats;
  nlohmann::json metadata;
  std::vector<Parameter> params;  // directory order

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const Parameter* find(const std::string& name) const;
};

nlohmann::json stats_to_json(const NormalizationStats& stats);
NormalizationStats stats_from_json(const nlohmann::json& j);

}  // namespace recon
