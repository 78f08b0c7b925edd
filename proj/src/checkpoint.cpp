#include "recon/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "recon/errors.hpp"
#include "recon/io.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

using nlohmann::json;

namespace recon {

namespace {
constexpr const char kMagic[] = "RECONCKPT1";
}

json stats_to_json(const NormalizationStats& stats) {
  return json{{"coord_mean", stats.coord_mean},
              {"coord_std", stats.coord_std},
              {"value_mean", stats.value_mean},
              {"value_std", stats.value_std}};
}

NormalizationStats stats_from_json(const json& j) {
  NormalizationStats s;
  s.coord_mean = j.at("coord_mean").get<std::vector<double>>();
  s.coord_std = j.at("coord_std").get<std::vector<double>>();
  s.value_mean = j.at("value_mean").get<std::vector<double>>();
  s.value_std = j.at("value_std").get<std::vector<double>>();
  return s;
}

void Checkpoint::save(const std::string& path) const {
  json dir = json::array();
  int64_t offset = 0;
  for (const auto& p : params) {
    dir.push_back({{"name", p.name},
                   {"shape", p.value.shape},
                   {"offset", offset},
                   {"count", p.value.numel()}});
    offset += p.value.numel() * static_cast<int64_t>(sizeof(float));
  }
  const json header{{"kind", kind},
                    {"config", config},
                    {"stats", stats_to_json(stats)},
                    {"metadata", metadata},
                    {"directory", dir}};
  const std::string header_text = header.dump();
  std::string blob;
  blob.reserve(header_text.size() + static_cast<size_t>(offset) + 64);
  blob += kMagic;
  blob += "\n";
  blob += std::to_string(header_text.size());
  blob += "\n";
  blob += header_text;
  for (const auto& p : params) {
    const size_t bytes = p.value.data.size() * sizeof(float);
    const size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, p.value.data.data(), bytes);
  }
  atomic_write_file(path, blob);
}

Checkpoint Checkpoint::load(const std::string& path) {
  const std::string blob = read_file(path);
  const size_t magic_end = blob.find('\n');
  if (magic_end == std::string::npos || blob.substr(0, magic_end) != kMagic)
    throw DataError("not a checkpoint file: " + path);
  const size_t len_end = blob.find('\n', magic_end + 1);
  if (len_end == std::string::npos) throw DataError("truncated checkpoint: " + path);
  const size_t header_len =
      static_cast<size_t>(std::stoll(blob.substr(magic_end + 1, len_end - magic_end - 1)));
  if (len_end + 1 + header_len > blob.size())
    throw DataError("truncated checkpoint header: " + path);
  json header;
  try {
    header = json::parse(blob.substr(len_end + 1, header_len));
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint header in " + path + ": " + e.what());
  }
  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.config = header.at("config");
  ck.stats = stats_from_json(header.at("stats"));
  ck.metadata = header.at("metadata");
  const size_t base = len_end + 1 + header_len;
  for (const auto& entry : header.at("directory")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const int64_t offset = entry.at("offset").get<int64_t>();
    const int64_t count = entry.at("count").get<int64_t>();
    if (count != Tensor::numel_of(shape))
      throw DataError("checkpoint entry '" + name + "': count/shape mismatch");
    const size_t lo = base + static_cast<size_t>(offset);
    const size_t bytes = static_cast<size_t>(count) * sizeof(float);
    if (lo + bytes > blob.size())
      throw DataError("checkpoint entry '" + name + "' extends past end of file");
    Tensor t(shape);
    std::memcpy(t.data.data(), blob.data() + lo, bytes);
    ck.params.emplace_back(name, std::move(t));
  }
  return ck;
}

const Parameter* Checkpoint::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

}  // namespace recon
