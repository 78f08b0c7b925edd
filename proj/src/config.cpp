#include "recon/config.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <sstream>

#include "recon/io.hpp"

namespace recon {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": '" + v + "'");
  }
}

int parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const long n = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(n);
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("bad boolean value for " + key + ": '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(item, key));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      // [data]
      {"data.dir", [](RunConfig& c, const std::string& v, const std::string&) { c.data_dir = v; }},
      {"data.train_fraction", [](RunConfig& c, const std::string& v, const std::string& k) { c.train_fraction = parse_double(v, k); }},
      // [generate]
      {"generate.snapshots", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.num_snapshots = parse_int(v, k); }},
      {"generate.points", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.points_per_snapshot = parse_int(v, k); }},
      {"generate.x_min", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.x_min = parse_double(v, k); }},
      {"generate.x_max", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.x_max = parse_double(v, k); }},
      {"generate.y_min", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.y_min = parse_double(v, k); }},
      {"generate.y_max", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.y_max = parse_double(v, k); }},
      {"generate.freestream", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.freestream = parse_double(v, k); }},
      {"generate.circulation", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.circulation = parse_double(v, k); }},
      {"generate.core_radius", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.core_radius = parse_double(v, k); }},
      {"generate.spacing_x", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.spacing_x = parse_double(v, k); }},
      {"generate.spacing_y", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.spacing_y = parse_double(v, k); }},
      {"generate.advection", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.advection_speed = parse_double(v, k); }},
      {"generate.dt", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.dt = parse_double(v, k); }},
      {"generate.street_origin", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.street_origin = parse_double(v, k); }},
      {"generate.pairs", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.pairs = parse_int(v, k); }},
      {"generate.window_pairs", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.window_pairs = parse_int(v, k); }},
      {"generate.shared_points", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.shared_points = parse_bool(v, k); }},
      {"generate.seed", [](RunConfig& c, const std::string& v, const std::string& k) { c.generate.seed = parse_u64(v, k); }},
      // [model]
      {"model.layers", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.num_layers = parse_int(v, k); }},
      {"model.heads", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.num_heads = parse_int(v, k); }},
      {"model.token_size", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.d_token = parse_int(v, k); }},
      {"model.ffn_hidden", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.ffn_hidden = parse_int(v, k); }},
      {"model.head_hidden", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.head_hidden = parse_int(v, k); }},
      {"model.max_seq_len", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.max_seq_len = parse_int(v, k); }},
      // [train]
      {"train.epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.epochs = parse_int(v, k); }},
      {"train.batch_size", [](RunConfig& c, const std::string& v, const std::string& k) { c.batch_size = parse_int(v, k); }},
      {"train.obs_per_sequence", [](RunConfig& c, const std::string& v, const std::string& k) { c.obs_per_sequence = parse_int(v, k); }},
      {"train.query_per_sequence", [](RunConfig& c, const std::string& v, const std::string& k) { c.query_per_sequence = parse_int(v, k); }},
      {"train.learning_rate", [](RunConfig& c, const std::string& v, const std::string& k) { c.learning_rate = parse_double(v, k); }},
      {"train.seed", [](RunConfig& c, const std::string& v, const std::string& k) { c.seed = parse_u64(v, k); }},
      {"train.steps_per_epoch", [](RunConfig& c, const std::string& v, const std::string& k) { c.steps_per_epoch = parse_int(v, k); }},
      // [observe]
      {"observe.density", [](RunConfig& c, const std::string& v, const std::string& k) { c.density = parse_double(v, k); }},
      {"observe.noise_scale", [](RunConfig& c, const std::string& v, const std::string& k) { c.noise_scale = parse_double(v, k); }},
      {"observe.eval_obs_budget", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval_obs_budget = parse_int(v, k); }},
      {"observe.chunk", [](RunConfig& c, const std::string& v, const std::string& k) { c.chunk = parse_int(v, k); }},
      // [rbf]
      {"rbf.neighbors", [](RunConfig& c, const std::string& v, const std::string& k) { c.rbf.neighbors = parse_int(v, k); }},
      {"rbf.smoothing", [](RunConfig& c, const std::string& v, const std::string& k) { c.rbf.smoothing = parse_double(v, k); }},
      // [kriging]
      {"kriging.length_scale", [](RunConfig& c, const std::string& v, const std::string& k) { c.kriging.length_scale = parse_double(v, k); }},
      {"kriging.noise", [](RunConfig& c, const std::string& v, const std::string& k) { c.kriging.noise = parse_double(v, k); }},
      {"kriging.jitter", [](RunConfig& c, const std::string& v, const std::string& k) { c.kriging.jitter = parse_double(v, k); }},
      {"kriging.max_points", [](RunConfig& c, const std::string& v, const std::string& k) { c.kriging.max_points = parse_int(v, k); }},
      {"kriging.normalize_target", [](RunConfig& c, const std::string& v, const std::string& k) { c.kriging.normalize_target = parse_bool(v, k); }},
      // [gappy_pod]
      {"gappy_pod.energy_threshold", [](RunConfig& c, const std::string& v, const std::string& k) { c.gappy_pod.energy_threshold = parse_double(v, k); }},
      // [np]
      {"np.hidden", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.hidden = parse_int(v, k); }},
      {"np.cnp_encoder_layers", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.cnp_encoder_layers = parse_int(v, k); }},
      {"np.cnp_decoder_layers", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.cnp_decoder_layers = parse_int(v, k); }},
      {"np.tnp_layers", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.tnp_layers = parse_int(v, k); }},
      {"np.tnp_heads", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.tnp_heads = parse_int(v, k); }},
      {"np.learning_rate", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.learning_rate = static_cast<float>(parse_double(v, k)); }},
      {"np.weight_decay", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.weight_decay = static_cast<float>(parse_double(v, k)); }},
      {"np.batch_size", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.batch_size = parse_int(v, k); }},
      {"np.cnp_epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.cnp_epochs = parse_int(v, k); }},
      {"np.tnp_epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.tnp_epochs = parse_int(v, k); }},
      {"np.max_queries", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.max_queries_per_batch = parse_int(v, k); }},
      {"np.max_context", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.max_context_per_batch = parse_int(v, k); }},
      {"np.include_context_targets", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.include_context_as_targets = parse_bool(v, k); }},
      {"np.steps_per_epoch", [](RunConfig& c, const std::string& v, const std::string& k) { c.np.steps_per_epoch = parse_int(v, k); }},
      // [evaluate]
      {"evaluate.methods", [](RunConfig& c, const std::string& v, const std::string&) { c.methods = split_list(v); }},
      {"evaluate.checkpoint", [](RunConfig& c, const std::string& v, const std::string&) { c.checkpoint = v; }},
      {"evaluate.spectrum", [](RunConfig& c, const std::string& v, const std::string& k) { c.spectrum = parse_bool(v, k); }},
      {"evaluate.spectrum_grid", [](RunConfig& c, const std::string& v, const std::string& k) { c.spectrum_grid = parse_int(v, k); }},
      {"evaluate.dump_fields", [](RunConfig& c, const std::string& v, const std::string& k) { c.dump_fields = parse_bool(v, k); }},
      // [ablate]
      {"ablate.densities", [](RunConfig& c, const std::string& v, const std::string& k) { c.densities = parse_double_list(v, k); }},
      {"ablate.noise_scales", [](RunConfig& c, const std::string& v, const std::string& k) { c.noise_scales = parse_double_list(v, k); }},
      {"ablate.epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.ablate_epochs = parse_int(v, k); }},
      // [output]
      {"output.dir", [](RunConfig& c, const std::string& v, const std::string&) { c.out_dir = v; }},
  };
  return table;
}

}  // namespace

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? path_join(out_dir, "checkpoint.rck") : checkpoint;
}

void apply_config_text(RunConfig& cfg, const std::string& text,
                       const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = origin + ":" + std::to_string(line_no);
    const size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(where + ": key outside any [section]");
    const std::string full = section + "." + key;
    const auto it = setters().find(full);
    if (it == setters().end())
      throw ConfigError(where + ": unknown configuration key '" + full + "'");
    it->second(cfg, value, full);
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  apply_config_text(cfg, read_file(path), path);
  return cfg;
}

std::string config_to_text(const RunConfig& c) {
  std::ostringstream o;
  o << "[data]\n";
  o << "dir = " << c.data_dir << "\n";
  o << "train_fraction = " << format_double(c.train_fraction) << "\n";
  o << "\n[generate]\n";
  o << "snapshots = " << c.generate.num_snapshots << "\n";
  o << "points = " << c.generate.points_per_snapshot << "\n";
  o << "x_min = " << format_double(c.generate.x_min) << "\n";
  o << "x_max = " << format_double(c.generate.x_max) << "\n";
  o << "y_min = " << format_double(c.generate.y_min) << "\n";
  o << "y_max = " << format_double(c.generate.y_max) << "\n";
  o << "freestream = " << format_double(c.generate.freestream) << "\n";
  o << "circulation = " << format_double(c.generate.circulation) << "\n";
  o << "core_radius = " << format_double(c.generate.core_radius) << "\n";
  o << "spacing_x = " << format_double(c.generate.spacing_x) << "\n";
  o << "spacing_y = " << format_double(c.generate.spacing_y) << "\n";
  o << "advection = " << format_double(c.generate.advection_speed) << "\n";
  o << "dt = " << format_double(c.generate.dt) << "\n";
  o << "street_origin = " << format_double(c.generate.street_origin) << "\n";
  o << "pairs = " << c.generate.pairs << "\n";
  o << "window_pairs = " << c.generate.window_pairs << "\n";
  o << "shared_points = " << (c.generate.shared_points ? "true" : "false") << "\n";
  o << "seed = " << c.generate.seed << "\n";
  o << "\n[model]\n";
  o << "layers = " << c.model.num_layers << "\n";
  o << "heads = " << c.model.num_heads << "\n";
  o << "token_size = " << c.model.d_token << "\n";
  o << "ffn_hidden = " << c.model.ffn_hidden << "\n";
  o << "head_hidden = " << c.model.head_hidden << "\n";
  o << "max_seq_len = " << c.model.max_seq_len << "\n";
  o << "\n[train]\n";
  o << "epochs = " << c.epochs << "\n";
  o << "batch_size = " << c.batch_size << "\n";
  o << "obs_per_sequence = " << c.obs_per_sequence << "\n";
  o << "query_per_sequence = " << c.query_per_sequence << "\n";
  o << "learning_rate = " << format_double(c.learning_rate) << "\n";
  o << "seed = " << c.seed << "\n";
  o << "steps_per_epoch = " << c.steps_per_epoch << "\n";
  o << "\n[observe]\n";
  o << "density = " << format_double(c.density) << "\n";
  o << "noise_scale = " << format_double(c.noise_scale) << "\n";
  o << "eval_obs_budget = " << c.eval_obs_budget << "\n";
  o << "chunk = " << c.chunk << "\n";
  o << "\n[rbf]\n";
  o << "neighbors = " << c.rbf.neighbors << "\n";
  o << "smoothing = " << format_double(c.rbf.smoothing) << "\n";
  o << "\n[kriging]\n";
  o << "length_scale = " << format_double(c.kriging.length_scale) << "\n";
  o << "noise = " << format_double(c.kriging.noise) << "\n";
  o << "jitter = " << format_double(c.kriging.jitter) << "\n";
  o << "max_points = " << c.kriging.max_points << "\n";
  o << "normalize_target = " << (c.kriging.normalize_target ? "true" : "false") << "\n";
  o << "\n[gappy_pod]\n";
  o << "energy_threshold = " << format_double(c.gappy_pod.energy_threshold) << "\n";
  o << "\n[np]\n";
  o << "hidden = " << c.np.hidden << "\n";
  o << "cnp_encoder_layers = " << c.np.cnp_encoder_layers << "\n";
  o << "cnp_decoder_layers = " << c.np.cnp_decoder_layers << "\n";
  o << "tnp_layers = " << c.np.tnp_layers << "\n";
  o << "tnp_heads = " << c.np.tnp_heads << "\n";
  o << "learning_rate = " << format_double(c.np.learning_rate) << "\n";
  o << "weight_decay = " << format_double(c.np.weight_decay) << "\n";
  o << "batch_size = " << c.np.batch_size << "\n";
  o << "cnp_epochs = " << c.cnp_epochs << "\n";
  o << "tnp_epochs = " << c.tnp_epochs << "\n";
  o << "max_queries = " << c.np.max_queries_per_batch << "\n";
  o << "max_context = " << c.np.max_context_per_batch << "\n";
  o << "include_context_targets = "
    << (c.np.include_context_as_targets ? "true" : "false") << "\n";
  o << "steps_per_epoch = " << c.np.steps_per_epoch << "\n";
  o << "\n[evaluate]\n";
  o << "methods = ";
  for (size_t i = 0; i < c.methods.size(); ++i) o << (i ? "," : "") << c.methods[i];
  o << "\n";
  if (!c.checkpoint.empty()) o << "checkpoint = " << c.checkpoint << "\n";
  o << "spectrum = " << (c.spectrum ? "true" : "false") << "\n";
  o << "spectrum_grid = " << c.spectrum_grid << "\n";
  o << "dump_fields = " << (c.dump_fields ? "true" : "false") << "\n";
  o << "\n[ablate]\n";
  o << "densities = ";
  for (size_t i = 0; i < c.densities.size(); ++i)
    o << (i ? "," : "") << format_double(c.densities[i]);
  o << "\n";
  o << "noise_scales = ";
  for (size_t i = 0; i < c.noise_scales.size(); ++i)
    o << (i ? "," : "") << format_double(c.noise_scales[i]);
  o << "\n";
  o << "epochs = " << c.ablate_epochs << "\n";
  o << "\n[output]\n";
  o << "dir = " << c.out_dir << "\n";
  return o.str();
}

}  // namespace recon
