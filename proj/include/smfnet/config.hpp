#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "smfnet/losses.hpp"
#include "smfnet/net/model.hpp"

namespace smfnet {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// All training-time settings, grouped into [model], [loss] and [train]
/// sections of the config file.
struct TrainConfig {
  // [model]
  int channels = 64;
  int heads = 8;
  int ffn_expansion = 2;
  bool use_graph = true;
  int graph_scales = 3;
  int message_rounds = 1;
  std::string aggregate = "add";  // add | concat
  bool swap_fusion_layers = false;
  bool cai_cross_attention = true;
  bool bfe_residual = true;
  int bfe_groups = 2;
  int bfe_blocks = 2;
  int detail_fusion_layers = 2;

  // [loss]
  double alpha1 = 2.0;
  double beta1 = 8.0;
  double beta2 = 10.0;
  double alpha2 = 10.0;
  double alpha3 = 2.0;
  double delta = 1.01;
  bool use_semantic = true;
  bool stage1_cc_graph = false;
  bool stage2_cc_graph = true;

  // [train]
  double lr = 1e-4;
  int batch_size = 6;
  int patch_size = 128;
  int patch_stride = 128;
  int epochs_stage1 = 40;
  int epochs_stage2 = 80;
  std::uint64_t seed = 7;
  double clip_norm = 5.0;
  bool joint = false;  // single-stage joint training

  ModelConfig model_config() const {
    ModelConfig m = ModelConfig::defaults(channels, heads);
    m.ffn_expansion = ffn_expansion;
    m.bfe.ffn_expansion = ffn_expansion;
    m.use_graph = use_graph;
    m.gr.scales = graph_scales;
    m.gr.message_rounds = message_rounds;
    m.aggregate = aggregate == "concat" ? AggregateMode::Concat : AggregateMode::Add;
    m.swap_fusion_layers = swap_fusion_layers;
    m.cai.cross_attention = cai_cross_attention;
    m.bfe.residual = bfe_residual;
    m.bfe.groups = bfe_groups;
    m.bfe.blocks_per_residual_group = bfe_blocks;
    m.detail_fusion.layers = detail_fusion_layers;
    return m;
  }

  LossWeights loss_weights() const {
    LossWeights w;
    w.alpha1 = alpha1;
    w.beta1 = beta1;
    w.beta2 = beta2;
    w.alpha2 = alpha2;
    w.alpha3 = alpha3;
    w.delta = delta;
    return w;
  }

  LossOptions loss_options() const {
    LossOptions o;
    o.use_semantic = use_semantic;
    o.stage1_cc_graph = stage1_cc_graph;
    o.stage2_cc_graph = stage2_cc_graph;
    return o;
  }

  /// Shrinks everything so the full two-stage pipeline runs in seconds.
  void apply_toy() {
    channels = 16;
    heads = 4;
    patch_size = 16;
    patch_stride = 16;
    batch_size = 4;
    epochs_stage1 = 2;
    epochs_stage2 = 2;
    lr = 1e-3;
  }

  void validate() const {
    if (aggregate != "add" && aggregate != "concat")
      throw ConfigError("model.aggregate must be 'add' or 'concat', got '" + aggregate + "'");
    if (channels < 2 || channels % 2 != 0) throw ConfigError("model.channels must be even and >= 2");
    if (channels % heads != 0) throw ConfigError("model.channels must be divisible by model.heads");
    if (graph_scales < 1) throw ConfigError("model.graph_scales must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (patch_size < 8) throw ConfigError("train.patch_size must be >= 8");
    if (lr <= 0) throw ConfigError("train.lr must be positive");
    loss_weights().validate();
    ModelConfig m = model_config();
    if (patch_size % m.size_multiple() != 0)
      throw ConfigError("train.patch_size must be a multiple of " +
                        std::to_string(m.size_multiple()));
  }
};

namespace config_detail {

using FieldPtr = std::variant<int TrainConfig::*, double TrainConfig::*, bool TrainConfig::*,
                              std::string TrainConfig::*, std::uint64_t TrainConfig::*>;

struct Field {
  const char* section;
  const char* key;
  FieldPtr ptr;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"model", "channels", &TrainConfig::channels},
      {"model", "heads", &TrainConfig::heads},
      {"model", "ffn_expansion", &TrainConfig::ffn_expansion},
      {"model", "use_graph", &TrainConfig::use_graph},
      {"model", "graph_scales", &TrainConfig::graph_scales},
      {"model", "message_rounds", &TrainConfig::message_rounds},
      {"model", "aggregate", &TrainConfig::aggregate},
      {"model", "swap_fusion_layers", &TrainConfig::swap_fusion_layers},
      {"model", "cai_cross_attention", &TrainConfig::cai_cross_attention},
      {"model", "bfe_residual", &TrainConfig::bfe_residual},
      {"model", "bfe_groups", &TrainConfig::bfe_groups},
      {"model", "bfe_blocks", &TrainConfig::bfe_blocks},
      {"model", "detail_fusion_layers", &TrainConfig::detail_fusion_layers},
      {"loss", "alpha1", &TrainConfig::alpha1},
      {"loss", "beta1", &TrainConfig::beta1},
      {"loss", "beta2", &TrainConfig::beta2},
      {"loss", "alpha2", &TrainConfig::alpha2},
      {"loss", "alpha3", &TrainConfig::alpha3},
      {"loss", "delta", &TrainConfig::delta},
      {"loss", "use_semantic", &TrainConfig::use_semantic},
      {"loss", "stage1_cc_graph", &TrainConfig::stage1_cc_graph},
      {"loss", "stage2_cc_graph", &TrainConfig::stage2_cc_graph},
      {"train", "lr", &TrainConfig::lr},
      {"train", "batch_size", &TrainConfig::batch_size},
      {"train", "patch_size", &TrainConfig::patch_size},
      {"train", "patch_stride", &TrainConfig::patch_stride},
      {"train", "epochs_stage1", &TrainConfig::epochs_stage1},
      {"train", "epochs_stage2", &TrainConfig::epochs_stage2},
      {"train", "seed", &TrainConfig::seed},
      {"train", "clip_norm", &TrainConfig::clip_norm},
      {"train", "joint", &TrainConfig::joint},
  };
  return f;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + v + "'");
}

inline std::string known_keys(const std::string& section) {
  std::ostringstream os;
  bool first = true;
  for (auto& f : fields()) {
    if (section == f.section) {
      os << (first ? "" : ", ") << f.key;
      first = false;
    }
  }
  if (first) {  // unknown section: list the sections instead
    return "model, loss, train (sections)";
  }
  return os.str();
}

inline void assign(TrainConfig& cfg, const std::string& section, const std::string& key,
                   const std::string& value) {
  for (auto& f : fields()) {
    if (section != f.section || key != f.key) continue;
    std::string where = section + "." + key;
    try {
      std::visit(
          [&](auto ptr) {
            using M = std::remove_cvref_t<decltype(cfg.*ptr)>;
            if constexpr (std::is_same_v<M, std::string>)
              cfg.*ptr = value;
            else if constexpr (std::is_same_v<M, bool>)
              cfg.*ptr = parse_bool(value, where);
            else if constexpr (std::is_same_v<M, int>)
              cfg.*ptr = std::stoi(value);
            else if constexpr (std::is_same_v<M, std::uint64_t>)
              cfg.*ptr = std::stoull(value);
            else
              cfg.*ptr = std::stod(value);
          },
          f.ptr);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(where + ": cannot parse value '" + value + "'");
    }
    return;
  }
  throw ConfigError("unknown key '" + section + "." + key + "'; known keys in [" + section +
                    "]: " + known_keys(section));
}

}  // namespace config_detail

/// Parses sectioned key=value text ('[section]' headers, '#' comments).
/// Unknown keys are rejected with the list of keys the section accepts.
inline void parse_config(const std::string& text, TrainConfig& cfg) {
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "loss" && section != "train")
        throw ConfigError("unknown section [" + section + "]; known sections: model, loss, train");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    std::string key = config_detail::trim(line.substr(0, eq));
    std::string value = config_detail::trim(line.substr(eq + 1));
    if (section.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' appears before any [section]");
    config_detail::assign(cfg, section, key, value);
  }
}

inline TrainConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  TrainConfig cfg;
  parse_config(ss.str(), cfg);
  return cfg;
}

/// Applies a 'section.key=value' command-line override.
inline void apply_override(TrainConfig& cfg, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + spec);
  std::string path = config_detail::trim(spec.substr(0, eq));
  std::string value = config_detail::trim(spec.substr(eq + 1));
  auto dot = path.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must be section.key: " + path);
  config_detail::assign(cfg, path.substr(0, dot), path.substr(dot + 1), value);
}

/// Named structural/loss variants used by the ablation study.
inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> n = {"AE1",  "AE2",  "AE3",  "AE4",  "AE5",  "AE6", "AE7",
                                             "AE8",  "AE9",  "AE10", "AE11", "AE12", "AE13"};
  return n;
}

inline void apply_ablation(TrainConfig& cfg, const std::string& name) {
  if (name == "AE1")
    cfg.cai_cross_attention = false;
  else if (name == "AE2")
    cfg.bfe_residual = false;
  else if (name == "AE3")
    cfg.use_graph = false;
  else if (name == "AE4")
    cfg.aggregate = "concat";
  else if (name == "AE5")
    cfg.swap_fusion_layers = true;
  else if (name == "AE6")
    cfg.use_semantic = false;
  else if (name == "AE7")
    cfg.stage2_cc_graph = false;
  else if (name == "AE8")
    cfg.stage1_cc_graph = true;
  else if (name == "AE9")
    cfg.joint = true;
  else if (name == "AE10")
    cfg.alpha1 = cfg.alpha3 = 1.0;
  else if (name == "AE11")
    cfg.alpha1 = cfg.alpha3 = 5.0;
  else if (name == "AE12")
    cfg.alpha1 = cfg.alpha3 = 8.0;
  else if (name == "AE13")
    cfg.alpha1 = cfg.alpha3 = 10.0;
  else {
    std::string known;
    for (auto& n : ablation_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation '" + name + "'; known: " + known);
  }
}

/// Round-trips the full configuration (used in checkpoint manifests).
inline std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  std::string current;
  for (auto& f : config_detail::fields()) {
    if (current != f.section) {
      current = f.section;
      os << "[" << current << "]\n";
    }
    os << f.key << " = ";
    std::visit(
        [&](auto ptr) {
          using M = std::remove_cvref_t<decltype(cfg.*ptr)>;
          if constexpr (std::is_same_v<M, bool>)
            os << (cfg.*ptr ? "true" : "false");
          else
            os << cfg.*ptr;
        },
        f.ptr);
    os << "\n";
  }
  return os.str();
}

}  // namespace smfnet
