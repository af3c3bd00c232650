#pragma once

// Pipeline configuration as versioned JSON. Every key is optional and falls
// back to the default below; unknown keys are rejected at every level.
//
//   {
//     "version": 1,
//     "seed": 1,                       // root of every stage substream
//     "folds": 5,
//     "output_dir": ".",               // relative output paths resolve here
//     "data": {"manifest": null, "synthetic": null},   // exactly one when a stage needs data
//     "graph": {"k": 5, "ldp": "one-hop"},
//     "backbone": {"layers": 5, "channels": 32, "dropout": 0.6, "lr": 0.001, "epochs": 300,
//                  "patience": 30, "batch_size": 16, "node_norm": true},
//     "mask": {"lambda_sparsity": 0.005, "lambda_entropy": 0.1, "lr": 0.001, "steps": 200, "init_std": 0.1},
//     "finetune": {"lr": 0.0005, "epochs": 200},
//     "fusion": {"method": "ConneX", "unified": true, "batch": 8, "tokens": 8, "model_dim": 16,
//                "heads": 4, "dropout": 0.0, "lr": 0.0001, "epochs": 300},
//     "loss": {"alpha": 0.15, "beta": 0.15, "gamma": 0.15, "phi": 0.55, "grid_search": false},
//     "standardize": false,
//     "ablation": {"methods": ["Concat", "Cross-Att", "ConneX"], "unified": [false, true]}
//   }
//
// Precedence: defaults < config file < `--set path=value` overrides < dedicated CLI flags.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "connex/connectome.hpp"
#include "connex/io.hpp"
#include "connex/training.hpp"

namespace connex {

inline constexpr int kConfigVersion = 1;

struct PipelineConfig {
  PipelineSettings settings;
  std::optional<std::filesystem::path> manifest;
  std::optional<SyntheticSpec> synthetic;
  std::filesystem::path output_dir = ".";
  std::vector<FusionMethod> ablation_methods = {FusionMethod::Concat, FusionMethod::CrossAtt, FusionMethod::ConneX};
  std::vector<bool> ablation_unified = {false, true};

  std::vector<FusionVariant> variants() const {
    std::vector<FusionVariant> out;
    for (bool u : ablation_unified)
      for (FusionMethod m : ablation_methods) out.push_back({m, u});
    return out;
  }

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : output_dir / p;
  }
};

inline const char* ldp_name(LdpNeighborhood h) { return h == LdpNeighborhood::OneHop ? "one-hop" : "two-hop"; }

inline LdpNeighborhood parse_ldp(std::string_view s) {
  if (s == "one-hop") return LdpNeighborhood::OneHop;
  if (s == "two-hop") return LdpNeighborhood::TwoHop;
  throw ConfigError("unknown ldp neighbourhood '" + std::string(s) + "' (expected one-hop or two-hop)");
}

namespace detail {

/// Reads the keys of one JSON object and rejects anything it was not asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      const auto& v = j_.at(key);
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && !v.is_number_unsigned()))
        throw ConfigError("config: '" + where(key) + "' must be a non-negative integer (got " + v.dump() + ")");
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + (path_.empty() ? key : path_ + "." + key) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require_positive(std::size_t v, const std::string& what) {
  if (v == 0) throw ConfigError("config: '" + what + "' must be positive");
}

}  // namespace detail

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  const PipelineSettings& s = c.settings;
  nlohmann::json methods = nlohmann::json::array();
  for (FusionMethod m : c.ablation_methods) methods.push_back(fusion_method_name(m));
  nlohmann::json data = {{"manifest", nullptr}, {"synthetic", nullptr}};
  if (c.manifest) data["manifest"] = c.manifest->string();
  if (c.synthetic) data["synthetic"] = *c.synthetic;
  return {
      {"version", kConfigVersion},
      {"seed", s.seed},
      {"folds", s.folds},
      {"output_dir", c.output_dir.string()},
      {"data", data},
      {"graph", {{"k", s.graph.k}, {"ldp", ldp_name(s.graph.ldp)}}},
      {"backbone",
       {{"layers", s.backbone.layers}, {"channels", s.backbone.channels}, {"dropout", s.backbone.dropout},
        {"lr", s.backbone.lr}, {"epochs", s.backbone.epochs}, {"patience", s.backbone.patience},
        {"batch_size", s.backbone.batch_size}, {"node_norm", s.backbone.node_norm}}},
      {"mask",
       {{"lambda_sparsity", s.mask.lambda_sparsity}, {"lambda_entropy", s.mask.lambda_entropy}, {"lr", s.mask.lr},
        {"steps", s.mask.steps}, {"init_std", s.mask.init_std}}},
      {"finetune", {{"lr", s.finetune.lr}, {"epochs", s.finetune.epochs}}},
      {"fusion",
       {{"method", fusion_method_name(s.fusion.method)}, {"unified", s.fusion.unified}, {"batch", s.fusion.batch},
        {"tokens", s.fusion.tokens}, {"model_dim", s.fusion.model_dim}, {"heads", s.fusion.heads},
        {"dropout", s.fusion.dropout}, {"lr", s.fusion.lr}, {"epochs", s.fusion.epochs}}},
      {"loss",
       {{"alpha", s.loss.alpha}, {"beta", s.loss.beta}, {"gamma", s.loss.gamma}, {"phi", s.loss.phi},
        {"grid_search", s.loss_grid}}},
      {"standardize", s.standardize},
      {"ablation", {{"methods", methods}, {"unified", c.ablation_unified}}},
  };
}

/// `base_dir` anchors a relative data.manifest (normally the config file's directory).
inline PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  PipelineConfig c;
  PipelineSettings& s = c.settings;
  detail::Section root(j, "");
  int version = kConfigVersion;
  root.read("version", version);
  if (version != kConfigVersion)
    throw ConfigError("config: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  root.read("seed", s.seed);
  root.read("folds", s.folds);
  std::string out_dir = c.output_dir.string();
  root.read("output_dir", out_dir);
  c.output_dir = out_dir;
  root.read("standardize", s.standardize);

  if (root.has("data")) {
    detail::Section d(root.at("data"), "data");
    if (d.has("manifest")) {
      std::string m;
      d.read("manifest", m);
      c.manifest = base_dir.empty() || std::filesystem::path(m).is_absolute() ? std::filesystem::path(m) : base_dir / m;
    }
    if (d.has("synthetic")) {
      SyntheticSpec spec;
      from_json(d.at("synthetic"), spec);
      spec.validate();
      c.synthetic = spec;
    }
    d.finish();
    if (c.manifest && c.synthetic) throw ConfigError("config: set only one of data.manifest and data.synthetic");
  }
  if (root.has("graph")) {
    detail::Section g(root.at("graph"), "graph");
    g.read("k", s.graph.k);
    std::string ldp = ldp_name(s.graph.ldp);
    g.read("ldp", ldp);
    s.graph.ldp = parse_ldp(ldp);
    g.finish();
  }
  if (root.has("backbone")) {
    detail::Section b(root.at("backbone"), "backbone");
    b.read("layers", s.backbone.layers);
    b.read("channels", s.backbone.channels);
    b.read("dropout", s.backbone.dropout);
    b.read("lr", s.backbone.lr);
    b.read("epochs", s.backbone.epochs);
    b.read("patience", s.backbone.patience);
    b.read("batch_size", s.backbone.batch_size);
    b.read("node_norm", s.backbone.node_norm);
    b.finish();
  }
  if (root.has("mask")) {
    detail::Section m(root.at("mask"), "mask");
    m.read("lambda_sparsity", s.mask.lambda_sparsity);
    m.read("lambda_entropy", s.mask.lambda_entropy);
    m.read("lr", s.mask.lr);
    m.read("steps", s.mask.steps);
    m.read("init_std", s.mask.init_std);
    m.finish();
  }
  if (root.has("finetune")) {
    detail::Section f(root.at("finetune"), "finetune");
    f.read("lr", s.finetune.lr);
    f.read("epochs", s.finetune.epochs);
    f.finish();
  }
  if (root.has("fusion")) {
    detail::Section f(root.at("fusion"), "fusion");
    std::string method = fusion_method_name(s.fusion.method);
    f.read("method", method);
    s.fusion.method = parse_fusion_method(method);
    f.read("unified", s.fusion.unified);
    f.read("batch", s.fusion.batch);
    f.read("tokens", s.fusion.tokens);
    f.read("model_dim", s.fusion.model_dim);
    f.read("heads", s.fusion.heads);
    f.read("dropout", s.fusion.dropout);
    f.read("lr", s.fusion.lr);
    f.read("epochs", s.fusion.epochs);
    f.finish();
  }
  if (root.has("loss")) {
    detail::Section l(root.at("loss"), "loss");
    l.read("alpha", s.loss.alpha);
    l.read("beta", s.loss.beta);
    l.read("gamma", s.loss.gamma);
    l.read("phi", s.loss.phi);
    l.read("grid_search", s.loss_grid);
    l.finish();
  }
  if (root.has("ablation")) {
    detail::Section a(root.at("ablation"), "ablation");
    if (a.has("methods")) {
      std::vector<std::string> names;
      a.read("methods", names);
      c.ablation_methods.clear();
      for (const auto& n : names) c.ablation_methods.push_back(parse_fusion_method(n));
    }
    a.read("unified", c.ablation_unified);
    a.finish();
  }
  root.finish();

  s.fusion.channels = s.backbone.channels;
  detail::require_positive(s.folds, "folds");
  detail::require_positive(s.graph.k, "graph.k");
  detail::require_positive(s.backbone.layers, "backbone.layers");
  detail::require_positive(s.backbone.channels, "backbone.channels");
  detail::require_positive(s.backbone.batch_size, "backbone.batch_size");
  if (s.folds < 2) throw ConfigError("config: 'folds' must be at least 2");
  if (!(s.backbone.dropout >= 0 && s.backbone.dropout < 1)) throw ConfigError("config: 'backbone.dropout' must be in [0,1)");
  if (!(s.fusion.dropout >= 0 && s.fusion.dropout < 1)) throw ConfigError("config: 'fusion.dropout' must be in [0,1)");
  for (double lr : {s.backbone.lr, s.mask.lr, s.finetune.lr, s.fusion.lr})
    if (!(lr > 0)) throw ConfigError("config: learning rates must be positive");
  if (!(s.mask.lambda_sparsity >= 0 && s.mask.lambda_entropy >= 0))
    throw ConfigError("config: mask lambdas must be non-negative");
  if (c.ablation_methods.empty() || c.ablation_unified.empty()) throw ConfigError("config: ablation lists must be non-empty");
  s.fusion.validate();
  s.loss.validate();
  return c;
}

/// Sets `dotted.path` inside `j` to `value`, parsed as JSON when it parses
/// and kept as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = path.empty() ? nlohmann::json::object() : detail::read_json(path);
  // A reproducibility record carries its config snapshot under "config".
  if (j.contains("record_version") && j.contains("config")) j = j.at("config");
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j, path.empty() ? std::filesystem::path() : path.parent_path());
}

/// Subjects named by the config: the manifest, or the synthetic spec generated in memory.
inline Dataset config_dataset(const PipelineConfig& c) {
  if (c.manifest) return load_dataset(*c.manifest);
  if (c.synthetic) return synthesize_dataset(*c.synthetic);
  throw ConfigError("config: no dataset (set data.manifest or data.synthetic, or pass --dataset)");
}

}  // namespace connex
