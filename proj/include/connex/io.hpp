#pragma once

// File formats: named-tensor checkpoints (JSON), mask CSV + sidecar, results
// tables and explanation reports (CSV / DOT).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "connex/backbone.hpp"
#include "connex/connectome.hpp"
#include "connex/explanation.hpp"
#include "connex/fusion.hpp"
#include "connex/training.hpp"

namespace connex {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "connex-checkpoint";

namespace detail {

inline std::string format_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
  if (!out) throw LoadError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path.string() + ": malformed JSON: " + e.what());
  }
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

// ---------------------------------------------------------------- checkpoints

struct Checkpoint {
  std::string kind;  // "backbone" or "fusion"
  nlohmann::json meta = nlohmann::json::object();
  ParamStore params;
  std::map<std::string, Tensor> extras;  // non-trainable tensors (e.g. standardizer statistics)
};

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", std::vector<std::size_t>(t.shape().begin(), t.shape().end())}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("values"))
    throw LoadError(what + ": tensor needs 'shape' and 'values'");
  const auto dims = j.at("shape").get<std::vector<std::size_t>>();
  if (dims.size() > Shape::kMaxRank) throw LoadError(what + ": rank " + std::to_string(dims.size()) + " is not supported");
  const Shape shape(dims);
  std::vector<double> values = j.at("values").get<std::vector<double>>();
  if (shape.empty() || shape_size(shape) != values.size())
    throw LoadError(what + ": shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                    " values");
  return Tensor(shape, std::move(values));
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : ck.params.items()) tensors[name] = tensor_to_json(t);
  nlohmann::json extras = nlohmann::json::object();
  for (const auto& [name, t] : ck.extras) extras[name] = tensor_to_json(t);
  const nlohmann::json j = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"kind", ck.kind},
                            {"meta", ck.meta}, {"tensors", tensors}, {"extras", extras}};
  detail::write_text(path, detail::dump(j));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const nlohmann::json j = detail::read_json(path);
  const std::string where = path.string();
  if (j.value("format", "") != kCheckpointFormat) throw LoadError(where + ": not a checkpoint file");
  if (j.value("version", -1) != kCheckpointVersion)
    throw LoadError(where + ": unsupported checkpoint version " + j.value("version", nlohmann::json()).dump());
  Checkpoint ck;
  ck.kind = j.at("kind").get<std::string>();
  ck.meta = j.value("meta", nlohmann::json::object());
  for (const auto& [name, t] : j.at("tensors").items()) ck.params.add(name, tensor_from_json(t, where + ":" + name));
  if (j.contains("extras"))
    for (const auto& [name, t] : j.at("extras").items()) ck.extras.emplace(name, tensor_from_json(t, where + ":" + name));
  return ck;
}

/// Every tensor in `expected` must be present with the same shape, and no
/// unexpected tensors may appear.
inline void validate_params(const ParamStore& got, const ParamStore& expected, const std::string& where) {
  for (const auto& [name, t] : expected.items()) {
    if (!got.contains(name)) throw LoadError(where + ": missing tensor '" + name + "'");
    if (got.get(name).shape() != t.shape())
      throw LoadError(where + ": tensor '" + name + "' has shape " + shape_str(got.get(name).shape()) + ", config expects " +
                      shape_str(t.shape()));
  }
  for (const auto& [name, _] : got.items())
    if (!expected.contains(name)) throw LoadError(where + ": unexpected tensor '" + name + "'");
}

inline nlohmann::json backbone_meta(const BackboneConfig& cfg, Modality mod) {
  return {{"modality", modality_name(mod)}, {"layers", cfg.layers}, {"channels", cfg.channels},
          {"node_norm", cfg.node_norm}, {"input_width", kLdpWidth}};
}

inline void save_backbone(const std::filesystem::path& path, const ParamStore& params, const BackboneConfig& cfg,
                          Modality mod) {
  save_checkpoint(path, {"backbone", backbone_meta(cfg, mod), params, {}});
}

/// Loads a backbone and checks it against `cfg` (and `mod`).
inline ParamStore load_backbone(const std::filesystem::path& path, const BackboneConfig& cfg, Modality mod) {
  Checkpoint ck = load_checkpoint(path);
  const std::string where = path.string();
  if (ck.kind != "backbone") throw LoadError(where + ": expected a backbone checkpoint, found '" + ck.kind + "'");
  const nlohmann::json want = backbone_meta(cfg, mod);
  for (const auto& [key, v] : want.items())
    if (ck.meta.value(key, nlohmann::json()) != v)
      throw LoadError(where + ": meta '" + key + "' is " + ck.meta.value(key, nlohmann::json()).dump() + ", config has " +
                      v.dump());
  Rng rng(0);
  validate_params(ck.params, init_backbone(cfg, rng), where);
  return ck.params;
}

struct FusionModel {
  FusionConfig config;
  ParamStore params;
  Standardizer sc, fnc;  // identity when standardisation is off
};

inline nlohmann::json fusion_meta(const FusionConfig& cfg) {
  std::vector<std::string> order;
  for (std::size_t v = 0; v < cfg.views(); ++v) order.emplace_back(kViewNames[v]);
  return {{"method", fusion_method_name(cfg.method)},
          {"unified", cfg.unified},
          {"S", cfg.batch},
          {"T", cfg.tokens},
          {"model_dim", cfg.model_dim},
          {"heads", cfg.heads},
          {"channels", cfg.channels},
          {"concat_order", order}};
}

inline void save_fusion(const std::filesystem::path& path, const FusionModel& m) {
  Checkpoint ck{"fusion", fusion_meta(m.config), m.params, {}};
  ck.extras.emplace("standardize.sc.mean", Tensor::vector(m.sc.mean));
  ck.extras.emplace("standardize.sc.inv_std", Tensor::vector(m.sc.inv_std));
  ck.extras.emplace("standardize.fnc.mean", Tensor::vector(m.fnc.mean));
  ck.extras.emplace("standardize.fnc.inv_std", Tensor::vector(m.fnc.inv_std));
  save_checkpoint(path, ck);
}

/// Rebuilds the fusion config from the file metadata, then validates tensor
/// shapes against a fresh initialisation of that config.
inline FusionModel load_fusion(const std::filesystem::path& path, const FusionConfig& base) {
  Checkpoint ck = load_checkpoint(path);
  const std::string where = path.string();
  if (ck.kind != "fusion") throw LoadError(where + ": expected a fusion checkpoint, found '" + ck.kind + "'");
  FusionModel m;
  m.config = base;
  try {
    m.config.method = parse_fusion_method(ck.meta.at("method").get<std::string>());
    m.config.unified = ck.meta.at("unified").get<bool>();
    m.config.batch = ck.meta.at("S").get<std::size_t>();
    m.config.tokens = ck.meta.at("T").get<std::size_t>();
    m.config.model_dim = ck.meta.at("model_dim").get<std::size_t>();
    m.config.heads = ck.meta.at("heads").get<std::size_t>();
    m.config.channels = ck.meta.at("channels").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + ": bad fusion metadata: " + e.what());
  }
  m.config.validate();
  if (ck.meta.value("concat_order", nlohmann::json()) != fusion_meta(m.config).at("concat_order"))
    throw LoadError(where + ": concat_order does not match the view layout");
  validate_params(ck.params, init_fusion(m.config), where);
  m.params = std::move(ck.params);
  auto stat = [&](const std::string& name) {
    auto it = ck.extras.find(name);
    if (it == ck.extras.end()) throw LoadError(where + ": missing '" + name + "'");
    if (it->second.shape() != Shape{m.config.channels}) throw LoadError(where + ": '" + name + "' has the wrong shape");
    const auto v = it->second.values();
    return std::vector<double>(v.begin(), v.end());
  };
  m.sc = {stat("standardize.sc.mean"), stat("standardize.sc.inv_std")};
  m.fnc = {stat("standardize.fnc.mean"), stat("standardize.fnc.inv_std")};
  return m;
}

// ---------------------------------------------------------------- masks

struct MaskRecord {
  GlobalEdgeMask mask;
  std::uint64_t seed = 0;
  double lambda1 = 0.0;  // sparsity
  double lambda2 = 0.0;  // entropy
  std::size_t steps = 0;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p += ".json";
  return p;
}

/// Writes Y (pre-sigmoid, full M x M) and the `<path>.json` sidecar.
inline void save_mask(const std::filesystem::path& path, const MaskRecord& r) {
  write_matrix_csv(path, r.mask.full());
  const nlohmann::json side = {{"modality", modality_name(r.mask.modality)}, {"seed", r.seed},
                               {"lambda1", r.lambda1}, {"lambda2", r.lambda2}, {"steps", r.steps}};
  detail::write_text(sidecar_path(path), detail::dump(side));
}

inline MaskRecord load_mask(const std::filesystem::path& path) {
  const nlohmann::json side = detail::read_json(sidecar_path(path));
  MaskRecord r;
  try {
    const Modality mod = parse_modality(side.at("modality").get<std::string>());
    r.mask = GlobalEdgeMask::from_full(read_matrix_csv(path, "mask"), mod);
    r.seed = side.at("seed").get<std::uint64_t>();
    r.lambda1 = side.at("lambda1").get<double>();
    r.lambda2 = side.at("lambda2").get<double>();
    r.steps = side.at("steps").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(sidecar_path(path).string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < r.mask.num_nodes; ++i)
    if (read_matrix_csv(path, "mask").at(i, i) != kMaskDiagonal)
      throw LoadError(path.string() + ": diagonal logits must be " + detail::format_double("%g", kMaskDiagonal));
  return r;
}

// ---------------------------------------------------------------- results

inline const char* kResultsHeader = "config,accuracy_mean,accuracy_std,precision_mean,precision_std,f1_mean,f1_std";

inline std::string results_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const MetricsRow& r : rows) {
    out += r.config;
    for (double v : {r.accuracy_mean, r.accuracy_std, r.precision_mean, r.precision_std, r.f1_mean, r.f1_std})
      out += "," + detail::format_double("%.2f", v);
    out += "\n";
  }
  return out;
}

inline void write_results_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  detail::write_text(path, results_csv(rows));
}

// ---------------------------------------------------------------- reports

inline void write_report_csv(const std::filesystem::path& path, const ExplanationReport& rep) {
  std::string out = "node_i,node_j,normalized_weight\n";
  for (const RankedEdge& e : rep.edges)
    out += std::to_string(e.i) + "," + std::to_string(e.j) + "," + detail::format_double("%.6f", e.weight) + "\n";
  detail::write_text(path, out);
}

/// One group name per node, in node order.
using NetworkLabels = std::vector<std::string>;

/// "name" per line; blank lines and lines starting with '#' are skipped.
inline NetworkLabels read_network_labels(const std::filesystem::path& path) {
  std::istringstream in(detail::read_text(path));
  NetworkLabels out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

inline std::string edge_group(const NetworkLabels& labels, std::size_t i, std::size_t j) {
  for (std::size_t n : {i, j})
    if (n >= labels.size() || labels[n].empty())
      throw ConfigError("network labels: node " + std::to_string(n) + " has no group");
  return labels[i] == labels[j] ? labels[i] : "inter";
}

struct ConnectivityFiles {
  std::string csv;
  std::string dot;
};

/// Plot-ready edge data. Edges inside one network carry that network's name,
/// the rest "inter"; the weight attribute drives line width downstream.
inline ConnectivityFiles connectivity_data(const ExplanationReport& rep, const NetworkLabels& labels) {
  ConnectivityFiles f;
  f.csv = "node_i,node_j,normalized_weight,group\n";
  f.dot = std::string("graph ") + group_name(rep.group) + " {\n";
  for (const RankedEdge& e : rep.edges) {
    const std::string g = edge_group(labels, e.i, e.j);
    const std::string w = detail::format_double("%.6f", e.weight);
    f.csv += std::to_string(e.i) + "," + std::to_string(e.j) + "," + w + "," + g + "\n";
    f.dot += "  n" + std::to_string(e.i) + " -- n" + std::to_string(e.j) + " [weight=" + w + ", group=\"" + g + "\"];\n";
  }
  f.dot += "}\n";
  return f;
}

inline void emit_connectivity_data(const ExplanationReport& rep, const NetworkLabels& labels,
                                   const std::filesystem::path& csv_path, const std::filesystem::path& dot_path) {
  const ConnectivityFiles f = connectivity_data(rep, labels);
  detail::write_text(csv_path, f.csv);
  detail::write_text(dot_path, f.dot);
}

/// Labels used when none are supplied: every node in one group "all".
inline NetworkLabels single_group_labels(std::size_t m) { return NetworkLabels(m, "all"); }

}  // namespace connex
