#pragma once

// Connectome subjects, k-NN graph formulation, local degree profile (LDP)
// node features, dataset I/O and the synthetic two-modality generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "connex/nn.hpp"
#include "connex/tensor.hpp"

namespace connex {

enum class Modality { Structural, Functional };

inline const char* modality_name(Modality m) { return m == Modality::Structural ? "sc" : "fnc"; }

inline Modality parse_modality(std::string_view s) {
  if (s == "sc") return Modality::Structural;
  if (s == "fnc") return Modality::Functional;
  throw ConfigError("unknown modality '" + std::string(s) + "' (expected sc or fnc)");
}

inline constexpr double kSymmetryTol = 1e-9;

struct Subject {
  std::string id;
  Tensor sc;   // structural, M x M
  Tensor fnc;  // functional, M x M
  int label = 0;  // 0 = HC, 1 = SZ

  const Tensor& matrix(Modality m) const { return m == Modality::Structural ? sc : fnc; }
};

using Dataset = std::vector<Subject>;

/// Throws LoadError unless `e` is square, finite and symmetric within 1e-9.
inline void validate_connectome(const Tensor& e, const std::string& what) {
  if (e.rank() != 2 || e.dim(0) != e.dim(1))
    throw LoadError(what + ": matrix is not square " + shape_str(e.shape()));
  const std::size_t m = e.dim(0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (!std::isfinite(e.at(i, j)))
        throw LoadError(what + ": non-finite entry at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (j > i && std::abs(e.at(i, j) - e.at(j, i)) > kSymmetryTol)
        throw LoadError(what + ": asymmetric entries at (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
}

// ---------------------------------------------------------------- graphs

struct ConnectomeGraph {
  std::size_t num_nodes = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // (i, j), i receives from j
  std::vector<double> weights;                             // E[i, j] per edge
  Tensor features;                                         // M x 5: Deg, Mean, Std, Min, Max
};

/// Directed top-k picks i -> j per row (largest E[i,j], j != i, ties to lower j).
inline std::vector<std::pair<std::size_t, std::size_t>> knn_picks(const Tensor& e, std::size_t k) {
  const std::size_t m = e.dim(0);
  if (k < 1 || k >= m)
    throw ConfigError("knn: k must satisfy 1 <= k < M (k=" + std::to_string(k) + ", M=" + std::to_string(m) + ")");
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::vector<std::size_t> order(m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) order[n++] = j;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double wa = e.at(i, a), wb = e.at(i, b);
                        return wa != wb ? wa > wb : a < b;
                      });
    for (std::size_t r = 0; r < k; ++r) picks.emplace_back(i, order[r]);
  }
  return picks;
}

/// k-NN sparsification: per-row top-k picks, symmetrised by union. Edges are
/// sorted lexicographically; weights are the original E[i, j].
inline ConnectomeGraph knn_sparsify(const Tensor& e, std::size_t k) {
  std::set<std::pair<std::size_t, std::size_t>> edge_set;
  for (auto [i, j] : knn_picks(e, k)) {
    edge_set.emplace(i, j);
    edge_set.emplace(j, i);
  }
  ConnectomeGraph g;
  g.num_nodes = e.dim(0);
  g.edges.assign(edge_set.begin(), edge_set.end());
  for (auto [i, j] : g.edges) g.weights.push_back(e.at(i, j));
  return g;
}

enum class LdpNeighborhood { OneHop, TwoHop };

/// LDP features [Deg, Mean, Std, Min, Max] of neighbour degrees. Std is the
/// population standard deviation; a node with no neighbours gets all zeros.
inline Tensor ldp_features(const ConnectomeGraph& g, LdpNeighborhood hood = LdpNeighborhood::OneHop) {
  const std::size_t m = g.num_nodes;
  std::vector<std::vector<std::size_t>> adj(m);
  for (auto [i, j] : g.edges)
    if (i != j) adj[i].push_back(j);
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  std::vector<double> deg(m);
  for (std::size_t q = 0; q < m; ++q) deg[q] = static_cast<double>(adj[q].size());

  Tensor f({m, 5});
  for (std::size_t q = 0; q < m; ++q) {
    std::vector<std::size_t> hood_nodes = adj[q];
    if (hood == LdpNeighborhood::TwoHop) {
      std::set<std::size_t> reach(adj[q].begin(), adj[q].end());
      for (std::size_t n : adj[q]) reach.insert(adj[n].begin(), adj[n].end());
      reach.erase(q);
      hood_nodes.assign(reach.begin(), reach.end());
    }
    f.at(q, 0) = deg[q];
    if (hood_nodes.empty()) continue;
    double mu = 0.0, lo = deg[hood_nodes[0]], hi = lo;
    for (std::size_t n : hood_nodes) {
      mu += deg[n];
      lo = std::min(lo, deg[n]);
      hi = std::max(hi, deg[n]);
    }
    mu /= static_cast<double>(hood_nodes.size());
    double var = 0.0;
    for (std::size_t n : hood_nodes) var += (deg[n] - mu) * (deg[n] - mu);
    var /= static_cast<double>(hood_nodes.size());
    f.at(q, 1) = mu;
    f.at(q, 2) = std::sqrt(var);
    f.at(q, 3) = lo;
    f.at(q, 4) = hi;
  }
  return f;
}

inline ConnectomeGraph build_graph(const Tensor& e, std::size_t k,
                                   LdpNeighborhood hood = LdpNeighborhood::OneHop) {
  ConnectomeGraph g = knn_sparsify(e, k);
  g.features = ldp_features(g, hood);
  return g;
}

// ---------------------------------------------------------------- CSV / manifest I/O

inline Tensor read_matrix_csv(const std::filesystem::path& path, const std::string& subject_id) {
  std::ifstream in(path);
  if (!in) throw LoadError("subject '" + subject_id + "': cannot open " + path.string());
  std::vector<double> values;
  std::size_t cols = 0, row = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t n = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str())
        throw LoadError("subject '" + subject_id + "': " + path.string() + " row " + std::to_string(row + 1) +
                        ": not a number '" + cell + "'");
      values.push_back(v);
      ++n;
    }
    if (row == 0) cols = n;
    if (n != cols)
      throw LoadError("subject '" + subject_id + "': " + path.string() + " row " + std::to_string(row + 1) +
                      " has " + std::to_string(n) + " columns, expected " + std::to_string(cols));
    ++row;
  }
  if (row == 0) throw LoadError("subject '" + subject_id + "': " + path.string() + " is empty");
  if (row != cols)
    throw LoadError("subject '" + subject_id + "': " + path.string() + " is " + std::to_string(row) + "x" +
                    std::to_string(cols) + ", not square");
  return Tensor({row, cols}, std::move(values));
}

/// 17 significant digits, so every double round-trips exactly.
inline void write_matrix_csv(const std::filesystem::path& path, const Tensor& e) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < e.dim(0); ++i) {
    for (std::size_t j = 0; j < e.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", e.at(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
}

/// Manifest: {"num_nodes": M, "subjects": [{"id", "sc_path", "fnc_path", "label"}]}.
/// Relative paths resolve against the manifest's directory. The diagonal of
/// every matrix is zeroed on load.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!j.contains("subjects") || !j["subjects"].is_array())
    throw LoadError("manifest " + manifest_path.string() + ": missing 'subjects' array");
  const auto base = manifest_path.parent_path();
  const std::size_t declared = j.value("num_nodes", std::size_t{0});
  Dataset ds;
  for (const auto& s : j["subjects"]) {
    Subject sub;
    sub.id = s.value("id", std::string{});
    if (sub.id.empty()) throw LoadError("manifest: subject without id");
    if (!s.contains("label") || !s["label"].is_number_integer())
      throw LoadError("subject '" + sub.id + "': label missing or not an integer");
    sub.label = s["label"].get<int>();
    if (sub.label != 0 && sub.label != 1)
      throw LoadError("subject '" + sub.id + "': label " + std::to_string(sub.label) + " outside {0,1}");
    for (const char* key : {"sc_path", "fnc_path"})
      if (!s.contains(key) || !s[key].is_string())
        throw LoadError("subject '" + sub.id + "': missing " + key);
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() ? path : base / path;
    };
    sub.sc = read_matrix_csv(resolve(s["sc_path"]), sub.id);
    sub.fnc = read_matrix_csv(resolve(s["fnc_path"]), sub.id);
    validate_connectome(sub.sc, "subject '" + sub.id + "' sc");
    validate_connectome(sub.fnc, "subject '" + sub.id + "' fnc");
    const std::size_t m = sub.sc.dim(0);
    if (sub.fnc.dim(0) != m || (declared && m != declared) || (!ds.empty() && ds.front().sc.dim(0) != m))
      throw LoadError("subject '" + sub.id + "': inconsistent node count " + std::to_string(m));
    for (std::size_t i = 0; i < m; ++i) sub.sc.at(i, i) = sub.fnc.at(i, i) = 0.0;
    ds.push_back(std::move(sub));
  }
  if (ds.empty()) throw LoadError("manifest " + manifest_path.string() + ": no subjects");
  return ds;
}

/// Writes <dir>/manifest.json and <dir>/matrices/<id>_{sc,fnc}.csv.
inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "matrices");
  nlohmann::json j;
  j["num_nodes"] = ds.empty() ? 0 : ds.front().sc.dim(0);
  j["subjects"] = nlohmann::json::array();
  for (const Subject& s : ds) {
    const std::string sc = "matrices/" + s.id + "_sc.csv";
    const std::string fnc = "matrices/" + s.id + "_fnc.csv";
    write_matrix_csv(dir / sc, s.sc);
    write_matrix_csv(dir / fnc, s.fnc);
    j["subjects"].push_back({{"id", s.id}, {"sc_path", sc}, {"fnc_path", fnc}, {"label", s.label}});
  }
  const auto path = dir / "manifest.json";
  std::ofstream(path) << j.dump(2) << '\n';
  return path;
}

// ---------------------------------------------------------------- synthetic data

using EdgeList = std::vector<std::pair<std::size_t, std::size_t>>;

struct SyntheticSpec {
  std::size_t num_subjects = 120;
  std::size_t num_nodes = 20;
  EdgeList planted_sc;
  EdgeList planted_fnc;
  double effect_size = 3.0;
  double noise_std = 1.0;
  double class_balance = 0.5;
  // Probability that a label-1 subject carries the planted effect in a given
  // modality, drawn independently per modality. Below 1 each modality alone
  // misses some patients, which leaves room for fusion to help.
  double expression_rate = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_subjects < 2) throw ConfigError("synthetic: num_subjects must be >= 2");
    if (num_nodes < 2) throw ConfigError("synthetic: num_nodes must be >= 2");
    if (!(effect_size > 0)) throw ConfigError("synthetic: effect_size must be > 0");
    if (!(noise_std > 0)) throw ConfigError("synthetic: noise_std must be > 0");
    if (!(class_balance > 0 && class_balance < 1)) throw ConfigError("synthetic: class_balance must be in (0,1)");
    if (!(expression_rate > 0 && expression_rate <= 1)) throw ConfigError("synthetic: expression_rate must be in (0,1]");
    for (const EdgeList* list : {&planted_sc, &planted_fnc})
      for (auto [i, j] : *list) {
        if (i == j) throw ConfigError("synthetic: planted edge on the diagonal");
        if (i >= num_nodes || j >= num_nodes) throw ConfigError("synthetic: planted edge out of range");
      }
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"num_subjects", s.num_subjects}, {"num_nodes", s.num_nodes},
                     {"planted_edges", {{"sc", s.planted_sc}, {"fnc", s.planted_fnc}}},
                     {"effect_size", s.effect_size}, {"noise_std", s.noise_std},
                     {"class_balance", s.class_balance}, {"expression_rate", s.expression_rate},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  static const std::set<std::string> known = {"num_subjects", "num_nodes", "planted_edges", "effect_size",
                                              "noise_std", "class_balance", "expression_rate", "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("synthetic spec: unknown key '" + key + "'");
  for (const char* key : {"num_subjects", "num_nodes", "planted_edges", "effect_size", "noise_std",
                          "class_balance", "seed"})
    if (!j.contains(key)) throw ConfigError(std::string("synthetic spec: missing '") + key + "'");
  s.num_subjects = j.at("num_subjects").get<std::size_t>();
  s.num_nodes = j.at("num_nodes").get<std::size_t>();
  s.planted_sc = j.at("planted_edges").at("sc").get<EdgeList>();
  s.planted_fnc = j.at("planted_edges").at("fnc").get<EdgeList>();
  s.effect_size = j.at("effect_size").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.class_balance = j.at("class_balance").get<double>();
  s.expression_rate = j.value("expression_rate", 1.0);
  s.seed = j.at("seed").get<std::uint64_t>();
}

/// Picks `per_modality` distinct upper-triangle pairs per modality, of which
/// `shared` are common to both.
inline SyntheticSpec make_synthetic_spec(std::size_t subjects, std::size_t nodes, std::size_t per_modality,
                                         std::size_t shared, double effect, double noise, double balance,
                                         double expression, std::uint64_t seed) {
  if (shared > per_modality) throw ConfigError("synthetic: shared planted edges exceed per-modality count");
  const std::size_t pairs = nodes * (nodes - 1) / 2;
  if (2 * per_modality - shared > pairs) throw ConfigError("synthetic: too many planted edges for M");
  EdgeList all;
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = i + 1; j < nodes; ++j) all.emplace_back(i, j);
  Rng rng(derive_seed(seed, "planted-edges"));
  std::shuffle(all.begin(), all.end(), rng);
  SyntheticSpec s;
  s.num_subjects = subjects;
  s.num_nodes = nodes;
  s.planted_sc.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(per_modality));
  s.planted_fnc.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(shared));
  s.planted_fnc.insert(s.planted_fnc.end(), all.begin() + static_cast<std::ptrdiff_t>(per_modality),
                       all.begin() + static_cast<std::ptrdiff_t>(2 * per_modality - shared));
  std::sort(s.planted_sc.begin(), s.planted_sc.end());
  std::sort(s.planted_fnc.begin(), s.planted_fnc.end());
  s.effect_size = effect;
  s.noise_std = noise;
  s.class_balance = balance;
  s.expression_rate = expression;
  s.seed = seed;
  return s;
}

/// Baseline matrices are |N(0, noise_std)| off the diagonal, mirrored. Label-1
/// subjects get +effect_size on the planted edges of a modality (subject to
/// expression_rate). Deterministic given the seed.
inline Dataset synthesize_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "synthesize"));
  const std::size_t positives = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(spec.class_balance * static_cast<double>(spec.num_subjects))), 1,
      spec.num_subjects - 1);
  std::vector<int> labels(spec.num_subjects, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::bernoulli_distribution express(spec.expression_rate);
  const std::size_t m = spec.num_nodes;
  auto baseline = [&] {
    Tensor e({m, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) e.at(i, j) = e.at(j, i) = std::abs(noise(rng));
    return e;
  };
  auto plant = [&](Tensor& e, const EdgeList& edges) {
    for (auto [i, j] : edges) {
      e.at(i, j) += spec.effect_size;
      e.at(j, i) = e.at(i, j);
    }
  };

  Dataset ds;
  const int width = static_cast<int>(std::to_string(spec.num_subjects).size());
  for (std::size_t n = 0; n < spec.num_subjects; ++n) {
    Subject s;
    char id[32];
    std::snprintf(id, sizeof id, "sub%0*zu", width, n);
    s.id = id;
    s.label = labels[n];
    s.sc = baseline();
    s.fnc = baseline();
    const bool sc_on = express(rng);
    const bool fnc_on = express(rng);
    if (s.label == 1) {
      if (sc_on) plant(s.sc, spec.planted_sc);
      if (fnc_on) plant(s.fnc, spec.planted_fnc);
    }
    ds.push_back(std::move(s));
  }
  return ds;
}

inline Dataset with_shuffled_labels(Dataset ds, std::uint64_t seed) {
  std::vector<int> labels;
  for (const auto& s : ds) labels.push_back(s.label);
  Rng rng(derive_seed(seed, "label-shuffle"));
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < ds.size(); ++i) ds[i].label = labels[i];
  return ds;
}

}  // namespace connex
