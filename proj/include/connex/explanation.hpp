#pragma once

// Globally shared edge masks: one learnable symmetric M x M logit matrix Y per
// modality, applied to every subject as E' = E (.) sigmoid(Y).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "connex/autodiff.hpp"
#include "connex/backbone.hpp"
#include "connex/connectome.hpp"
#include "connex/nn.hpp"

namespace connex {

inline constexpr double kMaskDiagonal = -30.0;

/// Y is stored as its strict upper triangle; the diagonal is fixed at -30.
struct GlobalEdgeMask {
  std::size_t num_nodes = 0;
  Tensor upper;  // M(M-1)/2 logits, pair_index order
  Modality modality = Modality::Structural;

  static GlobalEdgeMask constant(std::size_t m, double logit, Modality mod = Modality::Structural) {
    return {m, Tensor({m * (m - 1) / 2}, logit), mod};
  }

  double logit(std::size_t i, std::size_t j) const {
    return i == j ? kMaskDiagonal : upper[pair_index(i, j, num_nodes)];
  }

  Tensor full() const {
    Tensor y({num_nodes, num_nodes});
    for (std::size_t i = 0; i < num_nodes; ++i)
      for (std::size_t j = 0; j < num_nodes; ++j) y.at(i, j) = logit(i, j);
    return y;
  }

  /// From a full M x M matrix; reads the upper triangle and requires symmetry.
  static GlobalEdgeMask from_full(const Tensor& y, Modality mod) {
    validate_connectome(y, "mask");
    const std::size_t m = y.dim(0);
    GlobalEdgeMask mask{m, Tensor({m * (m - 1) / 2}), mod};
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) mask.upper[pair_index(i, j, m)] = y.at(i, j);
    return mask;
  }
};

struct MaskConfig {
  double lambda_sparsity = 0.005;
  double lambda_entropy = 0.1;
  double lr = 1e-3;
  std::size_t steps = 200;  // passes over the training graphs
  double init_std = 0.1;
  std::uint64_t seed = 1;
};

/// E'[i,j] = E[i,j] * sigmoid(Y[i,j]).
inline Tensor apply_mask(const Tensor& e, const GlobalEdgeMask& mask) {
  if (e.rank() != 2 || e.dim(0) != mask.num_nodes || e.dim(1) != mask.num_nodes)
    throw ShapeError("apply_mask: matrix " + shape_str(e.shape()) + " vs mask of " +
                     std::to_string(mask.num_nodes) + " nodes");
  Tensor out(e.shape());
  for (std::size_t i = 0; i < mask.num_nodes; ++i)
    for (std::size_t j = 0; j < mask.num_nodes; ++j)
      out.at(i, j) = e.at(i, j) * ad::sigmoid_value(mask.logit(i, j));
  return out;
}

/// Reweights the retained edges of an already-sparsified graph; topology and
/// LDP features are unchanged.
inline ConnectomeGraph apply_mask(const ConnectomeGraph& g, const GlobalEdgeMask& mask) {
  if (g.num_nodes != mask.num_nodes) throw ShapeError("apply_mask: graph/mask node count mismatch");
  ConnectomeGraph out = g;
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    out.weights[e] *= ad::sigmoid_value(mask.logit(g.edges[e].first, g.edges[e].second));
  return out;
}

inline std::vector<ConnectomeGraph> apply_mask(const std::vector<ConnectomeGraph>& graphs,
                                               const GlobalEdgeMask& mask) {
  std::vector<ConnectomeGraph> out;
  out.reserve(graphs.size());
  for (const auto& g : graphs) out.push_back(apply_mask(g, mask));
  return out;
}

inline GlobalEdgeMask init_mask(std::size_t m, Modality mod, const MaskConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "mask-init"));
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  GlobalEdgeMask mask = GlobalEdgeMask::constant(m, 0.0, mod);
  for (double& v : mask.upper.values()) v = normal(rng);
  return mask;
}

struct MaskResult {
  GlobalEdgeMask mask;
  std::vector<double> loss_trace;
};

/// Learns Y by minimising, over the training graphs,
///   CE(masked-graph class distribution, original-graph distribution)
///   + lambda_sparsity * mean(sigmoid(Y)) + lambda_entropy * mean(H(sigmoid(Y)))
/// through a frozen backbone. Both means run over the M(M-1)/2 free entries.
inline MaskResult learn_global_mask(const std::vector<ConnectomeGraph>& graphs, const ParamStore& backbone,
                                    const BackboneConfig& bcfg, Modality mod, const MaskConfig& cfg) {
  using namespace ad;
  if (!backbone.frozen())
    throw StateError("learn_global_mask: backbone parameters must be frozen");
  if (graphs.empty()) throw ConfigError("learn_global_mask: no graphs");
  const std::size_t m = graphs.front().num_nodes;

  // Soft targets: the frozen backbone's predictions on the original graphs.
  const Embeddings original = embed_graphs(graphs, backbone, bcfg);
  Tensor targets({graphs.size(), 2});
  for (std::size_t n = 0; n < graphs.size(); ++n) {
    const double a = original.logits.at(n, 0), b = original.logits.at(n, 1);
    const double p1 = sigmoid_value(b - a);
    targets.at(n, 0) = 1.0 - p1;
    targets.at(n, 1) = p1;
  }

  MaskResult res{init_mask(m, mod, cfg), {}};
  ParamStore y;
  y.add("mask", res.mask.upper);
  Adam adam(AdamConfig{cfg.lr});
  Rng rng(derive_seed(cfg.seed, "mask-train"));
  std::vector<std::size_t> order(graphs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + bcfg.batch_size);
      std::vector<const ConnectomeGraph*> part;
      Tensor t({end - start, 2});
      for (std::size_t i = start; i < end; ++i) {
        part.push_back(&graphs[order[i]]);
        t.at(i - start, 0) = targets.at(order[i], 0);
        t.at(i - start, 1) = targets.at(order[i], 1);
      }
      const GraphBatch b = make_batch(part);
      Tape tape;
      const Bound p = backbone.bind(tape);
      Var logits = tape.leaf("mask", y.get("mask"));
      Var weights = b.weights.empty()
                        ? tape.constant(Tensor({1}, 0.0))
                        : mul(tape.constant(Tensor::vector(b.weights)), sigmoid(gather_rows(logits, b.pair)));
      auto out = backbone_forward(p, bcfg, b, weights, false, rng);
      Var agreement = cross_entropy(out.logits, t, Tensor({end - start}, 1.0));
      Var s = sigmoid(logits);
      Var entropy = add(mul(s, softplus(scale(logits, -1.0))), mul(sigmoid(scale(logits, -1.0)), softplus(logits)));
      Var loss = add(agreement, add(scale(mean_all(s), cfg.lambda_sparsity), scale(mean_all(entropy), cfg.lambda_entropy)));
      total += loss.value().item() * static_cast<double>(end - start);
      adam.step(y, tape.backward(loss));
    }
    res.loss_trace.push_back(total / static_cast<double>(order.size()));
  }
  res.mask.upper = y.get("mask");
  return res;
}

/// Upper-triangle pairs ranked by sigmoid(Y), descending (ties to lower pair index).
inline EdgeList rank_mask_edges(const GlobalEdgeMask& mask) {
  const std::size_t m = mask.num_nodes;
  std::vector<std::size_t> order(mask.upper.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mask.upper[a] > mask.upper[b]; });
  std::vector<std::pair<std::size_t, std::size_t>> pair_of(mask.upper.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) pair_of[pair_index(i, j, m)] = {i, j};
  EdgeList out;
  for (std::size_t idx : order) out.push_back(pair_of[idx]);
  return out;
}

struct FinetuneConfig {
  double lr = 5e-4;
  std::size_t epochs = 200;
};

/// Continues supervised training of `params` on mask-applied graphs.
inline TrainResult finetune_backbone(const std::vector<ConnectomeGraph>& graphs, const std::vector<int>& labels,
                                     const GlobalEdgeMask& mask, const ParamStore& params,
                                     const BackboneConfig& bcfg, const FinetuneConfig& fcfg) {
  BackboneConfig cfg = bcfg;
  cfg.lr = fcfg.lr;
  cfg.epochs = fcfg.epochs;
  cfg.seed = derive_seed(bcfg.seed, "finetune");
  if (fcfg.epochs == 0) return {params, {}};
  return train_backbone(apply_mask(graphs, mask), labels, cfg, &params);
}

// ---------------------------------------------------------------- group reports

enum class Group { HC = 0, SZ = 1 };

inline const char* group_name(Group g) { return g == Group::HC ? "HC" : "SZ"; }

inline Group parse_group(std::string_view s) {
  if (s == "HC") return Group::HC;
  if (s == "SZ") return Group::SZ;
  throw ConfigError("unknown group '" + std::string(s) + "' (expected HC or SZ)");
}

struct RankedEdge {
  std::size_t i = 0, j = 0;
  double weight = 0.0;
};

struct ExplanationReport {
  Group group = Group::SZ;
  std::vector<RankedEdge> edges;  // descending weight, normalised to [0, 1] by the max
};

/// Group-level connections: average the masked matrices of the group,
/// normalise by the largest entry and return the top n upper-triangle pairs.
inline ExplanationReport top_connections(const Dataset& ds, Modality mod, const GlobalEdgeMask& mask, Group group,
                                         std::size_t n = 100) {
  const std::size_t m = mask.num_nodes;
  Tensor avg({m, m});
  std::size_t members = 0;
  for (const Subject& s : ds) {
    if (s.label != static_cast<int>(group)) continue;
    const Tensor masked = apply_mask(s.matrix(mod), mask);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += masked[i];
    ++members;
  }
  if (members == 0) throw ConfigError(std::string("top_connections: group ") + group_name(group) + " is empty");
  double mx = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) mx = std::max(mx, avg.at(i, j) / static_cast<double>(members));
  std::vector<RankedEdge> all;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double w = avg.at(i, j) / static_cast<double>(members);
      all.push_back({i, j, mx > 0 ? w / mx : 0.0});
    }
  std::stable_sort(all.begin(), all.end(), [](const RankedEdge& a, const RankedEdge& b) { return a.weight > b.weight; });
  all.resize(std::min(all.size(), n));
  return {group, std::move(all)};
}

/// Size of the intersection between the first |truth| entries of `ranked` and `truth`.
inline std::size_t top_overlap(const EdgeList& ranked, const EdgeList& truth) {
  std::set<std::pair<std::size_t, std::size_t>> want;
  for (auto [i, j] : truth) want.emplace(std::min(i, j), std::max(i, j));
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(ranked.size(), truth.size()); ++r)
    hits += want.count({std::min(ranked[r].first, ranked[r].second), std::max(ranked[r].first, ranked[r].second)});
  return hits;
}

}  // namespace connex
