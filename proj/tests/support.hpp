#pragma once

// Shared by the unit tests and the acceptance runner: brute-force oracles and
// gradient checks of the composite blocks (inputs and parameters together).

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "connex/backbone.hpp"
#include "connex/connectome.hpp"
#include "connex/fusion.hpp"
#include "connex/gradcheck.hpp"
#include "connex/training.hpp"

namespace connex::testing {

// ---------------------------------------------------------------- oracles

inline Tensor random_symmetric(std::size_t m, std::mt19937_64& rng, bool integer_weights = false) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> small(0, 4);  // many ties
  Tensor e({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) e.at(i, j) = e.at(j, i) = integer_weights ? small(rng) : u(rng);
  return e;
}

/// Full sort per row, then union with reverses; returns edge -> weight.
inline std::map<std::pair<std::size_t, std::size_t>, double> knn_oracle(const Tensor& e, std::size_t k) {
  const std::size_t m = e.dim(0);
  std::map<std::pair<std::size_t, std::size_t>, double> out;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<std::pair<double, std::size_t>> row;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) row.emplace_back(-e.at(i, j), j);
    std::sort(row.begin(), row.end());
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t j = row[r].second;
      out[{i, j}] = e.at(i, j);
      out[{j, i}] = e.at(j, i);
    }
  }
  return out;
}

/// LDP from an adjacency matrix, one or two hops.
inline std::vector<std::array<double, 5>> ldp_oracle(std::size_t m, const std::set<std::pair<std::size_t, std::size_t>>& edges,
                                                     bool two_hop = false) {
  std::vector<std::vector<int>> a(m, std::vector<int>(m, 0));
  for (auto [i, j] : edges)
    if (i != j) a[i][j] = 1;
  std::vector<double> deg(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) deg[i] += a[i][j];
  std::vector<std::array<double, 5>> out(m, {0, 0, 0, 0, 0});
  for (std::size_t q = 0; q < m; ++q) {
    std::vector<double> hood;
    for (std::size_t n = 0; n < m; ++n) {
      if (n == q) continue;
      bool in = a[q][n] == 1;
      if (two_hop)
        for (std::size_t via = 0; via < m && !in; ++via) in = a[q][via] && a[via][n];
      if (in) hood.push_back(deg[n]);
    }
    out[q][0] = deg[q];
    if (hood.empty()) continue;
    double s = 0.0;
    for (double d : hood) s += d;
    const double mu = s / static_cast<double>(hood.size());
    double v = 0.0;
    for (double d : hood) v += (d - mu) * (d - mu);
    out[q][1] = mu;
    out[q][2] = std::sqrt(v / static_cast<double>(hood.size()));
    out[q][3] = *std::min_element(hood.begin(), hood.end());
    out[q][4] = *std::max_element(hood.begin(), hood.end());
  }
  return out;
}

struct ConfusionOracle {
  double accuracy, precision, f1;
};

inline ConfusionOracle metrics_oracle(const std::vector<int>& pred, const std::vector<int>& label) {
  int tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && label[i] == 1) ++tp;
    else if (pred[i] == 1 && label[i] == 0) ++fp;
    else if (pred[i] == 0 && label[i] == 1) ++fn;
    else ++tn;
  }
  const double p = tp + fp ? double(tp) / (tp + fp) : 0.0;
  const double r = tp + fn ? double(tp) / (tp + fn) : 0.0;
  return {double(tp + tn) / pred.size(), p, p + r > 0 ? 2 * p * r / (p + r) : 0.0};
}

// ---------------------------------------------------------------- block grad checks

/// Gradient check with every tensor of `store` treated as an input next to
/// `extra`; `f` receives the bound parameters and the extra inputs.
template <class F>
double grad_check_block(const ParamStore& store, const std::vector<Tensor>& extra, F f, std::uint64_t seed) {
  std::vector<std::string> names;
  std::vector<Tensor> inputs = extra;
  for (const auto& [name, t] : store.items()) {
    names.push_back(name);
    inputs.push_back(t);
  }
  const std::size_t n_extra = extra.size();
  return grad_check(
      [&](ad::Tape& tape, const std::vector<ad::Var>& v) {
        Bound p;
        for (std::size_t i = 0; i < names.size(); ++i) p.insert(names[i], v[n_extra + i]);
        return f(tape, p, std::vector<ad::Var>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n_extra)));
      },
      inputs, seed);
}

/// Small random graph batch: `graphs` graphs of `m` nodes, k-NN with k=2.
inline GraphBatch random_batch(std::size_t graphs, std::size_t m, std::mt19937_64& rng,
                               std::vector<ConnectomeGraph>* keep) {
  keep->clear();
  for (std::size_t g = 0; g < graphs; ++g) keep->push_back(build_graph(random_symmetric(m, rng), 2));
  std::vector<const ConnectomeGraph*> ptrs;
  for (const auto& g : *keep) ptrs.push_back(&g);
  return make_batch(ptrs);
}

/// rggcn_layer (first layer, with input projection, node norm and dropout).
inline double check_rggcn_layer(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BackboneConfig cfg;
  cfg.layers = 1;
  cfg.channels = 4;
  Rng init(seed);
  ParamStore full = init_backbone(cfg, init);
  ParamStore store;
  for (const auto& [name, t] : full.items())
    if (name.rfind("head", 0) != 0) store.add(name, t);
  std::vector<ConnectomeGraph> graphs;
  const GraphBatch b = random_batch(2, 5, rng, &graphs);
  const Tensor x = random_tensor({b.nodes, kLdpWidth}, rng);
  const Tensor w = Tensor::vector(b.weights);
  return grad_check_block(store, {x, w}, [&](ad::Tape&, const Bound& p, const std::vector<ad::Var>& in) {
    Rng drop(seed);
    return rggcn_layer(p, 0, in[0], b, in[1], 0.3, true, drop);
  }, seed);
}

inline double check_mixer_layer(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Rng init(seed);
  ParamStore store;
  add_mixer(store, "m", 4, 6, init);
  for (const char* ln : {"m.ln1", "m.ln2"}) {
    store.get(std::string(ln) + ".gamma") = random_tensor({6}, rng);
    store.get(std::string(ln) + ".beta") = random_tensor({6}, rng);
  }
  return grad_check_block(store, {random_tensor({4, 6}, rng)},
                          [](ad::Tape&, const Bound& p, const std::vector<ad::Var>& in) {
                            return mixer_layer(p, "m", in[0]);
                          }, seed);
}

inline double check_self_attention_encoder(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Rng init(seed);
  ParamStore store;
  add_encoder(store, "enc", 8, init);
  return grad_check_block(store, {random_tensor({2 * 3, 8}, rng)},
                          [](ad::Tape&, const Bound& p, const std::vector<ad::Var>& in) {
                            return self_attention_encoder(p, "enc", in[0], 2, 3, 4);
                          }, seed);
}

inline double check_cross_attention(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Rng init(seed);
  ParamStore store;
  add_cross_attention(store, "x", 6, init);
  return grad_check_block(store, {random_tensor({2 * 3, 6}, rng), random_tensor({2 * 3, 6}, rng)},
                          [](ad::Tape&, const Bound& p, const std::vector<ad::Var>& in) {
                            return cross_attention(p, "x", in[0], in[1], 2, 3);
                          }, seed);
}

/// Miniature ConneX (S=4, C=8) through the joint loss.
inline FusionConfig miniature_fusion(std::uint64_t seed, bool unified = true) {
  FusionConfig cfg;
  cfg.batch = 4;
  cfg.channels = 8;
  cfg.tokens = 2;
  cfg.model_dim = 3;
  cfg.heads = 3;
  cfg.unified = unified;
  cfg.seed = seed;
  return cfg;
}

inline double check_connex_forward(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const FusionConfig cfg = miniature_fusion(seed);
  const ParamStore store = init_fusion(cfg);
  const std::vector<int> labels = {1, 0, 1, 1};
  Tensor valid({4}, 1.0);
  valid[3] = 0.0;  // one padded row
  const std::vector<double> w = LossWeights{}.for_heads(cfg.num_heads());
  return grad_check_block(store, {random_tensor({4, 8}, rng), random_tensor({4, 8}, rng)},
                          [&](ad::Tape& tape, const Bound& p, const std::vector<ad::Var>& in) {
                            Rng unused(seed);
                            const FusionOutputs out = fusion_forward(p, cfg, tape, in[0], in[1], valid, false, unused);
                            return joint_loss(out.logits, w, labels, valid);
                          }, seed);
}

inline double check_joint_loss(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> logits;
  for (int h = 0; h < 4; ++h) logits.push_back(random_tensor({5, 2}, rng));
  std::vector<int> labels(5);
  std::bernoulli_distribution coin(0.5);
  for (int& y : labels) y = coin(rng);
  Tensor valid({5}, 1.0);
  valid[4] = 0.0;
  return grad_check([&](ad::Tape&, const std::vector<ad::Var>& v) {
    return joint_loss(v[0], v[1], v[2], v[3], labels, LossWeights{}, valid);
  }, logits, seed);
}

}  // namespace connex::testing
