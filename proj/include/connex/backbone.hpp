#pragma once

// Residual gated graph convolution backbone with global average pooling.
//
// Layer update for node i with neighbours j ((i, j) in the sparsified graph):
//   eta_ij = sigmoid(W3 x_i + W4 x_j)
//   x_i'   = rho(x_i) + ReLU(N(W1 x_i + sum_j e_ij * eta_ij (.) W2 x_j))
// where e_ij is the retained edge weight, rho is a learned linear map on the
// first layer (input width 5 -> C) and the identity afterwards, and N is a
// per-node layer norm (identity when BackboneConfig::node_norm is off). Dropout
// follows the activation in training mode.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "connex/autodiff.hpp"
#include "connex/connectome.hpp"
#include "connex/nn.hpp"

namespace connex {

inline constexpr std::size_t kLdpWidth = 5;

struct BackboneConfig {
  std::size_t layers = 5;
  std::size_t channels = 32;
  double dropout = 0.6;
  double lr = 1e-3;
  std::size_t epochs = 300;
  std::size_t patience = 30;  // early stop after this many epochs without a new best loss; 0 disables
  std::size_t batch_size = 16;
  bool node_norm = true;
  std::uint64_t seed = 1;
};

inline std::string layer_name(std::size_t l, const char* w) { return "layer" + std::to_string(l) + "." + w; }

inline ParamStore init_backbone(const BackboneConfig& cfg, Rng& rng) {
  if (cfg.layers == 0 || cfg.channels == 0) throw ConfigError("backbone: layers and channels must be > 0");
  ParamStore p;
  add_linear(p, "proj", kLdpWidth, cfg.channels, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? kLdpWidth : cfg.channels;
    for (const char* w : {"w1", "w2", "w3", "w4"})
      p.add(layer_name(l, w), glorot_uniform({in, cfg.channels}, in, cfg.channels, rng));
    if (cfg.node_norm) add_layer_norm(p, layer_name(l, "norm"), cfg.channels);
  }
  add_linear(p, "head", cfg.channels, 2, rng);
  return p;
}

/// Several graphs stacked into one disconnected graph.
struct GraphBatch {
  std::size_t graphs = 0;
  std::size_t nodes = 0;
  Tensor features;                // nodes x 5
  std::vector<std::size_t> dst;   // receiving node i, global index
  std::vector<std::size_t> src;   // sending node j, global index
  std::vector<double> weights;    // e_ij
  std::vector<std::size_t> pair;  // upper-triangle pair index of (i, j) within its graph
  std::vector<std::size_t> node_graph;
  Tensor inv_node_count;          // per-node 1/|nodes of its graph|
};

inline std::size_t pair_index(std::size_t i, std::size_t j, std::size_t m) {
  if (i > j) std::swap(i, j);
  return i * m - i * (i + 1) / 2 + (j - i - 1);
}

inline GraphBatch make_batch(const std::vector<const ConnectomeGraph*>& graphs) {
  if (graphs.empty()) throw ConfigError("make_batch: no graphs");
  GraphBatch b;
  b.graphs = graphs.size();
  for (const auto* g : graphs) b.nodes += g->num_nodes;
  b.features = Tensor({b.nodes, kLdpWidth});
  b.inv_node_count = Tensor({b.nodes});
  std::size_t offset = 0;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const ConnectomeGraph& g = *graphs[gi];
    if (g.features.rank() != 2 || g.features.dim(0) != g.num_nodes || g.features.dim(1) != kLdpWidth)
      throw ShapeError("make_batch: graph " + std::to_string(gi) + " lacks M x 5 LDP features");
    std::copy(g.features.values().begin(), g.features.values().end(),
              b.features.values().begin() + static_cast<std::ptrdiff_t>(offset * kLdpWidth));
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      auto [i, j] = g.edges[e];
      b.dst.push_back(offset + i);
      b.src.push_back(offset + j);
      b.weights.push_back(g.weights[e]);
      b.pair.push_back(pair_index(i, j, g.num_nodes));
    }
    for (std::size_t n = 0; n < g.num_nodes; ++n) {
      b.node_graph.push_back(gi);
      b.inv_node_count[offset + n] = 1.0 / static_cast<double>(g.num_nodes);
    }
    offset += g.num_nodes;
  }
  return b;
}

/// Gated message aggregation, fused for speed:
///   out[i] = sum over edges (i <- j) of w_e * sigmoid(a[i] + b[j]) (.) v[j]
/// a, b, v are node-level [N x C]; w holds one weight per edge.
inline ad::Var gated_aggregate(const ad::Var& a, const ad::Var& b, const ad::Var& v, const ad::Var& w,
                               const std::vector<std::size_t>& dst, const std::vector<std::size_t>& src) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Tensor& V = v.value();
  const Tensor& W = w.value();
  if (A.rank() != 2 || B.shape() != A.shape() || V.shape() != A.shape())
    throw ShapeError("gated_aggregate: node operands must share shape, got " + shape_str(A.shape()) + ", " +
                     shape_str(B.shape()) + ", " + shape_str(V.shape()));
  if (W.rank() != 1 || W.dim(0) != dst.size() || src.size() != dst.size())
    throw ShapeError("gated_aggregate: need one weight per edge");
  const std::size_t n = A.dim(0), c = A.dim(1), edges = dst.size();
  Tensor out({n, c});
  Tensor gates({edges, c});
  for (std::size_t e = 0; e < edges; ++e) {
    const std::size_t i = dst[e], j = src[e];
    if (i >= n || j >= n) throw ShapeError("gated_aggregate: edge endpoint out of range");
    const double* ai = A.values().data() + i * c;
    const double* bj = B.values().data() + j * c;
    const double* vj = V.values().data() + j * c;
    double* oi = out.values().data() + i * c;
    double* ge = gates.values().data() + e * c;
    for (std::size_t k = 0; k < c; ++k) {
      ge[k] = ad::sigmoid_value(ai[k] + bj[k]);
      oi[k] += W[e] * ge[k] * vj[k];
    }
  }
  return a.tape().record("gated_aggregate", std::move(out), {a, b, v, w},
                         [a, b, v, w, dst, src, gates = std::move(gates), c](ad::Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_slot(a);
    Tensor* gb = t.grad_slot(b);
    Tensor* gv = t.grad_slot(v);
    Tensor* gw = t.grad_slot(w);
    const Tensor& V = v.value();
    const Tensor& W = w.value();
    for (std::size_t e = 0; e < dst.size(); ++e) {
      const std::size_t i = dst[e], j = src[e];
      const double* gi = g.values().data() + i * c;
      const double* vj = V.values().data() + j * c;
      const double* ge = gates.values().data() + e * c;
      double dw = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double up = gi[k];
        if (gv) (*gv)[j * c + k] += up * W[e] * ge[k];
        const double dpre = up * W[e] * vj[k] * ge[k] * (1.0 - ge[k]);
        if (ga) (*ga)[i * c + k] += dpre;
        if (gb) (*gb)[j * c + k] += dpre;
        dw += up * ge[k] * vj[k];
      }
      if (gw) (*gw)[e] += dw;
    }
  });
}

inline ad::Var rggcn_layer(const Bound& p, std::size_t l, const ad::Var& x, const GraphBatch& b,
                           const ad::Var& edge_weights, double drop_p, bool train, Rng& rng) {
  using namespace ad;
  const Var& w1 = p[layer_name(l, "w1")];
  if (x.dim(1) != w1.dim(0))
    throw ShapeError("rggcn_layer: feature width " + std::to_string(x.dim(1)) + " != layer input width " +
                     std::to_string(w1.dim(0)));
  Var h = matmul(x, w1);
  if (!b.dst.empty())
    h = add(h, gated_aggregate(matmul(x, p[layer_name(l, "w3")]), matmul(x, p[layer_name(l, "w4")]),
                               matmul(x, p[layer_name(l, "w2")]), edge_weights, b.dst, b.src));
  if (p.contains(layer_name(l, "norm.gamma"))) h = apply_layer_norm(p, layer_name(l, "norm"), h);
  h = dropout(relu(h), drop_p, train, rng);
  Var residual = l == 0 ? apply_linear(p, "proj", x) : x;
  if (residual.dim(1) != h.dim(1)) throw ShapeError("rggcn_layer: residual width mismatch");
  return add(residual, h);
}

struct BackboneOutput {
  ad::Var embedding;  // graphs x C
  ad::Var logits;     // graphs x 2
};

/// Forward pass with explicit (possibly mask-dependent) edge weights.
inline BackboneOutput backbone_forward(const Bound& p, const BackboneConfig& cfg, const GraphBatch& b,
                                       const ad::Var& edge_weights, bool train, Rng& rng) {
  using namespace ad;
  Tape& tape = edge_weights.tape();
  Var x = tape.constant(b.features);
  for (std::size_t l = 0; l < cfg.layers; ++l) x = rggcn_layer(p, l, x, b, edge_weights, cfg.dropout, train, rng);
  Var pooled = scatter_sum(scale_rows(x, tape.constant(b.inv_node_count)), b.node_graph, b.graphs);
  return {pooled, apply_linear(p, "head", pooled)};
}

inline BackboneOutput backbone_forward(const Bound& p, const BackboneConfig& cfg, const GraphBatch& b,
                                       ad::Tape& tape, bool train, Rng& rng) {
  const std::size_t edges = std::max<std::size_t>(b.weights.size(), 1);
  std::vector<double> w = b.weights;
  w.resize(edges, 0.0);
  return backbone_forward(p, cfg, b, tape.constant(Tensor({edges}, std::move(w))), train, rng);
}

struct Embeddings {
  Tensor embedding;  // N x C
  Tensor logits;     // N x 2
};

/// Eval-mode embeddings and logits for every graph, in order.
inline Embeddings embed_graphs(const std::vector<ConnectomeGraph>& graphs, const ParamStore& params,
                               const BackboneConfig& cfg) {
  Embeddings out{Tensor({graphs.size(), cfg.channels}), Tensor({graphs.size(), 2})};
  Rng unused(0);
  const std::size_t chunk = std::max<std::size_t>(cfg.batch_size, 1);
  for (std::size_t start = 0; start < graphs.size(); start += chunk) {
    std::vector<const ConnectomeGraph*> part;
    for (std::size_t i = start; i < std::min(graphs.size(), start + chunk); ++i) part.push_back(&graphs[i]);
    ad::Tape tape;
    ParamStore frozen = params;
    frozen.freeze();
    const GraphBatch b = make_batch(part);
    auto res = backbone_forward(frozen.bind(tape), cfg, b, tape, false, unused);
    std::copy(res.embedding.value().values().begin(), res.embedding.value().values().end(),
              out.embedding.values().begin() + static_cast<std::ptrdiff_t>(start * cfg.channels));
    std::copy(res.logits.value().values().begin(), res.logits.value().values().end(),
              out.logits.values().begin() + static_cast<std::ptrdiff_t>(start * 2));
  }
  return out;
}

struct TrainResult {
  ParamStore params;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Supervised training with cross-entropy on hard labels. Starts from `init`
/// when given, otherwise from a fresh initialisation seeded by cfg.seed.
inline TrainResult train_backbone(const std::vector<ConnectomeGraph>& graphs, const std::vector<int>& labels,
                                  const BackboneConfig& cfg, const ParamStore* init = nullptr) {
  if (graphs.empty() || graphs.size() != labels.size())
    throw ConfigError("train_backbone: need one label per graph and at least one graph");
  const bool has0 = std::count(labels.begin(), labels.end(), 0) > 0;
  const bool has1 = std::count(labels.begin(), labels.end(), 1) > 0;
  if (!has0 || !has1) throw ConfigError("train_backbone: training set contains a single class");

  Rng rng(derive_seed(cfg.seed, "backbone-train"));
  TrainResult res;
  if (init) {
    res.params = *init;
    res.params.unfreeze();
  } else {
    Rng init_rng(derive_seed(cfg.seed, "backbone-init"));
    res.params = init_backbone(cfg, init_rng);
  }
  Adam adam(AdamConfig{cfg.lr});
  std::vector<std::size_t> order(graphs.size());
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const ConnectomeGraph*> part;
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        part.push_back(&graphs[order[i]]);
        y.push_back(labels[order[i]]);
      }
      ad::Tape tape;
      const Bound p = res.params.bind(tape);
      const GraphBatch b = make_batch(part);
      auto out = backbone_forward(p, cfg, b, tape, true, rng);
      ad::Var loss = ad::cross_entropy(out.logits, ad::one_hot(y, 2), Tensor({y.size()}, 1.0));
      total += loss.value().item() * static_cast<double>(y.size());
      adam.step(res.params, tape.backward(loss));
    }
    const double epoch_loss = total / static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) throw NumericError("train_backbone: non-finite loss at epoch " + std::to_string(epoch));
    res.loss_trace.push_back(epoch_loss);
    if (epoch_loss < best - 1e-9) {
      best = epoch_loss;
      since_best = 0;
    } else if (cfg.patience && ++since_best >= cfg.patience) {
      break;
    }
  }
  return res;
}

inline std::vector<ConnectomeGraph> build_graphs(const Dataset& ds, Modality m, std::size_t k,
                                                 LdpNeighborhood hood = LdpNeighborhood::OneHop) {
  std::vector<ConnectomeGraph> out;
  out.reserve(ds.size());
  for (const Subject& s : ds) out.push_back(build_graph(s.matrix(m), k, hood));
  return out;
}

inline std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> y;
  for (const Subject& s : ds) y.push_back(s.label);
  return y;
}

}  // namespace connex
