#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "connex/backbone.hpp"
#include "support.hpp"

using namespace connex;

namespace {

GraphBatch two_node_batch() {
  GraphBatch b;
  b.graphs = 1;
  b.nodes = 2;
  b.dst = {0, 1};
  b.src = {1, 0};
  b.weights = {1.0, 1.0};
  b.node_graph = {0, 0};
  b.inv_node_count = Tensor({2}, 0.5);
  return b;
}

Bound scalar_layer(ad::Tape& tape, double w1, double w2, double w3, double w4) {
  Bound p;
  p.insert("layer1.w1", tape.constant(Tensor::matrix(1, 1, {w1})));
  p.insert("layer1.w2", tape.constant(Tensor::matrix(1, 1, {w2})));
  p.insert("layer1.w3", tape.constant(Tensor::matrix(1, 1, {w3})));
  p.insert("layer1.w4", tape.constant(Tensor::matrix(1, 1, {w4})));
  return p;
}

Tensor permute(const Tensor& e, const std::vector<std::size_t>& perm) {
  const std::size_t m = e.dim(0);
  Tensor out({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(perm[i], perm[j]) = e.at(i, j);
  return out;
}

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.layers = 3;
  cfg.channels = 8;
  cfg.epochs = 5;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(RggcnLayer, TwoNodeHandExample) {
  ad::Tape tape;
  const GraphBatch b = two_node_batch();
  const Bound p = scalar_layer(tape, 0, 1, 0, 0);
  Rng rng(1);
  const Tensor out = rggcn_layer(p, 1, tape.constant(Tensor::matrix(2, 1, {1, 2})), b,
                                 tape.constant(Tensor::vector(b.weights)), 0.0, false, rng).value();
  EXPECT_DOUBLE_EQ(out[0], 2.0);
  EXPECT_DOUBLE_EQ(out[1], 2.5);
}

TEST(RggcnLayer, ZeroSelfAndMessageWeightsPassThrough) {
  std::mt19937_64 rng(2);
  BackboneConfig cfg;
  Rng init(2);
  ParamStore store = init_backbone(cfg, init);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (const char* w : {"w1", "w2"}) {
      Tensor& t = store.get(layer_name(l, w));
      t = Tensor(t.shape(), 0.0);
    }
  std::vector<ConnectomeGraph> keep;
  const GraphBatch b = connex::testing::random_batch(3, 7, rng, &keep);
  ad::Tape tape;
  const Bound p = store.bind(tape);
  Rng unused(0);
  const ad::Var x = tape.constant(b.features);
  const ad::Var w = tape.constant(Tensor::vector(b.weights));
  EXPECT_EQ(rggcn_layer(p, 0, x, b, w, 0.6, false, unused).value(), apply_linear(p, "proj", x).value());
  const ad::Var h = tape.constant(connex::random_tensor({b.nodes, cfg.channels}, rng));
  EXPECT_EQ(rggcn_layer(p, 2, h, b, w, 0.6, false, unused).value(), h.value());
}

TEST(RggcnLayer, IsolatedNodeGetsNoMessages) {
  ad::Tape tape;
  GraphBatch b = two_node_batch();
  b.dst.clear();
  b.src.clear();
  b.weights.clear();
  const Bound p = scalar_layer(tape, -0.5, 1, 0.3, 0.7);
  Rng rng(1);
  const Tensor out = rggcn_layer(p, 1, tape.constant(Tensor::matrix(2, 1, {1, -2})), b,
                                 tape.constant(Tensor({1}, 0.0)), 0.0, false, rng).value();
  EXPECT_DOUBLE_EQ(out[0], 1.0 + 0.0);  // ReLU(-0.5)
  EXPECT_DOUBLE_EQ(out[1], -2.0 + 1.0);
}

TEST(RggcnLayer, WidthMismatchIsShapeError) {
  ad::Tape tape;
  const GraphBatch b = two_node_batch();
  const Bound p = scalar_layer(tape, 0, 1, 0, 0);
  Rng rng(1);
  EXPECT_THROW(rggcn_layer(p, 1, tape.constant(Tensor({2, 3})), b, tape.constant(Tensor::vector(b.weights)), 0.0,
                           false, rng),
               ShapeError);
}

TEST(RggcnLayer, GradientCheck) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) EXPECT_LT(connex::testing::check_rggcn_layer(seed), 1e-4);
}

TEST(Backbone, IdenticalNodesWithZeroMessagesEmbedToProjectedInput) {
  BackboneConfig cfg;
  Rng init(4);
  ParamStore store = init_backbone(cfg, init);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (const char* w : {"w1", "w2"}) store.get(layer_name(l, w)) = Tensor(store.get(layer_name(l, w)).shape(), 0.0);
  // complete graph: every node has the same LDP row
  Tensor e({6, 6}, 1.0);
  for (std::size_t i = 0; i < 6; ++i) e.at(i, i) = 0.0;
  const ConnectomeGraph g = build_graph(e, 5);
  const Embeddings out = embed_graphs({g}, store, cfg);
  ad::Tape tape;
  const Bound p = store.bind(tape);
  const Tensor projected =
      apply_linear(p, "proj", tape.constant(g.features.reshaped({6, kLdpWidth}))).value();
  for (std::size_t c = 0; c < cfg.channels; ++c) EXPECT_NEAR(out.embedding.at(0, c), projected.at(0, c), 1e-12);
}

TEST(Backbone, NodePermutationInvariance) {
  std::mt19937_64 rng(5);
  BackboneConfig cfg;
  Rng init(5);
  const ParamStore store = init_backbone(cfg, init);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor e = connex::testing::random_symmetric(15, rng);
    std::vector<std::size_t> perm(15);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Embeddings a = embed_graphs({build_graph(e, 4)}, store, cfg);
    const Embeddings b = embed_graphs({build_graph(permute(e, perm), 4)}, store, cfg);
    for (std::size_t c = 0; c < cfg.channels; ++c) EXPECT_NEAR(a.embedding.at(0, c), b.embedding.at(0, c), 1e-9);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a.logits.at(0, c), b.logits.at(0, c), 1e-9);
  }
}

TEST(Backbone, ShapesAndEvalDeterminism) {
  std::mt19937_64 rng(6);
  BackboneConfig cfg;
  Rng init(6);
  const ParamStore store = init_backbone(cfg, init);
  std::vector<ConnectomeGraph> graphs;
  for (int n = 0; n < 5; ++n) graphs.push_back(build_graph(connex::testing::random_symmetric(10, rng), 3));
  const Embeddings a = embed_graphs(graphs, store, cfg), b = embed_graphs(graphs, store, cfg);
  EXPECT_EQ(a.embedding.shape(), (Shape{5, 32}));
  EXPECT_EQ(a.logits.shape(), (Shape{5, 2}));
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_TRUE(a.embedding.all_finite());
  // layer 0 reads the 5 LDP features, later layers C
  EXPECT_EQ(store.get("layer0.w1").shape(), (Shape{5, 32}));
  EXPECT_EQ(store.get("layer4.w3").shape(), (Shape{32, 32}));
  EXPECT_EQ(store.get("head.w").shape(), (Shape{32, 2}));
}

TEST(TrainBackbone, ZeroLearningRateKeepsInitialisation) {
  std::mt19937_64 rng(7);
  BackboneConfig cfg = small_config();
  cfg.lr = 0.0;
  std::vector<ConnectomeGraph> graphs;
  for (int n = 0; n < 8; ++n) graphs.push_back(build_graph(connex::testing::random_symmetric(8, rng), 3));
  const TrainResult res = train_backbone(graphs, {0, 1, 0, 1, 0, 1, 0, 1}, cfg);
  Rng init(derive_seed(cfg.seed, "backbone-init"));
  EXPECT_TRUE(res.params == init_backbone(cfg, init));
  for (double l : res.loss_trace) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainBackbone, SingleClassIsConfigError) {
  std::mt19937_64 rng(8);
  std::vector<ConnectomeGraph> graphs;
  for (int n = 0; n < 4; ++n) graphs.push_back(build_graph(connex::testing::random_symmetric(6, rng), 2));
  EXPECT_THROW(train_backbone(graphs, {1, 1, 1, 1}, small_config()), ConfigError);
  EXPECT_THROW(train_backbone(graphs, {1, 0}, small_config()), ConfigError);
}

TEST(TrainBackbone, DeterministicGivenSeed) {
  std::mt19937_64 rng(9);
  std::vector<ConnectomeGraph> graphs;
  for (int n = 0; n < 10; ++n) graphs.push_back(build_graph(connex::testing::random_symmetric(8, rng), 3));
  const std::vector<int> y = {0, 1, 0, 1, 0, 1, 0, 1, 1, 0};
  const TrainResult a = train_backbone(graphs, y, small_config());
  const TrainResult b = train_backbone(graphs, y, small_config());
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(TrainBackbone, FitsPlantedSignal) {
  const Dataset ds = synthesize_dataset(make_synthetic_spec(60, 12, 6, 2, 3.0, 1.0, 0.5, 1.0, 13));
  BackboneConfig cfg;
  cfg.epochs = 150;
  cfg.seed = 13;
  const auto graphs = build_graphs(ds, Modality::Structural, 4);
  const auto y = labels_of(ds);
  const TrainResult res = train_backbone(graphs, y, cfg);
  for (double l : res.loss_trace) ASSERT_TRUE(std::isfinite(l));
  const Embeddings out = embed_graphs(graphs, res.params, cfg);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < y.size(); ++n)
    correct += (out.logits.at(n, 1) > out.logits.at(n, 0) ? 1 : 0) == y[n];
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(y.size()), 0.95);
}
