#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "connex/config.hpp"
#include "connex/io.hpp"
#include "support.hpp"

using namespace connex;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / "connex_tests" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

ExplanationReport report_of(std::vector<RankedEdge> edges) {
  ExplanationReport r;
  r.edges = std::move(edges);
  return r;
}

}  // namespace

TEST(Checkpoint, BackboneRoundTripAndValidation) {
  const fs::path dir = scratch_dir();
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.channels = 6;
  Rng rng(1);
  const ParamStore p = init_backbone(cfg, rng);
  save_backbone(dir / "b.json", p, cfg, Modality::Functional);
  EXPECT_TRUE(load_backbone(dir / "b.json", cfg, Modality::Functional) == p);
  EXPECT_THROW(load_backbone(dir / "b.json", cfg, Modality::Structural), LoadError);
  BackboneConfig wider = cfg;
  wider.channels = 8;
  EXPECT_THROW(load_backbone(dir / "b.json", wider, Modality::Functional), LoadError);

  // Same metadata, one tensor with the wrong shape.
  Checkpoint ck = load_checkpoint(dir / "b.json");
  ck.params.get("head.w") = Tensor({3, 2});
  save_checkpoint(dir / "bad.json", ck);
  EXPECT_THROW(load_backbone(dir / "bad.json", cfg, Modality::Functional), LoadError);

  spit(dir / "junk.json", "{ not json");
  EXPECT_THROW(load_checkpoint(dir / "junk.json"), LoadError);
  spit(dir / "other.json", R"({"format": "something-else", "version": 1})");
  EXPECT_THROW(load_checkpoint(dir / "other.json"), LoadError);
  EXPECT_THROW(load_checkpoint(dir / "missing.json"), LoadError);
}

TEST(Checkpoint, TensorValuesRoundTripBitExactly) {
  std::mt19937_64 rng(2);
  const Tensor t = random_tensor({3, 4, 2}, rng);
  const Tensor back = tensor_from_json(nlohmann::json::parse(tensor_to_json(t).dump()), "t");
  EXPECT_EQ(back, t);
  EXPECT_THROW(tensor_from_json(nlohmann::json{{"shape", {2, 2}}, {"values", {1.0}}}, "t"), LoadError);
  EXPECT_THROW(tensor_from_json(nlohmann::json{{"shape", {1, 1, 1, 1, 1}}, {"values", {1.0}}}, "t"), LoadError);
}

TEST(Checkpoint, FusionRoundTripKeepsConfigAndLogits) {
  const fs::path dir = scratch_dir();
  FusionModel m;
  m.config = connex::testing::miniature_fusion(5, false);
  m.config.method = FusionMethod::CrossAtt;
  m.params = init_fusion(m.config);
  std::mt19937_64 rng(5);
  const Tensor rs = random_tensor({7, 8}, rng), rf = random_tensor({7, 8}, rng);
  m.sc = Standardizer::fit(rs);
  m.fnc = Standardizer::identity(8);
  save_fusion(dir / "f.json", m);
  const FusionModel back = load_fusion(dir / "f.json", FusionConfig{});
  EXPECT_EQ(back.config.method, FusionMethod::CrossAtt);
  EXPECT_FALSE(back.config.unified);
  EXPECT_EQ(back.config.tokens, m.config.tokens);
  EXPECT_EQ(back.config.model_dim, m.config.model_dim);
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.sc.mean, m.sc.mean);
  EXPECT_EQ(back.sc.inv_std, m.sc.inv_std);
  const FusionInputs in{rs, rf, {0, 1, 0, 1, 0, 1, 1}};
  EXPECT_EQ(fusion_logits(back.params, back.config, in), fusion_logits(m.params, m.config, in));
}

TEST(Mask, RoundTripAndDiagonalCheck) {
  const fs::path dir = scratch_dir();
  std::mt19937_64 rng(3);
  MaskRecord r;
  r.mask = GlobalEdgeMask::constant(6, 0.0, Modality::Functional);
  r.mask.upper = random_tensor(r.mask.upper.shape(), rng);
  r.seed = 99;
  r.lambda1 = 0.25;
  r.lambda2 = 0.5;
  r.steps = 7;
  save_mask(dir / "m.csv", r);
  const MaskRecord back = load_mask(dir / "m.csv");
  EXPECT_EQ(back.mask.upper, r.mask.upper);
  EXPECT_EQ(back.mask.modality, Modality::Functional);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.lambda1, 0.25);
  EXPECT_EQ(back.steps, 7u);

  Tensor y = r.mask.full();
  y.at(2, 2) = 0.0;
  write_matrix_csv(dir / "m.csv", y);
  EXPECT_THROW(load_mask(dir / "m.csv"), LoadError);
  fs::remove(sidecar_path(dir / "m.csv"));
  EXPECT_THROW(load_mask(dir / "m.csv"), LoadError);
}

TEST(Results, CsvHeaderAndTwoDecimals) {
  MetricsRow r{"SC/N/-/-", 75.0, 2.5, 100.0, 0.0, 80.0, 1.0 / 3.0};
  EXPECT_EQ(results_csv({r}),
            "config,accuracy_mean,accuracy_std,precision_mean,precision_std,f1_mean,f1_std\n"
            "SC/N/-/-,75.00,2.50,100.00,0.00,80.00,0.33\n");
  EXPECT_EQ(results_csv({}), std::string(kResultsHeader) + "\n");
}

TEST(Connectivity, SingleGroupTagsEveryEdge) {
  const auto f = connectivity_data(report_of({{0, 1, 1.0}, {2, 3, 0.5}}), NetworkLabels(4, "DMN"));
  EXPECT_EQ(f.csv, "node_i,node_j,normalized_weight,group\n0,1,1.000000,DMN\n2,3,0.500000,DMN\n");
  EXPECT_NE(f.dot.find("n2 -- n3 [weight=0.500000, group=\"DMN\"]"), std::string::npos);
}

TEST(Connectivity, EmptyReportGivesValidEmptyFiles) {
  const fs::path dir = scratch_dir();
  emit_connectivity_data(report_of({}), NetworkLabels{}, dir / "e.csv", dir / "e.dot");
  EXPECT_EQ(slurp(dir / "e.csv"), "node_i,node_j,normalized_weight,group\n");
  EXPECT_EQ(slurp(dir / "e.dot"), "graph SZ {\n}\n");
}

TEST(Connectivity, GroupTagsMatchIndependentRelabelling) {
  std::mt19937_64 rng(4);
  const std::vector<std::string> names = {"SCN", "ADN", "SMN", "VSN", "CON", "DMN", "CBN"};
  Dataset ds;
  for (int n = 0; n < 6; ++n)
    ds.push_back({"s" + std::to_string(n), connex::testing::random_symmetric(20, rng),
                  connex::testing::random_symmetric(20, rng), n % 2});
  GlobalEdgeMask mask = GlobalEdgeMask::constant(20, 0.0);
  mask.upper = random_tensor(mask.upper.shape(), rng);
  const ExplanationReport rep = top_connections(ds, Modality::Structural, mask, Group::SZ, 10);
  ASSERT_EQ(rep.edges.size(), 10u);
  for (int trial = 0; trial < 20; ++trial) {
    NetworkLabels labels(20);
    std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
    for (auto& l : labels) l = names[pick(rng)];
    const auto f = connectivity_data(rep, labels);
    std::istringstream csv(f.csv);
    std::string line;
    std::getline(csv, line);
    for (const RankedEdge& e : rep.edges) {
      ASSERT_TRUE(std::getline(csv, line));
      const std::string tag = line.substr(line.rfind(',') + 1);
      EXPECT_EQ(tag, labels[e.i] == labels[e.j] ? labels[e.i] : std::string("inter"));
    }
  }
}

TEST(Connectivity, UnlabelledNodeIsError) {
  EXPECT_THROW(connectivity_data(report_of({{0, 5, 1.0}}), NetworkLabels(3, "DMN")), ConfigError);
  NetworkLabels holes(6, "DMN");
  holes[5].clear();
  EXPECT_THROW(connectivity_data(report_of({{0, 5, 1.0}}), holes), ConfigError);
}

TEST(Connectivity, LabelFileSkipsCommentsAndBlanks) {
  const fs::path dir = scratch_dir();
  spit(dir / "l.txt", "# networks\nDMN\n\nSMN \r\nCBN\n");
  EXPECT_EQ(read_network_labels(dir / "l.txt"), (NetworkLabels{"DMN", "SMN", "CBN"}));
}

TEST(Config, DefaultsMatchTheLibrary) {
  const PipelineConfig c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.settings.graph.k, 5u);
  EXPECT_EQ(c.settings.backbone.layers, 5u);
  EXPECT_EQ(c.settings.backbone.channels, 32u);
  EXPECT_EQ(c.settings.backbone.dropout, 0.6);
  EXPECT_EQ(c.settings.fusion.lr, 1e-4);
  EXPECT_EQ(c.settings.fusion.epochs, 300u);
  EXPECT_EQ(c.settings.loss.phi, 0.55);
  EXPECT_EQ(c.settings.folds, 5u);
  EXPECT_EQ(c.variants().size(), 6u);
  EXPECT_FALSE(c.manifest);
  EXPECT_FALSE(c.synthetic);
}

TEST(Config, JsonRoundTrip) {
  PipelineConfig c;
  c.settings.seed = 42;
  c.settings.backbone.epochs = 17;
  c.settings.fusion.method = FusionMethod::Concat;
  c.settings.graph.ldp = LdpNeighborhood::TwoHop;
  c.synthetic = make_synthetic_spec(30, 10, 4, 2, 2.0, 1.0, 0.4, 0.8, 9);
  c.ablation_unified = {true};
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(config_from_json(nlohmann::json{{"sed", 1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"backbone", {{"layer", 3}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"backbone", {{"epochs", -1}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"backbone", {{"epochs", "many"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"loss", {{"phi", 0.9}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"fusion", {{"method", "DCCA"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"graph", {{"ldp", "three-hop"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"version", 2}}), ConfigError);
}

TEST(Config, OverridesBeatFileValues) {
  const fs::path dir = scratch_dir();
  spit(dir / "c.json", R"({"seed": 3, "backbone": {"epochs": 10}})");
  const PipelineConfig plain = load_config(dir / "c.json");
  EXPECT_EQ(plain.settings.seed, 3u);
  EXPECT_EQ(plain.settings.backbone.epochs, 10u);
  const PipelineConfig over = load_config(dir / "c.json", {"backbone.epochs=4", "fusion.method=Cross-Att"});
  EXPECT_EQ(over.settings.backbone.epochs, 4u);
  EXPECT_EQ(over.settings.fusion.method, FusionMethod::CrossAtt);
  EXPECT_EQ(over.settings.seed, 3u);
  EXPECT_THROW(load_config(dir / "c.json", {"no_equals_sign"}), ConfigError);
  EXPECT_THROW(load_config(dir / "c.json", {"backbone.bogus=1"}), ConfigError);
}

TEST(Config, RecordFileIsAcceptedAsConfig) {
  const fs::path dir = scratch_dir();
  PipelineConfig c;
  c.settings.seed = 77;
  const nlohmann::json record = {{"record_version", 1}, {"command", "ablate"}, {"config", config_to_json(c)}};
  spit(dir / "r.json", record.dump());
  EXPECT_EQ(load_config(dir / "r.json").settings.seed, 77u);
}

TEST(Config, DatasetSourceIsExclusive) {
  nlohmann::json j = config_to_json(PipelineConfig{});
  j["data"]["manifest"] = "m.json";
  j["data"]["synthetic"] = make_synthetic_spec(10, 6, 2, 1, 1.0, 1.0, 0.5, 1.0, 1);
  EXPECT_THROW(config_from_json(j), ConfigError);
  EXPECT_THROW(config_dataset(PipelineConfig{}), ConfigError);
}
