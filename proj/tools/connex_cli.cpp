// connex: command-line driver for the pipeline stages.
//
// Exit codes: 0 success, 1 validation/usage error, 2 runtime/numeric error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "connex/config.hpp"
#include "connex/io.hpp"
#include "repro.hpp"

namespace fs = std::filesystem;
using namespace connex;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::optional<std::size_t> fold;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool data = true) {
  sub->add_option("--config", c.config, "Pipeline config (JSON) or a reproducibility record");
  sub->add_option("--set", c.overrides, "Override a config value, e.g. --set backbone.epochs=50")->take_all();
  sub->add_option("--seed", c.seed, "Root seed (overrides the config)");
  if (data) {
    sub->add_option("--dataset", c.dataset, "Dataset manifest (overrides data.* in the config)");
    sub->add_option("--fold", c.fold, "Restrict to one cross-validation fold (train split for training, test split for evaluate)");
  }
}

PipelineConfig make_config(const Common& c) {
  PipelineConfig cfg = load_config(c.config, c.overrides);
  if (c.seed) cfg.settings.seed = *c.seed;
  if (!c.dataset.empty()) {
    cfg.manifest = fs::absolute(c.dataset);
    cfg.synthetic.reset();
  }
  if (cfg.manifest) cfg.manifest = fs::absolute(*cfg.manifest);
  return cfg;
}

/// Subjects a stage sees: the whole dataset, or one fold's train/test split.
struct Split {
  Dataset data;
  std::uint64_t seed;
};

Split select(const Dataset& ds, const PipelineConfig& cfg, const std::optional<std::size_t>& fold, bool test) {
  if (!fold) return {ds, derive_seed(cfg.settings.seed, "full")};
  const auto folds = stratified_folds(labels_of(ds), cfg.settings.folds, cfg.settings.seed);
  if (*fold >= folds.size())
    throw ConfigError("--fold " + std::to_string(*fold) + " out of range (folds = " + std::to_string(folds.size()) + ")");
  const std::set<std::size_t> in_test(folds[*fold].begin(), folds[*fold].end());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (in_test.count(i) == static_cast<std::size_t>(test)) idx.push_back(i);
  return {subset(ds, idx), derive_seed(cfg.settings.seed, "fold", *fold)};
}

BackboneConfig stage_backbone(const PipelineConfig& cfg, std::uint64_t seed, Modality mod) {
  BackboneConfig b = cfg.settings.backbone;
  b.seed = derive_seed(seed, std::string("backbone-") + modality_name(mod));
  return b;
}

std::vector<ConnectomeGraph> graphs_for(const Dataset& ds, const PipelineConfig& cfg, Modality mod) {
  return build_graphs(ds, mod, cfg.settings.graph.k, cfg.settings.graph.ldp);
}

class Run {
 public:
  Run(std::string command, std::vector<std::string> args) : command_(std::move(command)), args_(std::move(args)) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  /// Writes `<record>`; `record` defaults to `<first output>.repro.json`.
  void finish(const PipelineConfig& cfg, const fs::path& record) {
    if (cfg.manifest) add_dataset_inputs(*cfg.manifest);
    tools::Record r{command_, tools::rerun_argv(args_, record), config_to_json(cfg), inputs_, outputs_};
    detail::write_text(record, detail::dump(r.to_json()));
  }

 private:
  void add_dataset_inputs(const fs::path& manifest) {
    inputs_.push_back(manifest);
    const nlohmann::json j = detail::read_json(manifest);
    for (const auto& s : j.at("subjects"))
      for (const char* key : {"sc_path", "fnc_path"}) {
        fs::path p = s.at(key).get<std::string>();
        inputs_.push_back(p.is_absolute() ? p : manifest.parent_path() / p);
      }
  }

  std::string command_;
  std::vector<std::string> args_;
  std::vector<fs::path> inputs_, outputs_;
};

fs::path record_for(const fs::path& out) {
  fs::path r = out;
  r += ".repro.json";
  return r;
}

Modality parse_mod(const std::string& s) { return parse_modality(s); }

/// Embeddings of `ds` through a fine-tuned backbone on mask-applied graphs.
Tensor embed(const Dataset& ds, const PipelineConfig& cfg, Modality mod, const ParamStore& backbone,
             const GlobalEdgeMask& mask) {
  ParamStore frozen = backbone;
  frozen.freeze();
  return embed_graphs(apply_mask(graphs_for(ds, cfg, mod), mask), frozen, cfg.settings.backbone).embedding;
}

struct FusionSources {
  std::string sc_backbone, fnc_backbone, sc_mask, fnc_mask;
};

void add_fusion_sources(CLI::App* sub, FusionSources& f) {
  sub->add_option("--sc-backbone", f.sc_backbone, "Fine-tuned SC backbone checkpoint")->required();
  sub->add_option("--fnc-backbone", f.fnc_backbone, "Fine-tuned FNC backbone checkpoint")->required();
  sub->add_option("--sc-mask", f.sc_mask, "SC mask CSV")->required();
  sub->add_option("--fnc-mask", f.fnc_mask, "FNC mask CSV")->required();
}

FusionInputs fusion_inputs(const Dataset& ds, const PipelineConfig& cfg, const FusionSources& f, Run& run) {
  const ParamStore sc = load_backbone(f.sc_backbone, cfg.settings.backbone, Modality::Structural);
  const ParamStore fnc = load_backbone(f.fnc_backbone, cfg.settings.backbone, Modality::Functional);
  const MaskRecord msc = load_mask(f.sc_mask), mfnc = load_mask(f.fnc_mask);
  if (msc.mask.modality != Modality::Structural || mfnc.mask.modality != Modality::Functional)
    throw ConfigError("mask modality does not match its flag (--sc-mask / --fnc-mask)");
  for (const std::string& p : {f.sc_backbone, f.fnc_backbone, f.sc_mask, f.fnc_mask}) run.input(p);
  run.input(sidecar_path(f.sc_mask));
  run.input(sidecar_path(f.fnc_mask));
  return {embed(ds, cfg, Modality::Structural, sc, msc.mask), embed(ds, cfg, Modality::Functional, fnc, mfnc.mask),
          labels_of(ds)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"connex: multimodal connectome classification pipeline"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);

  Common c;
  std::string spec_path, modality = "sc", backbone_path, mask_path, fusion_path, method, group = "SZ", labels_path;
  std::optional<bool> unified;
  std::size_t top = 100;
  FusionSources fs_src;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic two-modality dataset");
  add_common(synth, c, false);
  synth->add_option("--spec", spec_path, "Synthetic spec (JSON); defaults to data.synthetic in the config");
  synth->add_option("--out", c.out, "Output directory")->required();

  auto* train_bb = app.add_subcommand("train-backbone", "Train one modality's graph backbone");
  add_common(train_bb, c);
  train_bb->add_option("--modality", modality, "sc or fnc")->required();
  train_bb->add_option("--out", c.out, "Backbone checkpoint (JSON)")->required();

  auto* explain = app.add_subcommand("explain", "Learn the shared edge mask through a frozen backbone");
  add_common(explain, c);
  explain->add_option("--modality", modality, "sc or fnc")->required();
  explain->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  explain->add_option("--out", c.out, "Mask CSV (sidecar written to <out>.json)")->required();

  auto* finetune = app.add_subcommand("finetune", "Fine-tune a backbone on mask-applied graphs");
  add_common(finetune, c);
  finetune->add_option("--modality", modality, "sc or fnc")->required();
  finetune->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  finetune->add_option("--mask", mask_path, "Mask CSV")->required();
  finetune->add_option("--out", c.out, "Fine-tuned backbone checkpoint")->required();

  auto* train_fu = app.add_subcommand("train-fusion", "Train the fusion model over frozen fine-tuned backbones");
  add_common(train_fu, c);
  add_fusion_sources(train_fu, fs_src);
  train_fu->add_option("--method", method, "Concat, Cross-Att or ConneX (default: fusion.method)");
  train_fu->add_flag("--unified,!--no-unified", unified, "Include the unified representation (default: fusion.unified)");
  train_fu->add_option("--out", c.out, "Fusion checkpoint")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Score a trained fusion model");
  add_common(evaluate, c);
  add_fusion_sources(evaluate, fs_src);
  evaluate->add_option("--fusion", fusion_path, "Fusion checkpoint")->required();
  evaluate->add_option("--out", c.out, "Results CSV")->required();

  auto* ablate = app.add_subcommand("ablate", "Cross-validated ablation matrix");
  add_common(ablate, c);
  ablate->add_option("--out", c.out, "Results CSV")->required();

  auto* report = app.add_subcommand("report", "Top group-level connections under a mask");
  add_common(report, c);
  report->add_option("--mask", mask_path, "Mask CSV")->required();
  report->add_option("--group", group, "HC or SZ");
  report->add_option("--top", top, "Number of connections");
  report->add_option("--labels", labels_path, "Network label per node, one per line");
  report->add_option("--out", c.out, "Output prefix: writes <out>.csv and <out>.dot")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    Run run(sub->get_name(), args);
    PipelineConfig cfg = make_config(c);
    const fs::path out = cfg.resolve(c.out);

    if (sub == synth) {
      if (!spec_path.empty()) {
        SyntheticSpec spec;
        from_json(detail::read_json(spec_path), spec);
        cfg.synthetic = spec;
        run.input(spec_path);
      }
      if (!cfg.synthetic) throw ConfigError("synth: pass --spec or set data.synthetic in the config");
      cfg.synthetic->validate();
      const fs::path manifest = save_dataset(synthesize_dataset(*cfg.synthetic), out);
      cfg.manifest.reset();
      run.output(manifest);
      for (const Subject& s : load_dataset(manifest)) {
        run.output(out / "matrices" / (s.id + "_sc.csv"));
        run.output(out / "matrices" / (s.id + "_fnc.csv"));
      }
      run.finish(cfg, out / "repro.json");
      return 0;
    }

    const Dataset ds = config_dataset(cfg);
    const Modality mod = parse_mod(modality);

    if (sub == train_bb) {
      const Split split = select(ds, cfg, c.fold, false);
      const BackboneConfig b = stage_backbone(cfg, split.seed, mod);
      const TrainResult r = train_backbone(graphs_for(split.data, cfg, mod), labels_of(split.data), b);
      save_backbone(out, r.params, b, mod);
      run.output(out);
    } else if (sub == explain) {
      const Split split = select(ds, cfg, c.fold, false);
      const BackboneConfig b = stage_backbone(cfg, split.seed, mod);
      ParamStore params = load_backbone(backbone_path, b, mod);
      params.freeze();
      run.input(backbone_path);
      MaskConfig m = cfg.settings.mask;
      m.seed = derive_seed(split.seed, std::string("mask-") + modality_name(mod));
      const MaskResult r = learn_global_mask(graphs_for(split.data, cfg, mod), params, b, mod, m);
      save_mask(out, {r.mask, m.seed, m.lambda_sparsity, m.lambda_entropy, m.steps});
      run.output(out);
      run.output(sidecar_path(out));
    } else if (sub == finetune) {
      const Split split = select(ds, cfg, c.fold, false);
      const BackboneConfig b = stage_backbone(cfg, split.seed, mod);
      const ParamStore params = load_backbone(backbone_path, b, mod);
      const MaskRecord mask = load_mask(mask_path);
      if (mask.mask.modality != mod) throw ConfigError("finetune: mask modality does not match --modality");
      run.input(backbone_path);
      run.input(mask_path);
      run.input(sidecar_path(mask_path));
      const TrainResult r = finetune_backbone(graphs_for(split.data, cfg, mod), labels_of(split.data), mask.mask, params,
                                              b, cfg.settings.finetune);
      save_backbone(out, r.params, b, mod);
      run.output(out);
    } else if (sub == train_fu) {
      const Split split = select(ds, cfg, c.fold, false);
      FusionInputs in = fusion_inputs(split.data, cfg, fs_src, run);
      FusionModel model;
      model.config = cfg.settings.fusion;
      if (!method.empty()) model.config.method = parse_fusion_method(method);
      if (unified) model.config.unified = *unified;
      model.config.seed = derive_seed(split.seed, "fusion-" + FusionVariant{model.config.method, model.config.unified}.tag());
      const std::size_t ch = in.rs.dim(1);
      model.sc = cfg.settings.standardize ? Standardizer::fit(in.rs) : Standardizer::identity(ch);
      model.fnc = cfg.settings.standardize ? Standardizer::fit(in.rf) : Standardizer::identity(ch);
      in.rs = model.sc.apply(in.rs);
      in.rf = model.fnc.apply(in.rf);
      const LossWeights w = cfg.settings.loss_grid && model.config.method == FusionMethod::ConneX
                                ? grid_search_loss(in, model.config, model.config.seed)
                                : cfg.settings.loss;
      model.params = train_fusion(in, model.config, w).params;
      save_fusion(out, model);
      run.output(out);
    } else if (sub == evaluate) {
      const Split split = select(ds, cfg, c.fold, true);
      FusionInputs in = fusion_inputs(split.data, cfg, fs_src, run);
      const FusionModel model = load_fusion(fusion_path, cfg.settings.fusion);
      run.input(fusion_path);
      in.rs = model.sc.apply(in.rs);
      in.rf = model.fnc.apply(in.rf);
      const Metrics m = metrics(predict(fusion_logits(model.params, model.config, in)), in.labels);
      write_results_csv(out, {summarize(FusionVariant{model.config.method, model.config.unified}.tag(), {m})});
      run.output(out);
    } else if (sub == ablate) {
      const CrossValidationReport rep = cross_validate(ds, cfg.settings, cfg.variants());
      write_results_csv(out, rep.rows());
      run.output(out);
    } else if (sub == report) {
      const MaskRecord mask = load_mask(mask_path);
      run.input(mask_path);
      run.input(sidecar_path(mask_path));
      const ExplanationReport rep = top_connections(ds, mask.mask.modality, mask.mask, parse_group(group), top);
      NetworkLabels labels = single_group_labels(mask.mask.num_nodes);
      if (!labels_path.empty()) {
        labels = read_network_labels(labels_path);
        run.input(labels_path);
      }
      fs::path csv = out, dot = out, groups = out;
      csv += ".csv";
      dot += ".dot";
      groups += ".groups.csv";
      write_report_csv(csv, rep);
      const ConnectivityFiles files = connectivity_data(rep, labels);
      detail::write_text(dot, files.dot);
      detail::write_text(groups, files.csv);
      for (const fs::path& p : {csv, dot, groups}) run.output(p);
    }
    run.finish(cfg, record_for(out));
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 2;
  }
}
