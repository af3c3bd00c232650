#pragma once

// Multi-head joint loss, fusion training over frozen backbones, metrics and
// stratified k-fold evaluation of the whole pipeline.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "connex/autodiff.hpp"
#include "connex/backbone.hpp"
#include "connex/connectome.hpp"
#include "connex/explanation.hpp"
#include "connex/fusion.hpp"
#include "connex/nn.hpp"

namespace connex {

// ---------------------------------------------------------------- loss

/// Weights of the view heads (alpha, beta, gamma) and the fused head (phi).
struct LossWeights {
  double alpha = 0.15;
  double beta = 0.15;
  double gamma = 0.15;
  double phi = 0.55;

  void validate() const {
    for (double w : {alpha, beta, gamma, phi})
      if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
    if (std::abs(alpha + beta + gamma + phi - 1.0) > 1e-9)
      throw ConfigError("loss weights must sum to 1 (got " + std::to_string(alpha + beta + gamma + phi) + ")");
  }

  /// Weights per head in forward order, for `heads` outputs. Without the
  /// unified branch (three heads) gamma is dropped and the rest renormalised.
  std::vector<double> for_heads(std::size_t heads) const {
    if (heads == 1) return {1.0};
    if (heads == 4) return {alpha, beta, gamma, phi};
    if (heads == 3) {
      const double z = alpha + beta + phi;
      if (z <= 0) throw ConfigError("loss weights: alpha + beta + phi must be > 0 without the unified branch");
      return {alpha / z, beta / z, phi / z};
    }
    throw ConfigError("loss weights: unsupported head count " + std::to_string(heads));
  }
};

/// Weighted sum of per-head mean cross-entropies over valid subjects.
inline ad::Var joint_loss(const std::vector<ad::Var>& logits, const std::vector<double>& weights,
                          const std::vector<int>& labels, const Tensor& valid) {
  if (logits.empty() || logits.size() != weights.size())
    throw ConfigError("joint_loss: one weight per head required");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("joint_loss: weights must sum to 1");
  const Tensor targets = ad::one_hot(labels, 2);
  ad::Var loss;
  for (std::size_t h = 0; h < logits.size(); ++h) {
    ad::Var term = ad::scale(ad::cross_entropy(logits[h], targets, valid), weights[h]);
    loss = loss.valid() ? ad::add(loss, term) : term;
  }
  return loss;
}

/// Four-branch form: alpha L1 + beta L2 + gamma L3 + phi Lc.
inline ad::Var joint_loss(const ad::Var& l1, const ad::Var& l2, const ad::Var& l3, const ad::Var& lc,
                          const std::vector<int>& labels, const LossWeights& w, const Tensor& valid) {
  w.validate();
  return joint_loss({l1, l2, l3, lc}, {w.alpha, w.beta, w.gamma, w.phi}, labels, valid);
}

// ---------------------------------------------------------------- prediction & metrics

/// argmax over sigmoid-transformed logits; exact ties go to class 0.
inline std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw ShapeError("predict: logits must be N x 2");
  std::vector<int> out(logits.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r)
    out[r] = ad::sigmoid_value(logits.at(r, 1)) > ad::sigmoid_value(logits.at(r, 0)) ? 1 : 0;
  return out;
}

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

/// Positive class is 1 (SZ). Zero denominators give 0.
inline Metrics metrics(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw ConfigError("metrics: predictions and labels must be non-empty and of equal length");
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    correct += predictions[i] == labels[i];
    tp += predictions[i] == 1 && labels[i] == 1;
    fp += predictions[i] == 1 && labels[i] == 0;
    fn += predictions[i] == 0 && labels[i] == 1;
  }
  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + recall > 0 ? 2 * m.precision * recall / (m.precision + recall) : 0.0;
  return m;
}

struct MetricsRow {
  std::string config;
  double accuracy_mean = 0, accuracy_std = 0;
  double precision_mean = 0, precision_std = 0;
  double f1_mean = 0, f1_std = 0;
};

/// Mean and population standard deviation over folds, in percent.
inline MetricsRow summarize(const std::string& tag, const std::vector<Metrics>& folds) {
  auto stats = [&](auto field) {
    double mu = 0.0;
    for (const auto& m : folds) mu += m.*field;
    mu /= static_cast<double>(folds.size());
    double var = 0.0;
    for (const auto& m : folds) var += (m.*field - mu) * (m.*field - mu);
    var /= static_cast<double>(folds.size());
    return std::make_pair(100.0 * mu, 100.0 * std::sqrt(var));
  };
  MetricsRow row;
  row.config = tag;
  std::tie(row.accuracy_mean, row.accuracy_std) = stats(&Metrics::accuracy);
  std::tie(row.precision_mean, row.precision_std) = stats(&Metrics::precision);
  std::tie(row.f1_mean, row.f1_std) = stats(&Metrics::f1);
  return row;
}

// ---------------------------------------------------------------- folds

/// Stratified k-fold: each class is shuffled and dealt round-robin, so fold
/// sizes differ by at most one subject per class. Returns test indices.
inline std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, std::size_t k,
                                                              std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_folds: need at least 2 folds");
  std::vector<std::vector<std::size_t>> folds(k);
  Rng rng(derive_seed(seed, "folds"));
  std::size_t next = 0;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) members.push_back(i);
    if (members.size() < k)
      throw ConfigError("stratified_folds: class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                        " subjects, fewer than " + std::to_string(k) + " folds");
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t idx : members) folds[next++ % k].push_back(idx);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// ---------------------------------------------------------------- fusion training

/// Per-channel z-scoring fitted on training embeddings.
struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer identity(std::size_t c) { return {std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)}; }

  static Standardizer fit(const Tensor& x) {
    const std::size_t n = x.dim(0), c = x.dim(1);
    Standardizer s{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)};
    for (std::size_t j = 0; j < c; ++j) {
      double mu = 0.0, var = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += x.at(i, j);
      mu /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
      var /= static_cast<double>(n);
      s.mean[j] = mu;
      s.inv_std[j] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
    return s;
  }

  Tensor apply(const Tensor& x) const {
    Tensor out(x.shape());
    const std::size_t c = x.dim(1);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean[i % c]) * inv_std[i % c];
    return out;
  }
};

struct FusionInputs {
  Tensor rs;  // N x C
  Tensor rf;  // N x C
  std::vector<int> labels;
};

/// Splits rows `order[start..start+S)` into a fixed-size, zero-padded batch.
inline FusionBatch make_fusion_batch(const FusionInputs& in, const std::vector<std::size_t>& order,
                                     std::size_t start, std::size_t s) {
  const std::size_t c = in.rs.dim(1);
  FusionBatch b{Tensor({s, c}), Tensor({s, c}), std::vector<int>(s, 0), Tensor({s})};
  for (std::size_t r = 0; r < s && start + r < order.size(); ++r) {
    const std::size_t idx = order[start + r];
    std::copy_n(in.rs.values().data() + idx * c, c, b.rs.values().data() + r * c);
    std::copy_n(in.rf.values().data() + idx * c, c, b.rf.values().data() + r * c);
    b.labels[r] = in.labels[idx];
    b.valid[r] = 1.0;
  }
  return b;
}

struct FusionTrainResult {
  ParamStore params;
  std::vector<double> loss_trace;
};

/// Adam on the joint loss over fusion parameters only. Inputs are fixed
/// embeddings from frozen backbones.
inline FusionTrainResult train_fusion(const FusionInputs& in, const FusionConfig& cfg, const LossWeights& weights) {
  cfg.validate();
  weights.validate();
  if (in.labels.empty()) throw ConfigError("train_fusion: no training subjects");
  FusionTrainResult res{init_fusion(cfg), {}};
  Adam adam(AdamConfig{cfg.lr});
  Rng rng(derive_seed(cfg.seed, "fusion-train"));
  std::vector<std::size_t> order(in.labels.size());
  std::iota(order.begin(), order.end(), 0);
  const std::vector<double> head_weights = weights.for_heads(cfg.num_heads());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const FusionBatch batch = make_fusion_batch(in, order, start, cfg.batch);
      ad::Tape tape;
      const Bound p = res.params.bind(tape);
      FusionOutputs out = fusion_forward(p, cfg, tape, batch, true, rng);
      ad::Var loss = joint_loss(out.logits, head_weights, batch.labels, batch.valid);
      double n_valid = 0.0;
      for (double v : batch.valid.values()) n_valid += v;
      total += loss.value().item() * n_valid;
      adam.step(res.params, tape.backward(loss));
    }
    const double epoch_loss = total / static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) throw NumericError("train_fusion: non-finite loss at epoch " + std::to_string(epoch));
    res.loss_trace.push_back(epoch_loss);
  }
  return res;
}

/// Final-head logits for every subject, evaluated in input order with
/// deterministic zero-padded batches.
inline Tensor fusion_logits(const ParamStore& params, const FusionConfig& cfg, const FusionInputs& in) {
  const std::size_t n = in.labels.size();
  Tensor out({n, 2});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng unused(0);
  ParamStore frozen = params;
  frozen.freeze();
  for (std::size_t start = 0; start < n; start += cfg.batch) {
    const FusionBatch batch = make_fusion_batch(in, order, start, cfg.batch);
    ad::Tape tape;
    FusionOutputs o = fusion_forward(frozen.bind(tape), cfg, tape, batch, false, unused);
    const Tensor& z = o.logits.back().value();
    for (std::size_t r = 0; r < cfg.batch && start + r < n; ++r) {
      out.at(start + r, 0) = z.at(r, 0);
      out.at(start + r, 1) = z.at(r, 1);
    }
  }
  return out;
}

// ---------------------------------------------------------------- pipeline

struct GraphConfig {
  std::size_t k = 5;
  LdpNeighborhood ldp = LdpNeighborhood::OneHop;
};

struct PipelineSettings {
  GraphConfig graph;
  BackboneConfig backbone;
  MaskConfig mask;
  FinetuneConfig finetune;
  FusionConfig fusion;
  LossWeights loss;
  bool standardize = false;  // z-score fusion inputs with train-fold statistics
  bool loss_grid = false;  // fold-local grid search over alpha, beta, gamma
  std::size_t folds = 5;
  std::uint64_t seed = 1;
};

struct FusionVariant {
  FusionMethod method = FusionMethod::ConneX;
  bool unified = true;

  std::string tag() const {
    return std::string("SC+FNC/Y/") + (unified ? "Y/" : "N/") + fusion_method_name(method);
  }
};

inline std::vector<FusionVariant> ablation_variants() {
  std::vector<FusionVariant> v;
  for (bool unified : {false, true})
    for (FusionMethod m : {FusionMethod::Concat, FusionMethod::CrossAtt, FusionMethod::ConneX}) v.push_back({m, unified});
  return v;
}

inline std::string unimodal_tag(Modality m, bool explained) {
  return std::string(m == Modality::Structural ? "SC" : "FNC") + (explained ? "/Y/-/-" : "/N/-/-");
}

/// Ids fed into each training stage of one fold (for leakage audits).
struct FoldAudit {
  std::set<std::string> test_ids;
  std::map<std::string, std::set<std::string>> stage_ids;  // stage -> ids
};

struct FoldResult {
  std::map<std::string, Metrics> metrics;  // config tag -> test metrics
  FoldAudit audit;
  std::array<GlobalEdgeMask, 2> masks;
  std::array<std::vector<double>, 2> finetune_trace;
  std::map<std::string, std::vector<double>> fusion_trace;
  double seconds = 0.0;  // wall time of the fold
};

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  for (std::size_t i : idx) out.push_back(ds[i]);
  return out;
}

inline std::set<std::string> ids_of(const Dataset& ds) {
  std::set<std::string> out;
  for (const auto& s : ds) out.insert(s.id);
  return out;
}

/// Picks loss weights on an inner stratified 80:20 split of the training fold.
inline LossWeights grid_search_loss(const FusionInputs& train, const FusionConfig& cfg, std::uint64_t seed) {
  const auto inner = stratified_folds(train.labels, 5, derive_seed(seed, "loss-grid"));
  std::vector<bool> is_val(train.labels.size(), false);
  for (std::size_t i : inner[0]) is_val[i] = true;
  auto pick = [&](bool val) {
    FusionInputs out{Tensor(), Tensor(), {}};
    std::vector<double> rs, rf;
    const std::size_t c = train.rs.dim(1);
    for (std::size_t i = 0; i < train.labels.size(); ++i) {
      if (is_val[i] != val) continue;
      rs.insert(rs.end(), train.rs.values().begin() + static_cast<std::ptrdiff_t>(i * c),
                train.rs.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
      rf.insert(rf.end(), train.rf.values().begin() + static_cast<std::ptrdiff_t>(i * c),
                train.rf.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
      out.labels.push_back(train.labels[i]);
    }
    out.rs = Tensor({out.labels.size(), c}, std::move(rs));
    out.rf = Tensor({out.labels.size(), c}, std::move(rf));
    return out;
  };
  const FusionInputs fit = pick(false), val = pick(true);
  LossWeights best;
  double best_acc = -1.0;
  for (double a : {0.1, 0.15, 0.2})
    for (double b : {0.1, 0.15, 0.2})
      for (double g : {0.1, 0.15, 0.2}) {
        LossWeights w{a, b, g, 1.0 - a - b - g};
        auto trained = train_fusion(fit, cfg, w);
        const double acc = metrics(predict(fusion_logits(trained.params, cfg, val)), val.labels).accuracy;
        if (acc > best_acc) {
          best_acc = acc;
          best = w;
        }
      }
  return best;
}

/// Runs the full pipeline on one fold: backbone training, mask learning and
/// fine-tuning per modality, then every requested fusion variant. Only the
/// training split reaches any training stage.
inline FoldResult run_fold(const Dataset& ds, const std::vector<std::size_t>& train_idx,
                           const std::vector<std::size_t>& test_idx, const PipelineSettings& cfg,
                           const std::vector<FusionVariant>& variants, std::size_t fold) {
  const Dataset train = subset(ds, train_idx);
  const Dataset test = subset(ds, test_idx);
  const std::vector<int> y_train = labels_of(train), y_test = labels_of(test);
  FoldResult res;
  res.audit.test_ids = ids_of(test);
  const std::uint64_t fold_seed = derive_seed(cfg.seed, "fold", fold);

  std::array<Tensor, 2> emb_train, emb_test;
  std::array<ParamStore, 2> backbones;
  std::array<std::vector<ConnectomeGraph>, 2> test_graphs;
  for (Modality mod : {Modality::Structural, Modality::Functional}) {
    const std::size_t mi = mod == Modality::Structural ? 0 : 1;
    const std::string mname = modality_name(mod);
    const auto g_train = build_graphs(train, mod, cfg.graph.k, cfg.graph.ldp);
    const auto g_test = build_graphs(test, mod, cfg.graph.k, cfg.graph.ldp);

    BackboneConfig bcfg = cfg.backbone;
    bcfg.seed = derive_seed(fold_seed, "backbone-" + mname);
    TrainResult base = train_backbone(g_train, y_train, bcfg);
    res.audit.stage_ids["backbone-" + mname] = ids_of(train);
    base.params.freeze();
    res.metrics[unimodal_tag(mod, false)] =
        metrics(predict(embed_graphs(g_test, base.params, bcfg).logits), y_test);

    MaskConfig mcfg = cfg.mask;
    mcfg.seed = derive_seed(fold_seed, "mask-" + mname);
    MaskResult mask = learn_global_mask(g_train, base.params, bcfg, mod, mcfg);
    res.audit.stage_ids["mask-" + mname] = ids_of(train);

    TrainResult tuned = finetune_backbone(g_train, y_train, mask.mask, base.params, bcfg, cfg.finetune);
    res.audit.stage_ids["finetune-" + mname] = ids_of(train);
    tuned.params.freeze();
    res.finetune_trace[mi] = tuned.loss_trace;
    const auto g_train_masked = apply_mask(g_train, mask.mask);
    const auto g_test_masked = apply_mask(g_test, mask.mask);
    const Embeddings tuned_test = embed_graphs(g_test_masked, tuned.params, bcfg);
    res.metrics[unimodal_tag(mod, true)] = metrics(predict(tuned_test.logits), y_test);
    emb_train[mi] = embed_graphs(g_train_masked, tuned.params, bcfg).embedding;
    emb_test[mi] = tuned_test.embedding;
    res.masks[mi] = mask.mask;
    backbones[mi] = tuned.params;
    test_graphs[mi] = g_test_masked;
  }
  const std::array<ParamStore, 2> snapshot = backbones;

  FusionInputs fin_train{emb_train[0], emb_train[1], y_train};
  FusionInputs fin_test{emb_test[0], emb_test[1], y_test};
  if (cfg.standardize) {
    const Standardizer s0 = Standardizer::fit(emb_train[0]), s1 = Standardizer::fit(emb_train[1]);
    fin_train.rs = s0.apply(emb_train[0]);
    fin_train.rf = s1.apply(emb_train[1]);
    fin_test.rs = s0.apply(emb_test[0]);
    fin_test.rf = s1.apply(emb_test[1]);
  }
  for (const FusionVariant& v : variants) {
    FusionConfig fcfg = cfg.fusion;
    fcfg.method = v.method;
    fcfg.unified = v.unified;
    fcfg.channels = cfg.backbone.channels;
    fcfg.seed = derive_seed(fold_seed, "fusion-" + v.tag());
    const LossWeights w = cfg.loss_grid && v.method == FusionMethod::ConneX
                              ? grid_search_loss(fin_train, fcfg, fcfg.seed)
                              : cfg.loss;
    FusionTrainResult fused = train_fusion(fin_train, fcfg, w);
    res.audit.stage_ids["fusion-" + v.tag()] = ids_of(train);
    res.fusion_trace[v.tag()] = fused.loss_trace;
    res.metrics[v.tag()] = metrics(predict(fusion_logits(fused.params, fcfg, fin_test)), y_test);
  }
  // Fusion must never touch the backbones: same bytes, same test embeddings.
  for (std::size_t mi = 0; mi < 2; ++mi) {
    if (!backbones[mi].frozen() || !(backbones[mi] == snapshot[mi]) ||
        !(embed_graphs(test_graphs[mi], backbones[mi], cfg.backbone).embedding == emb_test[mi]))
      throw StateError("run_fold: backbone changed during fusion training");
  }
  return res;
}

struct CrossValidationReport {
  std::vector<std::string> order;  // row order of tags
  std::vector<FoldResult> folds;
  std::vector<std::vector<std::size_t>> test_folds;

  std::vector<MetricsRow> rows() const {
    std::vector<MetricsRow> out;
    for (const auto& tag : order) {
      std::vector<Metrics> per_fold;
      for (const auto& f : folds) per_fold.push_back(f.metrics.at(tag));
      out.push_back(summarize(tag, per_fold));
    }
    return out;
  }

  double mean_accuracy(const std::string& tag) const {
    double total = 0.0;
    for (const auto& f : folds) total += f.metrics.at(tag).accuracy;
    return total / static_cast<double>(folds.size());
  }
};

/// Stratified k-fold evaluation; the whole pipeline runs inside each fold.
inline CrossValidationReport cross_validate(const Dataset& ds, const PipelineSettings& cfg,
                                            const std::vector<FusionVariant>& variants) {
  const auto labels = labels_of(ds);
  CrossValidationReport rep;
  rep.test_folds = stratified_folds(labels, cfg.folds, cfg.seed);
  for (Modality m : {Modality::Structural, Modality::Functional})
    for (bool explained : {false, true}) rep.order.push_back(unimodal_tag(m, explained));
  for (const auto& v : variants) rep.order.push_back(v.tag());
  for (std::size_t f = 0; f < rep.test_folds.size(); ++f) {
    std::vector<std::size_t> train_idx;
    std::set<std::size_t> test_set(rep.test_folds[f].begin(), rep.test_folds[f].end());
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (!test_set.count(i)) train_idx.push_back(i);
    const auto start = std::chrono::steady_clock::now();
    rep.folds.push_back(run_fold(ds, train_idx, rep.test_folds[f], cfg, variants, f));
    rep.folds.back().seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return rep;
}

/// Ablation matrix: 4 unimodal rows plus {Concat, Cross-Att, ConneX} x
/// {without, with} the unified branch.
inline CrossValidationReport run_ablations(const Dataset& ds, const PipelineSettings& cfg) {
  return cross_validate(ds, cfg, ablation_variants());
}

}  // namespace connex
