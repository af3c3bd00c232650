#pragma once

// Cross-modal attention-mixer fusion.
//
// Layout conventions:
//   * A fusion batch holds S subjects (S is fixed; short batches are
//     zero-padded and carry a validity mask).
//   * Each subject's C-dim embedding is cut into T tokens of C/T dims and
//     projected to model_dim. Attention runs within a subject only.
//   * Mixers see S x width matrices: token mixing runs across subjects,
//     channel mixing across features.
//   * Concatenation order is always (structural, functional, unified).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "connex/autodiff.hpp"
#include "connex/nn.hpp"

namespace connex {

enum class FusionMethod { Concat, CrossAtt, ConneX };

inline const char* fusion_method_name(FusionMethod m) {
  switch (m) {
    case FusionMethod::Concat: return "Concat";
    case FusionMethod::CrossAtt: return "Cross-Att";
    case FusionMethod::ConneX: return "ConneX";
  }
  return "?";
}

inline FusionMethod parse_fusion_method(std::string_view s) {
  if (s == "Concat" || s == "concat") return FusionMethod::Concat;
  if (s == "Cross-Att" || s == "crossatt" || s == "cross-att") return FusionMethod::CrossAtt;
  if (s == "ConneX" || s == "connex") return FusionMethod::ConneX;
  throw ConfigError("unknown fusion method '" + std::string(s) + "'");
}

struct FusionConfig {
  FusionMethod method = FusionMethod::ConneX;
  bool unified = true;
  std::size_t batch = 8;       // S
  std::size_t channels = 32;   // C, backbone embedding width
  std::size_t tokens = 8;      // T
  std::size_t model_dim = 16;  // d
  std::size_t heads = 4;       // self-attention heads
  double dropout = 0.0;
  double lr = 1e-4;
  std::size_t epochs = 300;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch == 0 || channels == 0 || tokens == 0 || model_dim == 0 || heads == 0)
      throw ConfigError("fusion: sizes must be positive");
    if (channels % tokens != 0) throw ConfigError("fusion: channels must be divisible by tokens");
    if (model_dim % heads != 0) throw ConfigError("fusion: model_dim must be divisible by heads");
  }

  std::size_t views() const { return unified ? 3 : 2; }
  std::size_t cross_layers() const { return views() * (views() - 1); }
  std::size_t num_heads() const { return method == FusionMethod::ConneX ? views() + 1 : 1; }
};

inline constexpr std::array<const char*, 3> kViewNames = {"s", "f", "u"};

/// Inputs for one fixed-size batch. Padded rows are zero and invalid.
struct FusionBatch {
  Tensor rs;                // S x C
  Tensor rf;                // S x C
  std::vector<int> labels;  // S (padded rows: 0)
  Tensor valid;             // S, 1.0 for real subjects
};

// ---------------------------------------------------------------- mixer

/// Mixer weights: x1 [2S x S] and x2 [S x 2S] mix across subjects;
/// x3 [width x 2width] and x4 [2width x width] mix across channels
/// (stored for right multiplication).
inline void add_mixer(ParamStore& p, const std::string& name, std::size_t s, std::size_t width, Rng& rng) {
  const std::size_t hs = 2 * s, hc = 2 * width;
  p.add(name + ".x1", glorot_uniform({hs, s}, s, hs, rng));
  p.add(name + ".x2", glorot_uniform({s, hs}, hs, s, rng));
  p.add(name + ".x3", glorot_uniform({width, hc}, width, hc, rng));
  p.add(name + ".x4", glorot_uniform({hc, width}, hc, width, rng));
  add_layer_norm(p, name + ".ln1", width);
  add_layer_norm(p, name + ".ln2", width);
}

/// Z [S x width] ->
///   A = Z + X2 gelu(X1 LN(Z))        token mixing (across subjects)
///   B = A + gelu(LN(A) X3) X4        channel mixing (across features)
inline ad::Var mixer_layer(const Bound& p, const std::string& name, const ad::Var& z) {
  using namespace ad;
  const Var& x1 = p[name + ".x1"];
  const Var& x3 = p[name + ".x3"];
  if (z.shape().size() != 2 || z.dim(0) != x1.dim(1) || z.dim(1) != x3.dim(0))
    throw ShapeError("mixer_layer '" + name + "': input " + shape_str(z.shape()) + " does not match S=" +
                     std::to_string(x1.dim(1)) + ", width=" + std::to_string(x3.dim(0)));
  Var a = add(z, matmul(p[name + ".x2"], gelu(matmul(x1, apply_layer_norm(p, name + ".ln1", z)))));
  return add(a, matmul(gelu(matmul(apply_layer_norm(p, name + ".ln2", a), x3)), p[name + ".x4"]));
}

// ---------------------------------------------------------------- attention

/// Records attention probability matrices when non-null (for inspection).
using AttentionTrace = std::vector<ad::Var>;

/// Scaled dot-product attention over [S*T, dk] inputs, per subject:
/// softmax(Q K^T / sqrt(dk)) V.
inline ad::Var scaled_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, std::size_t s,
                                std::size_t t, AttentionTrace* trace) {
  using namespace ad;
  const std::size_t dk = q.dim(1), dv = v.dim(1);
  Var q3 = reshape(q, {s, t, dk});
  Var k3 = reshape(k, {s, t, dk});
  Var v3 = reshape(v, {s, t, dv});
  Var probs = softmax(scale(bmm(q3, transpose(k3)), 1.0 / std::sqrt(static_cast<double>(dk))));
  if (trace) trace->push_back(probs);
  return reshape(bmm(probs, v3), {s * t, dv});
}

inline void add_encoder(ParamStore& p, const std::string& name, std::size_t d, Rng& rng) {
  for (const char* w : {".q", ".k", ".v", ".o", ".fcl"}) add_linear(p, name + w, d, d, rng);
  add_layer_norm(p, name + ".ln1", d);
  add_layer_norm(p, name + ".ln2", d);
}

/// tokens [S*T, d] ->
///   x1  = LN(tokens + MultiHeadSelfAttn(tokens))
///   out = LN(x1 + gelu(FCL(x1)))
inline ad::Var self_attention_encoder(const Bound& p, const std::string& name, const ad::Var& tokens,
                                      std::size_t s, std::size_t t, std::size_t heads,
                                      AttentionTrace* trace = nullptr) {
  using namespace ad;
  const std::size_t d = tokens.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("self_attention_encoder: model dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (tokens.dim(0) != s * t) throw ShapeError("self_attention_encoder: expected S*T token rows");
  Var q = apply_linear(p, name + ".q", tokens);
  Var k = apply_linear(p, name + ".k", tokens);
  Var v = apply_linear(p, name + ".v", tokens);
  const std::size_t dh = d / heads;
  std::vector<Var> per_head;
  for (std::size_t h = 0; h < heads; ++h)
    per_head.push_back(scaled_attention(slice(q, 1, h * dh, (h + 1) * dh), slice(k, 1, h * dh, (h + 1) * dh),
                                        slice(v, 1, h * dh, (h + 1) * dh), s, t, trace));
  Var attn = apply_linear(p, name + ".o", heads == 1 ? per_head.front() : concat(per_head, 1));
  Var x1 = apply_layer_norm(p, name + ".ln1", add(tokens, attn));
  return apply_layer_norm(p, name + ".ln2", add(x1, gelu(apply_linear(p, name + ".fcl", x1))));
}

inline void add_cross_attention(ParamStore& p, const std::string& name, std::size_t d, Rng& rng) {
  for (const char* w : {".q", ".k", ".v", ".o"}) add_linear(p, name + w, d, d, rng);
  add_layer_norm(p, name + ".ln", d);
}

/// Query and key from `qk_source`, value from `v_source`:
///   LN(qk_source + O(Attention(Q(qk), K(qk), V(v))))
inline ad::Var cross_attention(const Bound& p, const std::string& name, const ad::Var& qk_source,
                               const ad::Var& v_source, std::size_t s, std::size_t t,
                               AttentionTrace* trace = nullptr) {
  using namespace ad;
  if (qk_source.shape() != v_source.shape())
    throw ShapeError("cross_attention: sources " + shape_str(qk_source.shape()) + " vs " +
                     shape_str(v_source.shape()));
  Var attn = scaled_attention(apply_linear(p, name + ".q", qk_source), apply_linear(p, name + ".k", qk_source),
                              apply_linear(p, name + ".v", v_source), s, t, trace);
  return apply_layer_norm(p, name + ".ln", add(qk_source, apply_linear(p, name + ".o", attn)));
}

// ---------------------------------------------------------------- model

inline std::string cross_name(std::size_t qk, std::size_t v) {
  return std::string("cross.") + kViewNames[qk] + "_" + kViewNames[v];
}

/// Ordered (qk-source, v-source) pairs, grouped by qk-source.
inline std::vector<std::pair<std::size_t, std::size_t>> cross_pairs(std::size_t views) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < views; ++a)
    for (std::size_t b = 0; b < views; ++b)
      if (a != b) pairs.emplace_back(a, b);
  return pairs;
}

inline ParamStore init_fusion(const FusionConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "fusion-init"));
  ParamStore p;
  const std::size_t s = cfg.batch, c = cfg.channels, d = cfg.model_dim, views = cfg.views();
  if (cfg.unified) {
    add_mixer(p, "unified.mixer", s, 2 * c, rng);
    add_linear(p, "unified.fcl", 2 * c, c, rng);
  }
  if (cfg.method == FusionMethod::Concat) {
    add_linear(p, "head.c", views * c, 2, rng);
    return p;
  }
  for (std::size_t v = 0; v < views; ++v) {
    add_linear(p, std::string("enc.") + kViewNames[v] + ".tok", c / cfg.tokens, d, rng);
    add_encoder(p, std::string("enc.") + kViewNames[v], d, rng);
  }
  for (auto [a, b] : cross_pairs(views)) add_cross_attention(p, cross_name(a, b), d, rng);
  if (cfg.method == FusionMethod::CrossAtt) {
    add_linear(p, "head.c", cfg.cross_layers() * d, 2, rng);
    return p;
  }
  const std::size_t view_width = (views - 1) * d;
  for (std::size_t v = 0; v < views; ++v) {
    add_mixer(p, "mix." + std::to_string(v + 1), s, view_width, rng);
    add_linear(p, "head." + std::to_string(v + 1), view_width, 2, rng);
  }
  add_mixer(p, "mix.c", s, views * view_width, rng);
  add_linear(p, "head.c", views * view_width, 2, rng);
  return p;
}

struct FusionOutputs {
  std::optional<ad::Var> unified;  // Ru, S x C
  std::vector<ad::Var> views;      // H1..H3 (ConneX only)
  std::optional<ad::Var> fused;    // Hc (ConneX) or the stacked baseline features
  std::vector<ad::Var> logits;     // per head, S x 2; the final (c) head is last
  std::size_t cross_layers = 0;
};

inline ad::Var mask_rows(ad::Tape& tape, const ad::Var& x, const Tensor& valid) {
  return ad::scale_rows(x, tape.constant(valid));
}

/// Ru = FCL(mixer(concat(Rs', Rf'))) with the padded rows zeroed before mixing.
inline ad::Var unified_representation(const Bound& p, const ad::Var& rs, const ad::Var& rf, const Tensor& valid) {
  if (rs.shape() != rf.shape())
    throw ShapeError("unified_representation: " + shape_str(rs.shape()) + " vs " + shape_str(rf.shape()));
  ad::Tape& tape = rs.tape();
  ad::Var z = mask_rows(tape, ad::concat({rs, rf}, 1), valid);
  return apply_linear(p, "unified.fcl", mixer_layer(p, "unified.mixer", z));
}

/// Forward over already-recorded inputs rs, rf [S x C]; padded rows are the
/// zero entries of `valid`.
inline FusionOutputs fusion_forward(const Bound& p, const FusionConfig& cfg, ad::Tape& tape, const ad::Var& rs,
                                    const ad::Var& rf, const Tensor& valid, bool train, Rng& rng,
                                    AttentionTrace* trace = nullptr) {
  using namespace ad;
  const std::size_t s = cfg.batch, t = cfg.tokens, c = cfg.channels;
  if (rs.shape() != Shape{s, c} || rf.shape() != Shape{s, c} || valid.shape() != Shape{s})
    throw ShapeError("fusion_forward: batch must be " + std::to_string(s) + "x" + std::to_string(c) +
                     " (pad short batches), got " + shape_str(rs.shape()));
  FusionOutputs out;
  std::vector<Var> inputs = {rs, rf};
  if (cfg.unified) {
    out.unified = unified_representation(p, inputs[0], inputs[1], valid);
    inputs.push_back(*out.unified);
  }

  if (cfg.method == FusionMethod::Concat) {
    out.fused = concat(inputs, 1);
    out.logits.push_back(apply_linear(p, "head.c", *out.fused));
    return out;
  }

  std::vector<Var> encoded;
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    const std::string name = std::string("enc.") + kViewNames[v];
    Var tok = apply_linear(p, name + ".tok", reshape(inputs[v], {s * t, c / t}));
    encoded.push_back(self_attention_encoder(p, name, tok, s, t, cfg.heads, trace));
  }
  std::vector<std::vector<Var>> by_source(inputs.size());
  for (auto [a, b] : cross_pairs(inputs.size())) {
    Var x = cross_attention(p, cross_name(a, b), encoded[a], encoded[b], s, t, trace);
    x = dropout(x, cfg.dropout, train, rng);
    by_source[a].push_back(mean(reshape(x, {s, t, cfg.model_dim}), 1));
    ++out.cross_layers;
  }

  if (cfg.method == FusionMethod::CrossAtt) {
    std::vector<Var> stacked;
    for (const auto& group : by_source) stacked.insert(stacked.end(), group.begin(), group.end());
    out.fused = concat(stacked, 1);
    out.logits.push_back(apply_linear(p, "head.c", *out.fused));
    return out;
  }

  for (std::size_t v = 0; v < by_source.size(); ++v) {
    const std::string name = "mix." + std::to_string(v + 1);
    Var h = mixer_layer(p, name, mask_rows(tape, concat(by_source[v], 1), valid));
    out.views.push_back(h);
    out.logits.push_back(apply_linear(p, "head." + std::to_string(v + 1), h));
  }
  out.fused = mixer_layer(p, "mix.c", mask_rows(tape, concat(out.views, 1), valid));
  out.logits.push_back(apply_linear(p, "head.c", *out.fused));
  return out;
}

inline FusionOutputs fusion_forward(const Bound& p, const FusionConfig& cfg, ad::Tape& tape, const FusionBatch& batch,
                                    bool train, Rng& rng, AttentionTrace* trace = nullptr) {
  return fusion_forward(p, cfg, tape, tape.constant(batch.rs), tape.constant(batch.rf), batch.valid, train, rng,
                        trace);
}

}  // namespace connex
