#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>

#include "connex/autodiff.hpp"

namespace connex {

using Rng = std::mt19937_64;

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent, reproducible substream seed for a named stage.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(base ^ mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stage, std::uint64_t index) {
  return mix64(derive_seed(base, stage) + index);
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

/// Variables bound from a ParamStore onto one tape.
class Bound {
 public:
  const ad::Var& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  void insert(std::string name, ad::Var v) { vars_.emplace(std::move(name), v); }

 private:
  std::map<std::string, ad::Var> vars_;
};

/// Named parameter tensors. Ordered by name so iteration (and therefore
/// optimisation and serialisation) is deterministic.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (!params_.emplace(name, std::move(value)).second)
      throw ConfigError("duplicate parameter '" + name + "'");
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  const std::map<std::string, Tensor>& items() const noexcept { return params_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  /// Frozen stores bind as constants; trainable ones as gradient leaves.
  Bound bind(ad::Tape& tape, const std::string& prefix = "") const {
    Bound b;
    for (const auto& [name, t] : params_)
      b.insert(name, frozen_ ? tape.constant(t) : tape.leaf(prefix + name, t, true));
    return b;
  }

  void freeze() noexcept { frozen_ = true; }
  void unfreeze() noexcept { frozen_ = false; }
  bool frozen() const noexcept { return frozen_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::map<std::string, Tensor> params_;
  bool frozen_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update. `grads` keys are `prefix + parameter name`.
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads,
            const std::string& prefix = "") {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, _] : params.items()) {
      auto g = grads.find(prefix + name);
      if (g == grads.end()) continue;
      Tensor& p = params.get(name);
      auto [mit, fresh] = m_.try_emplace(name, p.shape());
      Tensor& m = mit->second;
      Tensor& v = v_.try_emplace(name, p.shape()).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g->second[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  double lr() const noexcept { return cfg_.lr; }

 private:
  AdamConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  long t_ = 0;
};

/// x[N, in] W[in, out] + b[out]
inline ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

inline void add_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng, bool bias = true) {
  store.add(name + ".w", glorot_uniform({in, out}, in, out, rng));
  if (bias) store.add(name + ".b", Tensor({out}, 0.0));
}

inline ad::Var apply_linear(const Bound& p, const std::string& name, const ad::Var& x) {
  if (p.contains(name + ".b")) return linear(x, p[name + ".w"], p[name + ".b"]);
  return ad::matmul(x, p[name + ".w"]);
}

inline void add_layer_norm(ParamStore& store, const std::string& name, std::size_t width) {
  store.add(name + ".gamma", Tensor({width}, 1.0));
  store.add(name + ".beta", Tensor({width}, 0.0));
}

inline ad::Var apply_layer_norm(const Bound& p, const std::string& name, const ad::Var& x) {
  return ad::scale_shift(ad::layer_norm(x), p[name + ".gamma"], p[name + ".beta"]);
}

}  // namespace connex
