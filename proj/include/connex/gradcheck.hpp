#pragma once

// Central-difference gradient checking for the autodiff operators and for
// arbitrary composite blocks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "connex/autodiff.hpp"

namespace connex {

using BlockFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(shape);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

/// Max over all entries of all inputs of
///   |analytic - central difference| / max(1, |central difference|).
/// Non-scalar outputs are reduced with a fixed random projection.
inline double grad_check(const BlockFn& f, const std::vector<Tensor>& inputs,
                         std::uint64_t seed = 7, double h = 1e-6) {
  std::optional<Tensor> projection;
  auto evaluate = [&](const std::vector<Tensor>& xs, ad::Tape& tape, bool with_grad = true) {
    std::vector<ad::Var> vars;
    for (std::size_t i = 0; i < xs.size(); ++i)
      vars.push_back(tape.leaf("x" + std::to_string(i), xs[i], with_grad));
    ad::Var out = f(tape, vars);
    if (!projection || projection->shape() != out.shape()) {
      std::mt19937_64 rng(seed);
      projection = random_tensor(out.shape(), rng);
    }
    return std::make_pair(vars, ad::sum(ad::mul(out, tape.constant(*projection))));
  };

  ad::Tape tape;
  auto [vars, loss] = evaluate(inputs, tape);
  auto grads = tape.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = grads.at("x" + std::to_string(i));
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      const double orig = probe[i][e];
      probe[i][e] = orig + h;
      ad::Tape tp;
      const double fp = evaluate(probe, tp, false).second.value().item();
      probe[i][e] = orig - h;
      ad::Tape tm;
      const double fm = evaluate(probe, tm, false).second.value().item();
      probe[i][e] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[e] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

namespace detail {

// Moves entries off the ReLU kink so central differences never straddle it.
inline Tensor away_from_kinks(Tensor t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values())
    while (std::abs(v) < 1e-3) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

inline Tensor as_matrix(const Tensor& t) {
  if (t.rank() == 2) return t;
  return t.reshaped({1, t.size()});
}

}  // namespace detail

/// Gradient check of a named primitive operator at `point`. Secondary operands
/// (e.g. the right-hand matrix for matmul) are drawn from `seed`.
inline double grad_check(std::string_view op, const Tensor& point, std::uint64_t seed = 11) {
  using namespace ad;
  std::mt19937_64 rng(seed);
  const Tensor m = connex::detail::as_matrix(point);
  const std::size_t rows = m.dim(0), cols = m.dim(1);

  if (op == "matmul")
    return grad_check([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                      {m, random_tensor({cols, 3}, rng)});
  if (op == "bmm") {
    const Tensor a = m.reshaped({1, rows, cols});
    return grad_check([](Tape&, const std::vector<Var>& v) { return bmm(v[0], v[1]); },
                      {a, random_tensor({1, cols, 2}, rng)});
  }
  if (op == "transpose")
    return grad_check([](Tape&, const std::vector<Var>& v) { return transpose(v[0]); }, {m});
  if (op == "add")
    return grad_check([](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); },
                      {m, random_tensor(m.shape(), rng)});
  if (op == "subtract")
    return grad_check([](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); },
                      {m, random_tensor(m.shape(), rng)});
  if (op == "multiply")
    return grad_check([](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); },
                      {m, random_tensor(m.shape(), rng)});
  if (op == "add_row")
    return grad_check([](Tape&, const std::vector<Var>& v) { return add_row(v[0], v[1]); },
                      {m, random_tensor({cols}, rng)});
  if (op == "scale_shift")
    return grad_check([](Tape&, const std::vector<Var>& v) { return scale_shift(v[0], v[1], v[2]); },
                      {m, random_tensor({cols}, rng), random_tensor({cols}, rng)});
  if (op == "scale_rows")
    return grad_check([](Tape&, const std::vector<Var>& v) { return scale_rows(v[0], v[1]); },
                      {m, random_tensor({rows}, rng)});
  if (op == "concat")
    return std::max(grad_check([](Tape&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); },
                               {m, random_tensor({rows, 2}, rng)}),
                    grad_check([](Tape&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 0); },
                               {m, random_tensor({2, cols}, rng)}));
  if (op == "slice")
    return std::max(grad_check([cols](Tape&, const std::vector<Var>& v) {
                      return slice(v[0], 1, 0, std::max<std::size_t>(1, cols / 2));
                    }, {m}),
                    grad_check([rows](Tape&, const std::vector<Var>& v) {
                      return slice(v[0], 0, rows / 2, rows);
                    }, {m}));
  if (op == "reshape")
    return grad_check([](Tape&, const std::vector<Var>& v) {
      return reshape(v[0], {v[0].value().size()});
    }, {m});
  if (op == "mean")
    return std::max(grad_check([](Tape&, const std::vector<Var>& v) { return mean(v[0], 0); }, {m}),
                    grad_check([](Tape&, const std::vector<Var>& v) { return mean(v[0], 1); }, {m}));
  if (op == "sum")
    return grad_check([](Tape&, const std::vector<Var>& v) { return sum(v[0]); }, {m});
  if (op == "sigmoid")
    return grad_check([](Tape&, const std::vector<Var>& v) { return sigmoid(v[0]); }, {m});
  if (op == "relu")
    return grad_check([](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
                      {connex::detail::away_from_kinks(m, rng)});
  if (op == "softplus")
    return grad_check([](Tape&, const std::vector<Var>& v) { return softplus(v[0]); }, {m});
  if (op == "gelu")
    return grad_check([](Tape&, const std::vector<Var>& v) { return gelu(v[0]); }, {m});
  if (op == "softmax")
    return grad_check([](Tape&, const std::vector<Var>& v) { return softmax(v[0]); }, {m});
  if (op == "layer_norm")
    return grad_check([](Tape&, const std::vector<Var>& v) { return layer_norm(v[0]); }, {m});
  if (op == "dropout")
    return grad_check([seed](Tape&, const std::vector<Var>& v) {
      std::mt19937_64 local(seed);
      return dropout(v[0], 0.4, true, local);
    }, {m});
  if (op == "gather_rows") {
    std::uniform_int_distribution<std::size_t> pick(0, rows - 1);
    std::vector<std::size_t> index(rows + 2);
    for (auto& i : index) i = pick(rng);
    return grad_check([index](Tape&, const std::vector<Var>& v) { return gather_rows(v[0], index); }, {m});
  }
  if (op == "scatter_sum") {
    std::uniform_int_distribution<std::size_t> pick(0, 2);
    std::vector<std::size_t> index(rows);
    for (auto& i : index) i = pick(rng);
    return grad_check([index](Tape&, const std::vector<Var>& v) { return scatter_sum(v[0], index, 3); }, {m});
  }
  if (op == "cross_entropy") {
    Tensor targets(m.shape());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += (targets.at(r, c) = u(rng));
      for (std::size_t c = 0; c < cols; ++c) targets.at(r, c) /= s;
    }
    Tensor weights({rows}, 1.0);
    weights[0] = 0.5;
    return grad_check([targets, weights](Tape&, const std::vector<Var>& v) {
      return cross_entropy(v[0], targets, weights);
    }, {m});
  }
  throw ConfigError("grad_check: unknown operator '" + std::string(op) + "'");
}

inline const std::vector<std::string>& checked_operators() {
  static const std::vector<std::string> ops = {
      "matmul",   "bmm",        "transpose", "add",         "subtract",    "multiply",
      "add_row",  "scale_shift", "scale_rows", "concat",    "slice",       "reshape",
      "mean",     "sum",        "sigmoid",   "relu",        "softplus",    "gelu",
      "softmax",  "layer_norm", "dropout",   "gather_rows", "scatter_sum", "cross_entropy"};
  return ops;
}

}  // namespace connex
