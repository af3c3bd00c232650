#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "connex/autodiff.hpp"
#include "connex/gradcheck.hpp"

using namespace connex;
using namespace connex::ad;

namespace {

constexpr double kGradTol = 1e-4;

Tensor randn(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor(s, rng);
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 1.5);
}

TEST(Forward, SigmoidOfZeroIsHalf) {
  Tape tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape.constant(Tensor::scalar(0.0))).value().item(), 0.5);
}

TEST(Forward, SoftmaxOfEqualLogitsIsUniform) {
  Tape tape;
  const Tensor p = softmax(tape.constant(Tensor::matrix(1, 2, {0.0, 0.0}))).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Forward, IdentityMatmul) {
  Tape tape;
  const Tensor x = randn({3, 5}, 1);
  const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(tape.constant(eye), tape.constant(x)).value(), x);
}

TEST(Forward, ShapeErrorsNameTheOperator) {
  Tape tape;
  try {
    matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(add(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3, 2}))), ShapeError);
}

TEST(Forward, NonFiniteResultIsNumericError) {
  Tape tape;
  Var big = tape.constant(Tensor::scalar(1e200));
  EXPECT_THROW(mul(big, big), NumericError);
  EXPECT_THROW(tape.leaf("x", Tensor::scalar(std::nan(""))), NumericError);
}

TEST(Forward, SoftmaxRowsSumToOneAndArePositive) {
  Tape tape;
  const Tensor p = softmax(tape.constant(randn({50, 7}, 2))).value();
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GT(p.at(r, c), 0.0);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, LayerNormRowStatistics) {
  // Output variance is v / (v + eps), so the 1e-6 bound needs v well above 10 * eps / 1e-6.
  Tape tape;
  std::mt19937_64 rng(3);
  const Tensor y = layer_norm(tape.constant(random_tensor({20, 16}, rng, 10.0))).value();
  for (std::size_t r = 0; r < 20; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mu += y.at(r, c);
    mu /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
    var /= 16;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Forward, LayerNormVarianceIncludesEpsilon) {
  Tape tape;
  const Tensor x = randn({10, 9}, 4);
  const Tensor y = layer_norm(tape.constant(x)).value();
  for (std::size_t r = 0; r < 10; ++r) {
    double mx = 0.0, vx = 0.0, my = 0.0, vy = 0.0;
    for (std::size_t c = 0; c < 9; ++c) mx += x.at(r, c), my += y.at(r, c);
    mx /= 9, my /= 9;
    for (std::size_t c = 0; c < 9; ++c)
      vx += (x.at(r, c) - mx) * (x.at(r, c) - mx), vy += (y.at(r, c) - my) * (y.at(r, c) - my);
    vx /= 9, vy /= 9;
    EXPECT_NEAR(vy, vx / (vx + 1e-5), 1e-12);
  }
}

TEST(Forward, GeluTanhForm) {
  Tape tape;
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double expect = 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
    EXPECT_NEAR(gelu(tape.constant(Tensor::scalar(x))).value().item(), expect, 1e-15);
  }
}

TEST(Forward, DropoutIsInvertedAndIdentityAtEval) {
  Tape tape;
  std::mt19937_64 rng(5);
  const Tensor x({1000}, 1.0);
  const Tensor train = dropout(tape.constant(x), 0.6, true, rng).value();
  for (double v : train.values()) EXPECT_TRUE(v == 0.0 || std::abs(v - 2.5) < 1e-12);
  EXPECT_EQ(dropout(tape.constant(x), 0.6, false, rng).value(), x);
  EXPECT_THROW(dropout(tape.constant(x), 1.0, true, rng), ConfigError);
}

TEST(Backward, SigmoidSlopeAtZero) {
  Tape tape;
  Var x = tape.leaf("x", Tensor::scalar(0.0));
  EXPECT_DOUBLE_EQ(tape.backward(sigmoid(x)).at("x").item(), 0.25);
}

TEST(Backward, GeluSlopeAtZeroMatchesFiniteDifference) {
  Tape tape;
  Var x = tape.leaf("x", Tensor::scalar(0.0));
  const double analytic = tape.backward(gelu(x)).at("x").item();
  auto f = [](double v) {
    Tape t;
    return gelu(t.constant(Tensor::scalar(v))).value().item();
  };
  const double h = 1e-6;
  EXPECT_NEAR(analytic, (f(h) - f(-h)) / (2 * h), 1e-8);
  EXPECT_NEAR(analytic, 0.5, 1e-12);
}

TEST(Backward, LayerNormOfConstantRowHasNoGradientAlongOnes) {
  Tape tape;
  Var x = tape.leaf("x", Tensor({1, 6}, 2.0));
  const Tensor proj = randn({1, 6}, 4);
  const Tensor g = tape.backward(sum(mul(layer_norm(x), tape.constant(proj)))).at("x");
  double along_ones = 0.0;
  for (double v : g.values()) along_ones += v;
  EXPECT_NEAR(along_ones, 0.0, 1e-9);
}

TEST(Backward, UnusedLeafGetsZeroGradient) {
  Tape tape;
  Var x = tape.leaf("x", randn({2, 2}, 5));
  tape.leaf("unused", randn({3}, 6));
  auto grads = tape.backward(sum(x));
  ASSERT_TRUE(grads.count("unused"));
  EXPECT_EQ(grads.at("unused"), Tensor({3}, 0.0));
  EXPECT_EQ(grads.at("x"), Tensor({2, 2}, 1.0));
}

TEST(Backward, StateAndShapeErrors) {
  Tape tape;
  EXPECT_THROW(tape.backward(Var()), StateError);
  Tape other;
  Var foreign = other.leaf("y", Tensor::scalar(1.0));
  EXPECT_THROW(tape.backward(foreign), StateError);
  Var v = tape.leaf("x", randn({3}, 1));
  EXPECT_THROW(tape.backward(v), ShapeError);
}

TEST(Backward, DeterministicBytes) {
  auto run = [] {
    Tape tape;
    Var a = tape.leaf("a", randn({4, 5}, 8));
    Var b = tape.leaf("b", randn({5, 3}, 9));
    Var loss = mean_all(softmax(gelu(matmul(a, b))));
    return tape.backward(loss);
  };
  const auto g1 = run(), g2 = run();
  for (const auto& [name, t] : g1) {
    ASSERT_EQ(t.size(), g2.at(name).size());
    EXPECT_EQ(0, std::memcmp(t.values().data(), g2.at(name).values().data(), t.size() * sizeof(double))) << name;
  }
}

TEST(Backward, CrossEntropyWeightsAndSoftTargets) {
  Tape tape;
  Var logits = tape.leaf("z", Tensor::matrix(2, 2, {0.0, 0.0, 3.0, -1.0}));
  const Tensor targets = Tensor::matrix(2, 2, {0.0, 1.0, 1.0, 0.0});
  // Only the first row counts: uniform logits cost ln 2.
  Var loss = cross_entropy(logits, targets, Tensor::vector({1.0, 0.0}));
  EXPECT_NEAR(loss.value().item(), std::log(2.0), 1e-15);
  const Tensor g = tape.backward(loss).at("z");
  EXPECT_DOUBLE_EQ(g.at(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(g.at(1, 1), 0.0);
}

TEST(GradCheck, SpecExamples) {
  EXPECT_LT(grad_check("softmax", randn({4}, 1)), kGradTol);
  EXPECT_LT(grad_check("matmul", randn({3, 3}, 2)), kGradTol);
  EXPECT_LT(grad_check("layer_norm", randn({8}, 3)), kGradTol);
}

class OperatorGradCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(OperatorGradCheck, TwentyRandomPoints) {
  for (std::uint64_t point = 0; point < 20; ++point) {
    const Tensor x = randn({3, 4}, 100 + point);
    EXPECT_LT(grad_check(GetParam(), x, 500 + point), kGradTol) << GetParam() << " point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOperators, OperatorGradCheck, ::testing::ValuesIn(checked_operators()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, UnknownOperatorIsConfigError) {
  EXPECT_THROW(grad_check("frobnicate", randn({2}, 1)), ConfigError);
}
