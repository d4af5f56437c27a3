#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "rankcal/autodiff.hpp"
#include "rankcal/losses.hpp"
#include "support.hpp"

using namespace rankcal;
using testing_support::Gen;

TEST(Tensor, ShapeMatchesDataLength) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_TRUE(Tensor::scalar(4.0).is_scalar());
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph g;
  Var i = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var m = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(i, m).value(), Tensor::matrix(2, 2, {1, 2, 3, 4}));
}

TEST(Matmul, BasisRowSelectsEntry) {
  Graph g;
  Var a = g.constant(Tensor::matrix(1, 2, {1, 0}));
  Var b = g.constant(Tensor::matrix(2, 1, {0, 5}));
  EXPECT_EQ(matmul(a, b).value(), Tensor::matrix(1, 1, {0}));
}

TEST(Matmul, RandomProductsMatchTripleLoop) {
  Gen gen(11);
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor a = gen.matrix(3, 4), b = gen.matrix(4, 2);
    Graph g;
    const Tensor c = matmul(g.constant(a), g.constant(b)).value();
    const Tensor ref = testing_support::naive_matmul(a, b);
    for (std::size_t k = 0; k < c.size(); ++k) EXPECT_NEAR(c.data[k], ref.data[k], 1e-14);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientRulesMatchTransposedProducts) {
  Gen gen(12);
  const Tensor a = gen.matrix(3, 4), b = gen.matrix(4, 2), w = gen.matrix(3, 2);
  Graph g;
  Var av = g.leaf(a), bv = g.leaf(b);
  g.backward(sum(mul(matmul(av, bv), g.constant(w))));
  Tensor bt({2, 4}), at({4, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) bt(j, i) = b(i, j);
    for (std::size_t j = 0; j < 3; ++j) at(i, j) = a(j, i);
  }
  const Tensor da = testing_support::naive_matmul(w, bt);
  const Tensor db = testing_support::naive_matmul(at, w);
  for (std::size_t k = 0; k < da.size(); ++k) EXPECT_NEAR(g.grad(av).data[k], da.data[k], 1e-14);
  for (std::size_t k = 0; k < db.size(); ++k) EXPECT_NEAR(g.grad(bv).data[k], db.data[k], 1e-14);
}

TEST(Relu, ClampsNegativesAndZero) {
  Graph g;
  EXPECT_EQ(relu(g.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
  EXPECT_EQ(relu(g.constant(Tensor::vector({1, 2.5, 3}))).value(), Tensor::vector({1, 2.5, 3}));
}

TEST(Relu, SubgradientIsZeroAtAndBelowZero) {
  Graph g;
  Var x = g.leaf(Tensor::vector({-1, 2}));
  g.backward(sum(relu(x)));
  EXPECT_EQ(g.grad(x), Tensor::vector({0, 1}));
  Graph h;
  Var z = h.leaf(Tensor::vector({0.0}));
  h.backward(sum(relu(z)));
  EXPECT_EQ(h.grad(z).data[0], 0.0);
}

TEST(Softmax, UniformRowForEqualLogits) {
  Graph g;
  const Tensor p = softmax(g.constant(Tensor::matrix(1, 3, {0, 0, 0}))).value();
  for (double v : p.data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, EqualGapsGiveEqualRows) {
  Graph g;
  const Tensor p = softmax(g.constant(Tensor::matrix(2, 2, {0.25, 1.75, -3.0, -1.5}))).value();
  EXPECT_EQ(p(0, 0), p(1, 0));
  EXPECT_EQ(p(0, 1), p(1, 1));
}

TEST(Softmax, MatchesLongDoubleOracle) {
  Graph g;
  const Tensor p = softmax(g.constant(Tensor::matrix(1, 3, {1, 2, 3}))).value();
  const long double e1 = std::exp(1.0L), e2 = std::exp(2.0L), e3 = std::exp(3.0L);
  const long double s = e1 + e2 + e3;
  EXPECT_NEAR(p.data[0], static_cast<double>(e1 / s), 3e-16);
  EXPECT_NEAR(p.data[1], static_cast<double>(e2 / s), 3e-16);
  EXPECT_NEAR(p.data[2], static_cast<double>(e3 / s), 3e-16);
}

TEST(Softmax, RowsSumToOneForLargeLogits) {
  Gen gen(13);
  for (int rep = 0; rep < 200; ++rep) {
    Graph g;
    const Tensor p = softmax(g.constant(gen.matrix(4, 7, 1e3))).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += p(r, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, ShiftInvarianceIsBitwise) {
  Gen gen(14);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor z({3, 5});
    for (double& x : z.data) x = std::ldexp(static_cast<double>(gen.index(4096)) - 2048.0, -6);
    Tensor shifted = z;
    const double c = std::ldexp(static_cast<double>(gen.index(1024)), -3);
    for (double& x : shifted.data) x += c;
    Graph g;
    EXPECT_EQ(softmax(g.constant(z)).value(), softmax(g.constant(shifted)).value());
  }
}

TEST(Softmax, RejectsSingleClass) {
  Graph g;
  EXPECT_THROW(softmax(g.constant(Tensor::matrix(2, 1, {1, 2}))), ContractError);
}

TEST(MaxOverClasses, PicksRowMaximum) {
  Graph g;
  EXPECT_EQ(max_over_classes(g.constant(Tensor::matrix(1, 3, {0.1, 0.7, 0.2}))).value(), Tensor::vector({0.7}));
}

TEST(MaxOverClasses, TieRoutesGradientToLowestIndex) {
  Graph g;
  Var p = g.leaf(Tensor::matrix(1, 2, {0.5, 0.5}));
  Var m = max_over_classes(p);
  EXPECT_EQ(m.value(), Tensor::vector({0.5}));
  g.backward(sum(m));
  EXPECT_EQ(g.grad(p), Tensor::matrix(1, 2, {1.0, 0.0}));
}

TEST(MaxOverClasses, MatchesLinearScan) {
  Gen gen(15);
  const Tensor p = gen.matrix(40, 6);
  Graph g;
  const Tensor m = max_over_classes(g.constant(p)).value();
  for (std::size_t r = 0; r < 40; ++r) {
    double best = p(r, 0);
    for (std::size_t c = 1; c < 6; ++c) best = p(r, c) > best ? p(r, c) : best;
    EXPECT_EQ(m.data[r], best);
  }
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.leaf(Tensor::matrix(2, 2, {1, -2, 3, 4}));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(x), Tensor::matrix(2, 2, {1, 1, 1, 1}));
}

TEST(Backward, SquareAtThreeGivesSix) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(3.0));
  g.backward(x * x);
  EXPECT_EQ(g.grad(x).item(), 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, SecondCallWithoutResetIsError) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(2.0));
  Var y = x * x;
  g.backward(y);
  EXPECT_THROW(g.backward(y), ContractError);
  g.zero_grad();
  g.backward(y);
  EXPECT_EQ(g.grad(x).item(), 4.0);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  Gen gen(16);
  const Tensor v = gen.matrix(3, 4);
  // x used three times vs. three independent copies of the same value
  Graph g;
  Var x = g.leaf(v);
  Var s = relu(x);
  g.backward(sum(add(mul(s, x), x)));

  Graph h;
  Var a = h.leaf(v), b = h.leaf(v), c = h.leaf(v);
  h.backward(sum(add(mul(relu(a), b), c)));
  for (std::size_t k = 0; k < v.size(); ++k) {
    EXPECT_DOUBLE_EQ(g.grad(x).data[k], h.grad(a).data[k] + h.grad(b).data[k] + h.grad(c).data[k]);
  }
}

TEST(GradCheck, SumIsExact) {
  Gen gen(17);
  const double err = grad_check([](Graph&, Var x) { return sum(x); }, gen.matrix(3, 3), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, SoftmaxCrossEntropyBelowOneInAMillion) {
  Gen gen(18);
  for (int rep = 0; rep < 10; ++rep) {
    const auto labels = gen.labels(6, 5);
    const double err = grad_check([&](Graph&, Var z) { return cross_entropy(z, labels); }, gen.matrix(6, 5), 1e-5);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(GradCheck, InactiveHingeBelowOneInAMillion) {
  // raw 0.9 vs aug 0.6 with margin 0.1: hinge inactive
  const Tensor conf = Tensor::vector({0.9, 0.6});
  const double err = grad_check(
      [](Graph&, Var c) {
        return mrl(ConfidenceBatch{c, {GroupConfidences{0, {1}, {0.7}}}}, 0.1);
      },
      conf, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, NonFiniteProbeNamesCoordinate) {
  const Tensor x = Tensor::vector({0.5, 1e-5});
  try {
    grad_check(
        [](Graph& g, Var v) {
          return sum(divide(g.constant(Tensor::vector({1.0, 1.0})), add_scalar(v, -2e-5)));
        },
        x, 1e-5);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, RejectsNonPositiveStep) {
  EXPECT_THROW(grad_check([](Graph&, Var x) { return sum(x); }, Tensor::vector({1.0}), 0.0), ContractError);
}

TEST(GradCheck, ComposedOpsAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Gen gen(seed);
    const Tensor w = gen.matrix(4, 3);
    const Tensor b = gen.matrix(1, 3);
    const auto labels = gen.labels(5, 3);
    const double err = grad_check(
        [&](Graph& g, Var x) {
          Var h = add_bias(matmul(relu(x), g.constant(w)), g.constant(Tensor::vector(b.data)));
          Var conf = max_over_classes(softmax(h));
          return add(cross_entropy(h, labels), scale(mean(conf), 0.3));
        },
        gen.matrix(5, 4), 1e-5);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}
