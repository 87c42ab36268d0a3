#include <gtest/gtest.h>

#include <cmath>

#include "ssdn/grad_check.hpp"
#include "ssdn/ops.hpp"
#include "ssdn/tape.hpp"
#include "test_util.hpp"

using namespace ssdn;
using testutil::naive_conv2d;
using testutil::naive_matmul;
using testutil::random_normal;

TEST(Tensor, ShapeContracts) {
  EXPECT_THROW(Tensor<float>({2, 0}), ContractViolation);
  EXPECT_THROW(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), ContractViolation);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6);
  t(1, 2) = 5.f;
  EXPECT_EQ(t[5], 5.f);
}

TEST(Conv2d, ScalingIdentity) {
  Tape<double> tape;
  Rng rng(1);
  Tensor<double> x = random_normal<double>({1, 1, 3, 3}, rng);
  Var vx = tape.leaf(x, true);
  Var vw = tape.leaf(Tensor<double>::full({1, 1, 1, 1}, 2.0), true);
  const Tensor<double>& y = tape.value(conv2d(tape, vx, vw, 1, 0));
  for (int64_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 2.0 * x[i]);
}

TEST(Conv2d, CenterIdentityKernel) {
  Tape<double> tape;
  Rng rng(2);
  Tensor<double> x = random_normal<double>({1, 1, 3, 3}, rng);
  Tensor<double> w({1, 1, 3, 3});
  w(0, 0, 1, 1) = 1.0;
  const Tensor<double>& y = tape.value(conv2d(tape, tape.leaf(x), tape.leaf(w), 1, 1));
  for (int64_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, DiagonalKernelValue) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 2, 2}, {1, 0, 0, 1});
  const Tensor<double>& y = tape.value(conv2d(tape, tape.leaf(x), tape.leaf(w), 1, 0));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 5.0);
  // the same case through the independent loop oracle
  EXPECT_DOUBLE_EQ(naive_conv2d<double>(x, w, nullptr, 1, 0)[0], 5.0);
}

TEST(Conv2d, MatchesNaiveOracleOnRandomShapes) {
  struct Case {
    Shape x, w;
    int stride, pad;
  };
  const Case cases[] = {
      {{2, 3, 7, 7}, {4, 3, 3, 3}, 1, 1},
      {{1, 2, 8, 6}, {3, 2, 3, 3}, 2, 1},
      {{2, 4, 5, 5}, {2, 4, 1, 1}, 2, 0},
      {{1, 1, 4, 4}, {2, 1, 4, 4}, 1, 0},
  };
  for (uint64_t seed = 0; seed < 4; ++seed) {
    for (const auto& c : cases) {
      Rng rng(100 + seed);
      Tensor<double> x = random_normal<double>(c.x, rng);
      Tensor<double> w = random_normal<double>(c.w, rng);
      Tensor<double> b = random_normal<double>({c.w[0]}, rng);
      Tape<double> tape;
      Var y = conv2d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), c.stride, c.pad);
      Tensor<double> ref = naive_conv2d(x, w, &b, c.stride, c.pad);
      EXPECT_LT(testutil::max_abs_diff(tape.value(y), ref), 1e-12);
    }
  }
}

TEST(Conv2d, ShapeContractErrors) {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({1, 2, 3, 3}));
  Var w_badc = tape.leaf(Tensor<double>({1, 3, 3, 3}));
  EXPECT_THROW(conv2d(tape, x, w_badc, 1, 0), ContractViolation);
  Var w_huge = tape.leaf(Tensor<double>({1, 2, 5, 5}));
  EXPECT_THROW(conv2d(tape, x, w_huge, 1, 0), ContractViolation);
  Var w_ok = tape.leaf(Tensor<double>({4, 2, 3, 3}));
  EXPECT_THROW(conv2d(tape, x, w_ok, 0, 0), ContractViolation);
  Var bad_bias = tape.leaf(Tensor<double>({3}));
  EXPECT_THROW(conv2d(tape, x, w_ok, bad_bias, 1, 1), ContractViolation);
}

TEST(Matmul, IdentityAndAnnihilator) {
  Rng rng(3);
  Tensor<double> a = random_normal<double>({3, 3}, rng);
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  Tape<double> tape;
  const Tensor<double>& ai = tape.value(matmul(tape, tape.leaf(a), tape.leaf(eye)));
  EXPECT_TRUE(bitwise_equal(ai, a));
  const Tensor<double>& az =
      tape.value(matmul(tape, tape.leaf(a), tape.leaf(Tensor<double>({3, 2}))));
  for (int64_t i = 0; i < az.size(); ++i) EXPECT_DOUBLE_EQ(az[i], 0.0);
}

TEST(Matmul, HandValue) {
  Tape<double> tape;
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 1}, {5, 6});
  const Tensor<double>& y = tape.value(matmul(tape, tape.leaf(a), tape.leaf(b)));
  EXPECT_DOUBLE_EQ(y(0, 0), 17.0);
  EXPECT_DOUBLE_EQ(y(1, 0), 39.0);
  EXPECT_TRUE(bitwise_equal(y, naive_matmul(a, b)));
  EXPECT_THROW(matmul(tape, tape.leaf(a), tape.leaf(Tensor<double>({3, 1}))), ContractViolation);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  for (int c : {2, 4, 10}) {
    Tape<double> tape;
    Var z = tape.leaf(Tensor<double>::full({1, c}, 0.7));
    const double loss = tape.value(softmax_cross_entropy(tape, z, {c / 2}))[0];
    EXPECT_NEAR(loss, std::log(c), 1e-12);
  }
}

TEST(SoftmaxCrossEntropy, Saturation) {
  Tape<double> tape;
  Tensor<double> z({1, 4});
  z(0, 2) = 50.0;
  const double loss = tape.value(softmax_cross_entropy(tape, tape.leaf(z), {2}))[0];
  EXPECT_LT(loss, 1e-9);
}

TEST(SoftmaxCrossEntropy, FrozenReferenceValue) {
  // independently evaluated: -log(exp(3)/(exp(1)+exp(2)+exp(3)))
  Tape<double> tape;
  Tensor<double> z({1, 3}, {1, 2, 3});
  const double loss = tape.value(softmax_cross_entropy(tape, tape.leaf(z), {2}))[0];
  EXPECT_NEAR(loss, 0.40760596444438079, 1e-12);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Tape<double> tape;
  Var z = tape.leaf(Tensor<double>({2, 3}));
  EXPECT_THROW(softmax_cross_entropy(tape, z, {0, 3}), ContractViolation);
  EXPECT_THROW(softmax_cross_entropy(tape, z, {0}), ContractViolation);
}

TEST(Elementwise, ReluDefinition) {
  Tape<double> tape;
  Var y = relu(tape, tape.leaf(Tensor<double>({3}, {-1, 0, 2})));
  const Tensor<double>& v = tape.value(y);
  EXPECT_DOUBLE_EQ(v[0], 0.0);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
  EXPECT_DOUBLE_EQ(v[2], 2.0);
}

TEST(Elementwise, MeanOfConstant) {
  Tape<double> tape;
  const double m = tape.value(mean_all(tape, tape.leaf(Tensor<double>::full({4, 5}, 3.25))))[0];
  EXPECT_DOUBLE_EQ(m, 3.25);
}

TEST(Elementwise, SumOfSquaresGradient) {
  Rng rng(4);
  Tensor<double> x = random_normal<double>({5}, rng);
  Tape<double> tape;
  Var vx = tape.leaf(x, true);
  Gradients<double> g = tape.backward(sum_all(tape, mul(tape, vx, vx)));
  const Tensor<double>& gx = g.at(vx);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(gx[i], 2.0 * x[i], 1e-12);
}

TEST(Elementwise, ShapeMismatchErrors) {
  Tape<double> tape;
  Var a = tape.leaf(Tensor<double>({2, 2}));
  Var b = tape.leaf(Tensor<double>({2, 3}));
  EXPECT_THROW(add(tape, a, b), ContractViolation);
  EXPECT_THROW(sub(tape, a, b), ContractViolation);
  EXPECT_THROW(mul(tape, a, b), ContractViolation);
  EXPECT_THROW(reshape(tape, a, {5}), ContractViolation);
  EXPECT_THROW(slice(tape, a, 2, 0, 1), ContractViolation);
  EXPECT_THROW(slice(tape, a, 0, 1, 1), ContractViolation);
}

TEST(Backward, ConstantLeafYieldsEmptyMap) {
  Tape<double> tape;
  Var c = tape.leaf(Tensor<double>::scalar(2.5), false);
  Gradients<double> g = tape.backward(c);
  EXPECT_EQ(g.size(), 0u);
}

TEST(Backward, LinearMapGradient) {
  Rng rng(5);
  Tensor<double> a = random_normal<double>({3, 4}, rng);
  Tensor<double> x = random_normal<double>({4, 1}, rng);
  Tape<double> tape;
  Var va = tape.leaf(a, false);
  Var vx = tape.leaf(x, true);
  Gradients<double> g = tape.backward(sum_all(tape, matmul(tape, va, vx)));
  // grad x = A^T * ones
  for (int j = 0; j < 4; ++j) {
    double expect = 0;
    for (int i = 0; i < 3; ++i) expect += a(i, j);
    EXPECT_NEAR(g.at(vx)(j, 0), expect, 1e-12);
  }
  EXPECT_FALSE(g.contains(va));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>({2, 2}), true);
  EXPECT_THROW(tape.backward(x), ContractViolation);
}

TEST(Backward, TwoLayerCompositionVsFiniteDifferences) {
  Rng rng(6);
  Tensor<double> x = random_normal<double>({1, 2, 4, 4}, rng, 0.7);
  Tensor<double> w1 = random_normal<double>({3, 2, 3, 3}, rng, 0.4);
  Tensor<double> w2 = random_normal<double>({2, 3, 3, 3}, rng, 0.4);
  const double err = grad_check_multi(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var h = relu(t, conv2d(t, v[0], v[1], 1, 1));
        return mean_all(t, conv2d(t, h, v[2], 1, 1));
      },
      {x, w1, w2}, 1e-4);
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, ExactOnAffineMaps) {
  Rng rng(7);
  Tensor<double> x = random_normal<double>({6}, rng);
  const double err = grad_check(
      [](Tape<double>& t, Var v) { return sum_all(t, scale(t, v, 3.0)); }, x, 1e-4);
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, ConvReluMeanStack) {
  Rng rng(8);
  Tensor<double> x = random_normal<double>({1, 1, 4, 4}, rng);
  Tensor<double> w = random_normal<double>({2, 1, 3, 3}, rng, 0.5);
  const double err = grad_check_multi(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return mean_all(t, relu(t, conv2d(t, v[0], v[1], 1, 1)));
      },
      {x, w}, 1e-4);
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
  Rng rng(9);
  Tensor<double> x = random_normal<double>({4}, rng);
  // a custom node whose backward rule drops a factor of 2
  auto broken_square = [](Tape<double>& t, Var a) {
    Tensor<double> out = t.value(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    const int ia = a.id;
    return t.make_node(std::move(out), {ia}, [ia](Tape<double>& tt, const Tensor<double>& g) {
      Tensor<double> ga = g;
      for (int64_t i = 0; i < ga.size(); ++i) ga[i] *= tt.value(Var{ia})[i];  // missing *2
      tt.accumulate(ia, ga);
    });
  };
  const double err = grad_check(
      [&](Tape<double>& t, Var v) { return sum_all(t, broken_square(t, v)); }, x, 1e-4);
  EXPECT_GT(err, 1e-2);
}

TEST(GradCheck, ReportsNonFiniteNode) {
  Tensor<double> x({2}, {1.0, -1.0});
  EXPECT_THROW(grad_check(
                   [](Tape<double>& t, Var v) {
                     Tensor<double> inf = Tensor<double>::full({2}, 1e308);
                     Var big = t.leaf(inf);
                     return sum_all(t, mul(t, mul(t, big, big), v));
                   },
                   x, 1e-4),
               DegenerateInput);
}

// every registered op on randomized small shapes, >= 10 seeds
TEST(GradSuite, AllOpsRandomizedTenSeeds) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(1000 + seed);
    {
      Tensor<double> a = random_normal<double>({3, 4}, rng);
      Tensor<double> b = random_normal<double>({3, 4}, rng);
      const double err = grad_check_multi(
          [](Tape<double>& t, const std::vector<Var>& v) {
            Var s = add(t, mul(t, v[0], v[1]), sub(t, v[0], scale(t, v[1], 0.3)));
            return mean_all(t, mul(t, s, s));
          },
          {a, b});
      EXPECT_LT(err, 1e-4) << "elementwise seed " << seed;
    }
    {
      Tensor<double> a = random_normal<double>({3, 5}, rng);
      Tensor<double> b = random_normal<double>({5, 2}, rng);
      const double err = grad_check_multi(
          [](Tape<double>& t, const std::vector<Var>& v) {
            return sum_all(t, relu(t, matmul(t, v[0], v[1])));
          },
          {a, b});
      EXPECT_LT(err, 1e-4) << "matmul seed " << seed;
    }
    {
      Tensor<double> x = random_normal<double>({2, 2, 5, 5}, rng);
      Tensor<double> w = random_normal<double>({3, 2, 3, 3}, rng, 0.5);
      Tensor<double> b = random_normal<double>({3}, rng);
      const double err = grad_check_multi(
          [](Tape<double>& t, const std::vector<Var>& v) {
            return mean_all(t, conv2d(t, v[0], v[1], v[2], 2, 1));
          },
          {x, w, b});
      EXPECT_LT(err, 1e-4) << "conv seed " << seed;
    }
    {
      Tensor<double> z = random_normal<double>({3, 4}, rng);
      const double err = grad_check(
          [](Tape<double>& t, Var v) { return softmax_cross_entropy(t, v, {1, 0, 3}); }, z);
      EXPECT_LT(err, 1e-4) << "xent seed " << seed;
    }
    {
      Tensor<double> x = random_normal<double>({2, 3, 2, 2}, rng);
      const double err = grad_check(
          [](Tape<double>& t, Var v) {
            Var p = global_avg_pool(t, v);
            Var s = slice(t, p, 1, 1, 3);
            Var r = reshape(t, s, {4});
            return sum_all(t, mul(t, r, r));
          },
          x);
      EXPECT_LT(err, 1e-4) << "pool/slice/reshape seed " << seed;
    }
    {
      Tensor<double> a = random_normal<double>({2, 3}, rng);
      Tensor<double> b = random_normal<double>({1, 3}, rng);
      const double err = grad_check_multi(
          [](Tape<double>& t, const std::vector<Var>& v) {
            Var c = concat0(t, {v[0], v[1]});
            return mean_all(t, mul(t, c, c));
          },
          {a, b});
      EXPECT_LT(err, 1e-4) << "concat seed " << seed;
    }
    {
      Tensor<double> x = random_normal<double>({2, 6}, rng);
      Tensor<double> w = random_normal<double>({3, 6}, rng, 0.5);
      Tensor<double> b = random_normal<double>({3}, rng);
      const double err = grad_check_multi(
          [](Tape<double>& t, const std::vector<Var>& v) {
            return mean_all(t, relu(t, affine(t, v[0], v[1], v[2])));
          },
          {x, w, b});
      EXPECT_LT(err, 1e-4) << "affine seed " << seed;
    }
  }
}

TEST(Tape, ReplayDeterminism) {
  auto run = [] {
    Rng rng(77);
    Tape<float> tape;
    Var x = tape.leaf(random_normal<float>({2, 3, 6, 6}, rng), true);
    Var w = tape.leaf(random_normal<float>({4, 3, 3, 3}, rng, 0.5f), true);
    Var y = relu(tape, conv2d(tape, x, w, 2, 1));
    Var loss = mean_all(tape, mul(tape, y, y));
    Tensor<float> value = tape.value(loss);
    Gradients<float> g = tape.backward(loss);
    return std::make_pair(value, std::make_pair(g.at(x), g.at(w)));
  };
  auto a = run();
  auto b = run();
  EXPECT_TRUE(bitwise_equal(a.first, b.first));
  EXPECT_TRUE(bitwise_equal(a.second.first, b.second.first));
  EXPECT_TRUE(bitwise_equal(a.second.second, b.second.second));
}

TEST(Tape, BackwardLinearity) {
  Rng rng(78);
  Tensor<double> x = random_normal<double>({6}, rng);
  const double ca = 1.7, cb = -0.6;

  auto grad_of = [&](double wa, double wb) {
    Tape<double> tape;
    Var vx = tape.leaf(x, true);
    Var f = sum_all(tape, mul(tape, vx, vx));
    Var g = mean_all(tape, relu(tape, vx));
    Var loss = add(tape, scale(tape, f, wa), scale(tape, g, wb));
    return tape.backward(loss).at(vx);
  };
  Tensor<double> combined = grad_of(ca, cb);
  Tensor<double> gf = grad_of(1.0, 0.0);
  Tensor<double> gg = grad_of(0.0, 1.0);
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(combined[i], ca * gf[i] + cb * gg[i], 1e-12);
  }
}

// weight produced by an upstream computation must receive gradient
TEST(Tape, ConvWeightFromUpstreamNodeGetsGradient) {
  Rng rng(79);
  Tensor<double> x = random_normal<double>({1, 2, 4, 4}, rng);
  Tensor<double> gen = random_normal<double>({3, 2 * 3 * 3}, rng, 0.4);
  Tape<double> tape;
  Var vx = tape.leaf(x, false);
  Var vgen = tape.leaf(gen, true);
  Var w = reshape(tape, vgen, {3, 2, 3, 3});
  Var loss = mean_all(tape, conv2d(tape, vx, w, 1, 1));
  Gradients<double> g = tape.backward(loss);
  ASSERT_TRUE(g.contains(vgen));
  double norm = 0;
  for (int64_t i = 0; i < g.at(vgen).size(); ++i) norm += std::abs(g.at(vgen)[i]);
  EXPECT_GT(norm, 1e-8);
}
