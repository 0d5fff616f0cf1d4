#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "starformer/errors.hpp"
#include "starformer/numkernel.hpp"
#include "test_support.hpp"

using namespace starformer;
using starformer::testing::central_differences;
using starformer::testing::max_relative_error;
using starformer::testing::random_tensor;

TEST(ApplyLinear, IdentityWeightsPassInputThrough) {
  Tape tape;
  auto x = tape.constant(Tensor::from_rows({{1, 2}}));
  auto w = tape.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
  auto b = tape.constant(Tensor::vector({0, 0}));
  EXPECT_EQ(apply_linear(x, w, b).value(), Tensor::from_rows({{1, 2}}));
}

TEST(ApplyLinear, UnitRowSelectsFirstWeightRowPlusBias) {
  Tape tape;
  auto x = tape.constant(Tensor::from_rows({{1, 0}}));
  auto w = tape.constant(Tensor::from_rows({{2, 3}, {5, 7}}));
  auto b = tape.constant(Tensor::vector({1, 1}));
  EXPECT_EQ(apply_linear(x, w, b).value(), Tensor::from_rows({{3, 4}}));
}

TEST(ApplyLinear, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  Tensor xs = random_tensor({3, 4}, rng), ws = random_tensor({4, 2}, rng), bs = random_tensor({2}, rng);
  Tape tape;
  auto y = apply_linear(tape.constant(xs), tape.constant(ws), tape.constant(bs)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = bs[j];
      for (std::size_t k = 0; k < 4; ++k) s += xs.at(i, k) * ws.at(k, j);
      EXPECT_NEAR(y.at(i, j), s, 1e-12);
    }
}

TEST(ApplyLinear, RejectsInnerDimensionMismatch) {
  Tape tape;
  auto x = tape.constant(Tensor::zeros(2, 3));
  auto w = tape.constant(Tensor::zeros(4, 2));
  auto b = tape.constant(Tensor::vector({0, 0}));
  EXPECT_THROW(apply_linear(x, w, b), DimensionError);
}

TEST(SoftmaxRows, UniformInput) {
  Tensor p = softmax_rows(Tensor::from_rows({{0, 0, 0}}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, LargeMagnitudeDoesNotOverflow) {
  Tensor p = softmax_rows(Tensor::from_rows({{1000, 0}}));
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
}

TEST(SoftmaxRows, AnalyticTwoThirds) {
  Tensor p = softmax_rows(Tensor::from_rows({{std::log(2.0), std::log(1.0)}}));
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, RowsSumToOneForLargeRandomInputs) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({7, 13}, rng, 1e3);
    Tensor p = softmax_rows(x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantVectorNormalizesToZero) {
  Tape tape;
  auto y = layer_norm(tape.constant(Tensor::from_rows({{3, 3, 3}})), tape.constant(Tensor::vector({1, 1, 1})),
                      tape.constant(Tensor::vector({0, 0, 0})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, SymmetricPair) {
  Tape tape;
  auto y = layer_norm(tape.constant(Tensor::from_rows({{1, -1}})), tape.constant(Tensor::vector({1, 1})),
                      tape.constant(Tensor::vector({0, 0})));
  const double a = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(y.value()[0], a, 1e-15);
  EXPECT_NEAR(y.value()[1], -a, 1e-15);
}

TEST(LayerNorm, RandomVectorHasZeroMeanUnitVariance) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 64}, rng, 2.5);
  double mean = 0, var = 0;
  for (double v : x.data()) mean += v;
  mean /= 64;
  for (double v : x.data()) var += (v - mean) * (v - mean);
  var /= 64;
  Tape tape;
  auto y = layer_norm(tape.constant(x), tape.constant(Tensor({64}, 1.0)), tape.constant(Tensor({64}, 0.0)));
  double ym = 0, yv = 0;
  for (double v : y.value().data()) ym += v;
  ym /= 64;
  for (double v : y.value().data()) yv += (v - ym) * (v - ym);
  yv /= 64;
  EXPECT_LE(std::abs(ym), 1e-12);
  EXPECT_NEAR(yv, var / (var + kLayerNormEps), 1e-12);
}

TEST(Activation, ZeroPointsAndRelu) {
  Tape tape;
  auto x = tape.constant(Tensor::vector({0.0, -5.0, 5.0}));
  auto g = activation(x, Activation::gelu).value();
  auto r = activation(x, Activation::relu).value();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 5.0);
}

TEST(Activation, GeluMatchesQuadratureCdf) {
  EXPECT_NEAR(gelu(1.0), 1.0 * starformer::testing::normal_cdf_by_quadrature(1.0), 1e-6);
  EXPECT_NEAR(gelu(-0.7), -0.7 * starformer::testing::normal_cdf_by_quadrature(-0.7), 1e-6);
}

TEST(Activation, UnknownKindIsConfigError) { EXPECT_THROW(parse_activation("swish"), ConfigError); }

TEST(Backward, SumGivesOnes) {
  Tape tape;
  std::mt19937_64 rng(1);
  auto x = tape.leaf(random_tensor({3, 5}, rng), true);
  tape.backward(sum(x));
  ASSERT_NE(tape.grad(x), nullptr);
  for (double v : tape.grad(x)->data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareOfScalar) {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(3.0), true);
  tape.backward(mul(x, x));
  EXPECT_EQ((*tape.grad(x))[0], 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape tape;
  auto x = tape.leaf(Tensor::zeros(2, 2), true);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, ConstantsHaveNoGradient) {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(2.0), true);
  auto c = tape.constant(Tensor::scalar(4.0));
  tape.backward(mul(x, c));
  EXPECT_EQ(tape.grad(c), nullptr);
  EXPECT_EQ((*tape.grad(x))[0], 4.0);
}

TEST(Backward, VisitsEachContributingNodeOnce) {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(2.0), true);
  auto y = mul(x, x);       // 1
  auto z = add(y, x);       // 2
  auto loss = scale(z, 3);  // 3
  tape.backward(loss);
  EXPECT_EQ(tape.backward_visits(), 4u);
  EXPECT_EQ((*tape.grad(x))[0], 3.0 * (2 * 2.0 + 1));
}

TEST(Backward, NonFiniteOutputIsNumericError) {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(1e308), true);
  EXPECT_THROW(scale(x, 10.0), NumericError);
}

// Every primitive's adjoint against central differences.
TEST(Backward, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(42);
  Tensor xs = random_tensor({5, 6}, rng);
  Tensor ws = random_tensor({6, 4}, rng);
  Tensor bs = random_tensor({4}, rng);
  Tensor gs = random_tensor({4}, rng);
  Tensor betas = random_tensor({4}, rng);
  Tensor probe = random_tensor({1, 8}, rng);

  auto forward = [&](Tape& tape, Var x, Var w, Var b, Var gamma, Var beta) {
    auto h = apply_linear(x, w, b);
    h = layer_norm(h, gamma, beta);
    h = activation(h, Activation::gelu);
    auto s = softmax_rows(h);
    auto t = transpose(s);
    auto tt = matmul(t, s);  // [4, 4]
    auto pooled = mean_rows(add(h, activation(h, Activation::relu)));
    auto cat = concat_cols(pooled, mean_rows(tt));
    auto sl = slice_rows(h, 1, 3);
    std::vector<std::ptrdiff_t> idx{2, -1, 0, 2};
    auto gathered = gather_rows(sl, idx);
    auto p = tape.constant(probe);
    return add(add(sum(mul(cat, p)), scale(sum(mul(gathered, gathered)), 0.1)), cross_entropy(slice_rows(h, 0, 1), 2));
  };
  auto loss_value = [&]() {
    Tape tape;
    tape.set_grad_enabled(false);
    return forward(tape, tape.constant(xs), tape.constant(ws), tape.constant(bs), tape.constant(gs),
                   tape.constant(betas))
        .value()
        .item();
  };
  Tape tape;
  auto x = tape.watch(xs), w = tape.watch(ws), b = tape.watch(bs), gm = tape.watch(gs), bt = tape.watch(betas);
  tape.backward(forward(tape, x, w, b, gm, bt));
  for (auto [var, tensor] : {std::pair{x, &xs}, {w, &ws}, {b, &bs}, {gm, &gs}, {bt, &betas}}) {
    Tensor fd = central_differences(*tensor, loss_value);
    EXPECT_LE(max_relative_error(*tape.grad(var), fd), 1e-6);
  }
}

TEST(Dropout, InvertedMaskIsSeededAndDisabledWithoutRng) {
  std::mt19937_64 a(9), b(9);
  Tape tape;
  auto x = tape.constant(Tensor({1, 1000}, 1.0));
  auto y1 = dropout(x, 0.5, &a).value();
  auto y2 = dropout(x, 0.5, &b).value();
  EXPECT_EQ(y1, y2);
  std::size_t kept = 0;
  for (double v : y1.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v > 0;
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
  EXPECT_EQ(dropout(x, 0.5, nullptr).id(), x.id());
}

TEST(Attention, MaskedKeyEqualsDeletedColumn) {
  std::mt19937_64 rng(8);
  Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
  AttentionLayout masked{2, {{0, 3, 0, 5}}, {false, true, false, false, false}};
  Tape tape;
  auto out = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), masked).value();
  std::vector<std::ptrdiff_t> keep{0, 2, 3, 4};
  Tape t2;
  auto k2 = gather_rows(t2.constant(k), keep), v2 = gather_rows(t2.constant(v), keep);
  AttentionLayout plain{2, {{0, 3, 0, 4}}, {}};
  auto ref = multi_head_attention(t2.constant(q), k2, v2, plain).value();
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  Tensor q = random_tensor({4, 6}, rng), k = random_tensor({8, 6}, rng), v = random_tensor({8, 6}, rng);
  Tensor bias = random_tensor({2, 2, 4}, rng);
  Tensor probe = random_tensor({4, 6}, rng);
  AttentionLayout layout{2, {{0, 2, 0, 4}, {2, 2, 4, 4}}, {true, false, false, false, false, false, false, true}};
  auto run = [&](Tape& tape, Var qv, Var kv, Var vv, Var bv) {
    return sum(mul(multi_head_attention(qv, kv, vv, layout, bv), tape.constant(probe)));
  };
  auto loss_value = [&]() {
    Tape tape;
    return run(tape, tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(bias)).value().item();
  };
  Tape tape;
  auto qv = tape.watch(q), kv = tape.watch(k), vv = tape.watch(v), bv = tape.watch(bias);
  tape.backward(run(tape, qv, kv, vv, bv));
  EXPECT_LE(max_relative_error(*tape.grad(qv), central_differences(q, loss_value)), 1e-6);
  EXPECT_LE(max_relative_error(*tape.grad(kv), central_differences(k, loss_value)), 1e-6);
  EXPECT_LE(max_relative_error(*tape.grad(vv), central_differences(v, loss_value)), 1e-6);
  EXPECT_LE(max_relative_error(*tape.grad(bv), central_differences(bias, loss_value)), 1e-6);
  // Masked rows never receive gradient.
  for (std::size_t u = 0; u < 6; ++u) {
    EXPECT_EQ(tape.grad(kv)->at(0, u), 0.0);
    EXPECT_EQ(tape.grad(vv)->at(7, u), 0.0);
  }
}

TEST(Kernels, RepeatedCallsAreBitIdentical) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({6, 8}, rng), w = random_tensor({8, 8}, rng);
  auto once = [&] {
    Tape tape;
    auto h = matmul(tape.constant(x), tape.constant(w));
    return softmax_rows(layer_norm(h, tape.constant(Tensor({8}, 1.0)), tape.constant(Tensor({8}, 0.0)))).value();
  };
  EXPECT_EQ(once(), once());
}
