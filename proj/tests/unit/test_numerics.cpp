#include <gtest/gtest.h>

#include <cmath>

#include "muffin/numerics.hpp"
#include "test_support.hpp"

using namespace muffin;
using num::Array;
using num::Shape;
using num::Tape;
using num::Var;
using fixtures::gradient_check;
using fixtures::random_array;

namespace {

constexpr double kGradTol = 1e-6;

}  // namespace

TEST(Array, ConstructionAndAccess) {
  const Array m = Array::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_DOUBLE_EQ(m(1, 2), 6.0);
  EXPECT_EQ(Array::vector({1, 2}).rows(), 1u);
  EXPECT_EQ(Array::scalar(3).item(), 3.0);
  EXPECT_THROW(Array(Shape{2, 2}, std::vector<double>{1, 2, 3}), num::ShapeError);
  EXPECT_THROW(Array::matrix(2, 2, {1, 2, 3}), num::ShapeError);
}

TEST(Primitives, MatmulFixture) {
  Tape t;
  const Var c = matmul(t.constant(Array::matrix(2, 2, {1, 2, 3, 4})), t.constant(Array::matrix(2, 2, {5, 6, 7, 8})));
  EXPECT_EQ(c.value(), Array::matrix(2, 2, {19, 22, 43, 50}));
}

TEST(Primitives, MatmulShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Array(Shape{2, 3})), t.constant(Array(Shape{2, 3}))), num::ShapeError);
}

TEST(Primitives, DepthwiseConvFixture) {
  Tape t;
  const Var y = depthwise_conv1d(t.constant(Array::matrix(3, 1, {1, 2, 3})), t.constant(Array::matrix(3, 1, {1, 1, 1})));
  EXPECT_EQ(y.value(), Array::matrix(3, 1, {3, 6, 5}));
}

TEST(Primitives, DepthwiseConvRejectsEvenKernel) {
  Tape t;
  EXPECT_THROW(depthwise_conv1d(t.constant(Array(Shape{3, 1})), t.constant(Array(Shape{2, 1}))), num::ShapeError);
}

TEST(Primitives, SoftmaxFixture) {
  Tape t;
  const Var s = softmax_rows(t.constant(Array::matrix(1, 2, {std::log(1.0), std::log(3.0)})));
  EXPECT_NEAR(s.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(s.value()[1], 0.75, 1e-15);
}

TEST(Primitives, SoftmaxIsShiftStableForLargeLogits) {
  Tape t;
  const Var s = softmax_rows(t.constant(Array::matrix(1, 3, {1000, 1000, 999})));
  EXPECT_TRUE(s.value().all_finite());
  EXPECT_NEAR(s.value()[0], s.value()[1], 1e-15);
}

TEST(Primitives, SoftmaxMaskedColumnsGetZero) {
  Tape t;
  const num::Mask mask{1, 0, 1};
  const Var s = softmax_rows(t.constant(Array::matrix(1, 3, {0, 5, 0})), mask);
  EXPECT_EQ(s.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  const num::Mask none{0, 0, 0};
  EXPECT_THROW(softmax_rows(t.constant(Array::matrix(1, 3, {0, 0, 0})), none), std::exception);
}

TEST(Primitives, LayerNormFixture) {
  Tape t;
  const Var y = layer_norm_rows(t.constant(Array::matrix(1, 2, {1, 3})), t.constant(Array::vector({1, 1})),
                                t.constant(Array::vector({0, 0})));
  // population variance 1, eps 1e-5
  EXPECT_NEAR(y.value()[0], -1.0, 1e-5);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-5);
  EXPECT_NEAR(y.value()[1], 1.0 / std::sqrt(1.0 + num::kLayerNormEps), 1e-15);
}

TEST(Primitives, AttentionFixture) {
  // With d = 1: scores row 0 = [0, ln 3], row 1 = [0, 0].
  Tape t;
  const Var q = t.constant(Array::matrix(2, 1, {1, 0}));
  const Var k = t.constant(Array::matrix(2, 1, {0, std::log(3.0)}));
  const Var v = t.constant(Array::matrix(2, 2, {1, 10, 3, 20}));
  const Array out = single_head_attention(q, k, v).value();
  EXPECT_NEAR(out(0, 0), 0.25 * 1 + 0.75 * 3, 1e-14);
  EXPECT_NEAR(out(0, 1), 0.25 * 10 + 0.75 * 20, 1e-14);
  EXPECT_NEAR(out(1, 0), 2.0, 1e-14);
}

TEST(Primitives, AttentionKeyMaskExcludesKeys) {
  Tape t;
  const Var q = t.constant(Array::matrix(2, 1, {1, 0}));
  const Var k = t.constant(Array::matrix(2, 1, {0, std::log(3.0)}));
  const Var v = t.constant(Array::matrix(2, 1, {1, 3}));
  const num::Mask mask{1, 0};
  const Array out = single_head_attention(q, k, v, mask).value();
  EXPECT_DOUBLE_EQ(out(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out(1, 0), 1.0);
}

TEST(Primitives, GeluMatchesErfForm) {
  Tape t;
  const Var y = gelu(t.constant(Array::vector({-1.0, 0.0, 2.0})));
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = std::vector<double>{-1.0, 0.0, 2.0}[i];
    EXPECT_NEAR(y.value()[i], 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Primitives, PickGatherMaskConcat) {
  Tape t;
  const Var a = t.constant(Array::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  const std::size_t cols[] = {1, 0, 1};
  EXPECT_EQ(pick(a, cols).value(), Array::vector({2, 3, 6}));
  const std::size_t rows[] = {2, 0};
  EXPECT_EQ(gather_rows(a, rows).value(), Array::matrix(2, 2, {5, 6, 1, 2}));
  const num::Mask keep{1, 0, 1};
  EXPECT_EQ(mask_rows(a, keep).value(), Array::matrix(3, 2, {1, 2, 0, 0, 5, 6}));
  const std::vector<Var> parts{a, a};
  EXPECT_EQ(concat_cols(parts).value().shape(), (Shape{3, 4}));
  EXPECT_EQ(concat_rows(parts).value().shape(), (Shape{6, 2}));
  EXPECT_EQ(slice_rows(a, 1, 2).value(), Array::matrix(1, 2, {3, 4}));
}

TEST(Primitives, RowNormsAndNormalize) {
  Tape t;
  const Var a = t.constant(Array::matrix(2, 2, {3, 4, 0, 2}));
  EXPECT_EQ(row_norms(a).value(), Array::vector({5, 2}));
  const Array n = normalize_rows(a).value();
  EXPECT_NEAR(n(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(n(1, 1), 1.0, 1e-15);
}

TEST(Tape, NonFiniteOutputIsRejected) {
  Tape t;
  EXPECT_THROW(exp(t.constant(Array::scalar(1000.0))), num::NonFiniteError);
  EXPECT_THROW(t.leaf(Array::scalar(std::nan(""))), num::NonFiniteError);
}

TEST(Tape, LogClampedNeverReturnsInfinity) {
  Tape t;
  EXPECT_NEAR(log_clamped(t.constant(Array::scalar(0.0))).value().item(), std::log(1e-12), 1e-12);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape t;
  const Var a = t.leaf(Array::vector({1, 2}));
  EXPECT_THROW(t.backward(a), num::ShapeError);
}

TEST(Tape, ReplayIsDeterministic) {
  Rng rng(3);
  Tape t;
  const Var x = t.leaf(random_array({3, 4}, rng));
  const Var w = t.leaf(random_array({4, 2}, rng));
  const Var loss = sum(square(gelu(matmul(x, w))));
  const auto g1 = t.backward(loss);
  const auto g2 = t.backward(loss);
  EXPECT_EQ(g1.of(x), g2.of(x));
  EXPECT_EQ(g1.of(w), g2.of(w));
}

TEST(Tape, UnreachedNodesHaveZeroGradient) {
  Tape t;
  const Var a = t.leaf(Array::vector({1, 2}));
  const Var b = t.leaf(Array::vector({3, 4}));
  const auto g = t.backward(sum(a));
  EXPECT_FALSE(g.reached(b));
  EXPECT_EQ(g.of(b), Array::vector({0, 0}));
}

// ---- gradients against central differences ------------------------------------

class PrimitiveGradient : public ::testing::Test {
 protected:
  Rng rng{17};
};

TEST_F(PrimitiveGradient, Matmul) {
  const auto f = [](Tape&, const std::vector<Var>& v) { return sum(square(matmul(v[0], v[1]))); };
  EXPECT_LT(gradient_check(f, {random_array({3, 4}, rng), random_array({4, 2}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, ElementwiseOps) {
  const auto f = [](Tape&, const std::vector<Var>& v) {
    const Var a = add(mul(v[0], v[1]), sub(v[0], scale(v[1], 0.5)));
    return sum(mul(sigmoid(a), gelu(affine(a, 0.3, 0.1))));
  };
  EXPECT_LT(gradient_check(f, {random_array({2, 3}, rng), random_array({2, 3}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, ExpAndLog) {
  const auto f = [](Tape&, const std::vector<Var>& v) { return sum(log_clamped(affine(exp(v[0]), 1.0, 0.5))); };
  EXPECT_LT(gradient_check(f, {random_array({2, 3}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, BiasTransposeMean) {
  const auto f = [](Tape&, const std::vector<Var>& v) {
    const Var b = add_bias(v[0], v[1]);
    return add(mean(square(transpose(b))), sum(mean_rows(square(b))));
  };
  EXPECT_LT(gradient_check(f, {random_array({3, 2}, rng), random_array({2}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, ScaleBy) {
  const auto f = [](Tape&, const std::vector<Var>& v) { return sum(square(scale_by(v[0], v[1]))); };
  EXPECT_LT(gradient_check(f, {random_array({2, 2}, rng), random_array({1}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, SoftmaxAndLogSoftmax) {
  const Array w = random_array({3, 4}, rng);
  const auto f = [&w](Tape& t, const std::vector<Var>& v) {
    return add(sum(mul(softmax_rows(v[0]), t.constant(w))), sum(mul(log_softmax_rows(v[0]), t.constant(w))));
  };
  EXPECT_LT(gradient_check(f, {random_array({3, 4}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, MaskedSoftmax) {
  const Array w = random_array({2, 3}, rng);
  const num::Mask mask{1, 0, 1};
  const auto f = [&](Tape& t, const std::vector<Var>& v) { return sum(mul(softmax_rows(v[0], mask), t.constant(w))); };
  EXPECT_LT(gradient_check(f, {random_array({2, 3}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, LayerNorm) {
  const Array w = random_array({3, 4}, rng);
  const auto f = [&w](Tape& t, const std::vector<Var>& v) {
    return sum(mul(layer_norm_rows(v[0], v[1], v[2]), t.constant(w)));
  };
  EXPECT_LT(gradient_check(f, {random_array({3, 4}, rng), random_array({4}, rng), random_array({4}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, DepthwiseConv) {
  const auto f = [](Tape&, const std::vector<Var>& v) { return sum(square(depthwise_conv1d(v[0], v[1]))); };
  EXPECT_LT(gradient_check(f, {random_array({5, 3}, rng), random_array({3, 3}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, StructuralOps) {
  const auto f = [](Tape&, const std::vector<Var>& v) {
    const std::vector<Var> cols{v[0], v[1]};
    const Var c = concat_cols(cols);
    const std::vector<Var> rows{c, slice_rows(c, 1, 3)};
    const Var r = concat_rows(rows);
    const std::size_t idx[] = {0, 4, 2, 2};
    const std::size_t pick_cols[] = {1, 0, 3, 2};
    const num::Mask keep{1, 1, 0, 1};
    return sum(square(pick(mask_rows(gather_rows(r, idx), keep), pick_cols)));
  };
  EXPECT_LT(gradient_check(f, {random_array({3, 2}, rng), random_array({3, 2}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, NormsAndNormalization) {
  const Array w = random_array({3, 4}, rng);
  const auto f = [&w](Tape& t, const std::vector<Var>& v) {
    return add(sum(row_norms(v[0])), sum(mul(normalize_rows(v[0]), t.constant(w))));
  };
  EXPECT_LT(gradient_check(f, {random_array({3, 4}, rng)}), kGradTol);
}

TEST_F(PrimitiveGradient, Attention) {
  const num::Mask mask{1, 1, 0, 1};
  const auto f = [&](Tape&, const std::vector<Var>& v) { return sum(square(single_head_attention(v[0], v[1], v[2], mask))); };
  EXPECT_LT(gradient_check(f, {random_array({4, 3}, rng), random_array({4, 3}, rng), random_array({4, 2}, rng)}), kGradTol);
}
