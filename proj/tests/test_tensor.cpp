// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "oracles/oracles.hpp"
#include "tavat/ops.hpp"
#include "tavat/tensor.hpp"

namespace tavat {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  t.set_requires_grad(grad);
  return t;
}

// Checks autodiff against central differences for every coordinate of
// every input. `f` builds a scalar from the inputs.
void expect_gradients_match(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                            double tol = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  backward(f(inputs));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    std::vector<double> engine(inputs[k].size(), 0.0);
    if (inputs[k].has_grad()) engine.assign(inputs[k].grad().begin(), inputs[k].grad().end());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double fd = oracle::finite_difference_in_place([&] { return f(inputs).item(); }, inputs[k][i], 1e-5);
      EXPECT_LE(oracle::relative_error(engine[i], fd), tol) << "input " << k << " coord " << i << ": " << engine[i]
                                                             << " vs " << fd;
    }
  }
}

TEST(Tensor, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Ops, MatmulIdentityCase) {
  Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye(Shape{3, 2}, {1, 0, 0, 1, 0, 0});
  Tensor c = matmul(a, eye);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 2, 4, 5}));
}

TEST(Ops, MatmulShapeErrorNamesOpAndDims) {
  Tensor a(Shape{2, 3}), b(Shape{4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find('3'), std::string::npos) << msg;
    EXPECT_NE(msg.find('4'), std::string::npos) << msg;
  }
}

TEST(Ops, AddRejectsNonTrailingBroadcast) {
  EXPECT_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{2})), ShapeError);
  EXPECT_NO_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{3})));
}

TEST(Ops, Relu) {
  Tensor r = relu(Tensor(Shape{3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, LayerNormOfConstantRowIsZero) {
  Tensor x(Shape{1, 3}, {5, 5, 5});
  x.set_requires_grad();
  Tensor out = layer_norm(x, Tensor(Shape{3}, 1.0), Tensor(Shape{3}, 0.0));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  backward(sum(out));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Ops, CrossEntropySaturatedAndUniform) {
  std::vector<int> label0{0};
  EXPECT_LT(cross_entropy(Tensor(Shape{1, 2}, {10, -10}), label0).item(), 1e-4);
  EXPECT_NEAR(cross_entropy(Tensor(Shape{1, 2}, {0, 0}), label0).item(), std::log(2.0), 1e-15);
}

TEST(Ops, CrossEntropyMatchesLogSumExp) {
  Rng rng(5);
  Tensor logits = random_tensor({3, 4}, rng, false);
  for (auto& v : logits.data()) v *= 3.0;
  std::vector<int> labels{2, 0, 3};
  double expected = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < 4; ++c) m = std::max(m, logits[r * 4 + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += std::exp(logits[r * 4 + c] - m);
    expected += (m + std::log(s)) - logits[r * 4 + static_cast<std::size_t>(labels[r])];
  }
  expected /= 3.0;
  EXPECT_NEAR(cross_entropy(logits, labels).item(), expected, 1e-10);
}

TEST(Ops, CrossEntropyRejectsBadLabels) {
  std::vector<int> bad{2};
  EXPECT_THROW(cross_entropy(Tensor(Shape{1, 2}), bad), std::out_of_range);
  std::vector<int> ignored{kIgnoreLabel, 1};
  EXPECT_NEAR(cross_entropy(Tensor(Shape{2, 2}), ignored).item(), std::log(2.0), 1e-15);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 4}, rng);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  Rng rng(2);
  Tensor x = random_tensor({5, 3}, rng);
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, AccumulatesAcrossCalls) {
  Rng rng(3);
  Tensor x = random_tensor({4}, rng);
  Tensor w = random_tensor({4}, rng);
  backward(sum(mul(gelu(x), w)));
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  backward(sum(mul(gelu(x), w)));
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
}

TEST(Backward, ReturnsLeafGradients) {
  Rng rng(4);
  Tensor x = random_tensor({3}, rng);
  Tensor y = random_tensor({3}, rng, false);
  auto grads = backward(sum(mul(x, y)));
  EXPECT_TRUE(grads.contains(x));
  EXPECT_FALSE(grads.contains(y));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(grads.at(x)[i], y[i]);
}

TEST(Backward, Errors) {
  Tensor x(Shape{3}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(backward(scale(x, 2.0)), GraphError);  // not a scalar
  EXPECT_THROW(backward(sum(Tensor(Shape{3}, 1.0))), GraphError);  // nothing to differentiate
}

TEST(Backward, NonFiniteOutputsThrow) {
  Tensor x(Shape{1}, 1e300);
  EXPECT_THROW(mul(x, x), NonFiniteError);
}

TEST(Backward, DeterministicBitwise) {
  auto run = [] {
    Rng rng(9);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor out = sum(softmax(matmul(a, b)));
    backward(scale(sum(gelu(matmul(a, b))), 1.3));
    std::vector<double> r{out.item()};
    r.insert(r.end(), a.grad().begin(), a.grad().end());
    return r;
  };
  EXPECT_EQ(run(), run());
}

// --- finite differences per op ------------------------------------------------

TEST(OpGradients, Matmul2d) {
  Rng rng(10);
  Tensor w = random_tensor({2, 3}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(matmul(in[0], in[1]), w)); },
                         {random_tensor({2, 4}, rng), random_tensor({4, 3}, rng)});
}

TEST(OpGradients, MatmulBatchedAndTransposed) {
  Rng rng(11);
  Tensor w = random_tensor({2, 3, 3}, rng, false);
  expect_gradients_match(
      [&](const auto& in) { return sum(mul(matmul_transposed(in[0], in[1]), w)); },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)});
  Tensor w2 = random_tensor({2, 3, 5}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(matmul(in[0], in[1]), w2)); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  Tensor w3 = random_tensor({2, 3, 5}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(matmul(in[0], in[1]), w3)); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
}

TEST(OpGradients, AddMulScale) {
  Rng rng(12);
  expect_gradients_match([](const auto& in) { return sum(mul(add(in[0], in[1]), scale(in[0], -0.7))); },
                         {random_tensor({2, 3}, rng), random_tensor({3}, rng)});
}

TEST(OpGradients, ReluAwayFromKink) {
  Rng rng(13);
  Tensor x = random_tensor({10}, rng);
  for (auto& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
  Tensor w = random_tensor({10}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(relu(in[0]), w)); }, {x});
}

TEST(OpGradients, Gelu) {
  Rng rng(14);
  Tensor w = random_tensor({10}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(gelu(in[0]), w)); }, {random_tensor({10}, rng)});
}

TEST(OpGradients, LayerNorm) {
  Rng rng(15);
  Tensor w = random_tensor({3, 5}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(layer_norm(in[0], in[1], in[2]), w)); },
                         {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)});
}

TEST(OpGradients, Softmax) {
  Rng rng(16);
  Tensor w = random_tensor({2, 4}, rng, false);
  expect_gradients_match([&](const auto& in) { return sum(mul(softmax(in[0]), w)); }, {random_tensor({2, 4}, rng)});
}

TEST(OpGradients, EmbeddingLookupCountsOccurrences) {
  Tensor table(Shape{5, 2}, 0.5);
  table.set_requires_grad();
  std::vector<std::int32_t> ids{1, 3, 1, 0};
  Tensor out = embedding_lookup(table, ids, Shape{2, 2});
  EXPECT_EQ(out.shape(), (Shape{2, 2, 2}));
  backward(sum(out));
  const std::vector<double> expected{1, 1, 2, 2, 0, 0, 1, 1, 0, 0};
  EXPECT_EQ(std::vector<double>(table.grad().begin(), table.grad().end()), expected);
  std::vector<std::int32_t> bad{7};
  EXPECT_THROW(embedding_lookup(table, bad, Shape{1, 1}), std::out_of_range);
}

TEST(OpGradients, MaskFillAndPool) {
  Rng rng(17);
  Mask mask{1, 1, 0, 1, 0, 0};
  Tensor w = random_tensor({2, 4}, rng, false);
  expect_gradients_match(
      [&](const auto& in) {
        // [B*heads=4, 3, 3] scores with 2 heads over 2 sequences of length 3.
        Tensor probs = softmax(mask_fill(in[0], mask, 2));
        Tensor v = matmul(probs, in[1]);
        Tensor merged = merge_heads(v, 2);
        return sum(mul(masked_mean_pool(merged, mask), w));
      },
      {random_tensor({4, 3, 3}, rng), random_tensor({4, 3, 2}, rng)});
}

TEST(OpGradients, SplitHeadsRoundTrip) {
  Rng rng(18);
  Tensor x = random_tensor({2, 3, 4}, rng, false);
  Tensor back = merge_heads(split_heads(x, 2), 2);
  EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(OpGradients, CrossEntropy) {
  Rng rng(19);
  std::vector<int> labels{1, kIgnoreLabel, 0};
  expect_gradients_match([&](const auto& in) { return cross_entropy(in[0], labels); }, {random_tensor({3, 3}, rng)});
}

TEST(OpGradients, TwoLayerNetwork) {
  Rng rng(20);
  std::vector<int> labels{0, 2, 1, 1};
  expect_gradients_match(
      [&](const auto& in) {
        Tensor h = gelu(add(matmul(in[0], in[1]), in[2]));
        return cross_entropy(add(matmul(h, in[3]), in[4]), labels);
      },
      {random_tensor({4, 5}, rng), random_tensor({5, 6}, rng), random_tensor({6}, rng), random_tensor({6, 3}, rng),
       random_tensor({3}, rng)});
}

TEST(Ops, MaskedMeanPoolIgnoresPadding) {
  Tensor x(Shape{1, 3, 2}, {1, 2, 3, 4, 100, -100});
  Mask mask{1, 1, 0};
  Tensor p = masked_mean_pool(x, mask);
  EXPECT_DOUBLE_EQ(p[0], 2.0);
  EXPECT_DOUBLE_EQ(p[1], 3.0);
}

TEST(Ops, DropoutIsIdentityAtZero) {
  Rng rng(1);
  Tensor x(Shape{4}, 2.0);
  Tensor y = dropout(x, 0.0, rng);
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

}  // namespace
}  // namespace tavat
