// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "oracles/oracles.hpp"
#include "tavat/model.hpp"
#include "tavat/optim.hpp"
#include "test_util.hpp"

namespace tavat {
namespace {

using testing::random_batch;
using testing::tiny_config;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Model, PaddingRowStartsAtZero) {
  Model m(tiny_config(), 1);
  for (std::size_t j = 0; j < m.config().dim; ++j) EXPECT_EQ(m.embedding()[j], 0.0);
}

TEST(Model, EmbedCopiesRows) {
  Model m(tiny_config(), 1);
  Batch b;
  b.size = 1;
  b.length = 1;
  b.token_ids = {7};
  b.mask = {1};
  b.labels = {0};
  Tensor e = m.embed(b);
  const std::size_t d = m.config().dim;
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(e[j], m.embedding()[7 * d + j]);
}

TEST(Model, EmbedOfPaddingIsRowZero) {
  Model m(tiny_config(), 1);
  Batch b;
  b.size = 1;
  b.length = 3;
  b.token_ids = {0, 0, 0};
  b.mask = {0, 0, 0};
  Tensor e = m.embed(b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < m.config().dim; ++j) EXPECT_EQ(e[i * m.config().dim + j], m.embedding()[j]);
}

TEST(Model, EmbedRejectsOutOfRangeIds) {
  Model m(tiny_config(), 1);
  Batch b = random_batch(1, 3, 3, 20, 3, 1);
  b.token_ids[1] = 20;
  EXPECT_THROW(m.embed(b), std::out_of_range);
}

TEST(Model, EmbeddingGradientCountsTokens) {
  Model m(tiny_config(), 2);
  Batch b = random_batch(3, 3, 6, 20, 3, 7);
  backward(sum(m.embed(b)));
  std::vector<double> counts(m.config().vocab_size, 0.0);
  for (auto id : b.token_ids) counts[static_cast<std::size_t>(id)] += 1.0;
  const auto g = m.embedding().grad();
  for (std::size_t r = 0; r < counts.size(); ++r)
    for (std::size_t j = 0; j < m.config().dim; ++j) EXPECT_EQ(g[r * m.config().dim + j], counts[r]);
}

TEST(Model, ZeroPerturbationIsBitwiseIdentity) {
  Model m(tiny_config(), 3);
  Batch b = random_batch(4, 3, 7, 20, 3, 8);
  Tensor plain = m.forward(b);
  Tensor zero(Shape{b.size, b.length, m.config().dim}, 0.0);
  Tensor perturbed = m.forward_from_embeddings(add(m.embed(b), zero), b.mask);
  EXPECT_EQ(values(plain), values(perturbed));
}

TEST(Model, LogitsIgnorePaddedPositions) {
  for (auto encoder : {EncoderKind::transformer, EncoderKind::mean_pool_mlp}) {
    auto cfg = tiny_config();
    cfg.encoder = encoder;
    Model m(cfg, 4);
    Batch b = random_batch(4, 2, 7, 20, 3, 9);
    Tensor x = m.embed(b);
    Tensor noisy = x.clone();
    Rng rng(1);
    for (std::size_t i = 0; i < b.mask.size(); ++i) {
      if (b.mask[i]) continue;
      for (std::size_t j = 0; j < cfg.dim; ++j) noisy[i * cfg.dim + j] = rng.uniform(-50.0, 50.0);
    }
    EXPECT_EQ(values(m.forward_from_embeddings(x, b.mask)), values(m.forward_from_embeddings(noisy, b.mask)));
  }
}

TEST(Model, ShapeMismatchThrows) {
  Model m(tiny_config(), 5);
  Batch b = random_batch(2, 3, 5, 20, 3, 1);
  Tensor wrong(Shape{2, 5, 4});
  EXPECT_THROW(m.forward_from_embeddings(wrong, b.mask), ShapeError);
  auto long_cfg = tiny_config();
  long_cfg.max_len = 4;
  Model short_model(long_cfg, 5);
  EXPECT_THROW(short_model.forward(b), ShapeError);
}

TEST(Model, InputGradientMatchesFiniteDifferences) {
  Model m(tiny_config(), 6);
  Batch b = random_batch(3, 3, 6, 20, 3, 10);
  Tensor x = m.embed(b).clone();
  x.set_requires_grad();
  backward(m.loss(m.forward_from_embeddings(x, b.mask), b));
  const std::vector<double> engine(x.grad().begin(), x.grad().end());
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const std::size_t c = rng.below(x.size());
    const double fd = oracle::finite_difference_in_place(
        [&] { return m.loss(m.forward_from_embeddings(x, b.mask), b).item(); }, x[c], 1e-5);
    EXPECT_LE(oracle::relative_error(engine[c], fd), 1e-4) << "coord " << c;
  }
}

TEST(Model, ParameterGradientsAreClosed) {
  Model m(tiny_config(), 7);
  Batch b = random_batch(3, 3, 6, 20, 3, 11);
  Tensor delta(Shape{b.size, b.length, m.config().dim}, 0.01);
  Tensor eta(Shape{b.size, b.length, m.config().dim}, -0.01);
  delta.set_requires_grad();
  eta.set_requires_grad();
  auto grads = backward(m.loss(m.forward_from_embeddings(add(add(m.embed(b), delta), eta), b.mask), b));
  EXPECT_EQ(grads.size(), m.params().size() + 2);
  for (const auto& p : m.params()) EXPECT_TRUE(grads.contains(p.value)) << p.name;
  EXPECT_TRUE(grads.contains(delta));
  EXPECT_TRUE(grads.contains(eta));
}

TEST(Model, TokenHeadLogitsPerPosition) {
  auto cfg = tiny_config(20, 5);
  cfg.head = HeadKind::token;
  Model m(cfg, 8);
  Batch b = random_batch(2, 3, 6, 20, 5, 12, /*tagging=*/true);
  Tensor logits = m.forward(b);
  EXPECT_EQ(logits.shape(), (Shape{b.size * b.length, 5}));
  EXPECT_TRUE(std::isfinite(m.loss(logits, b).item()));
}

TEST(Model, ForwardIsDeterministic) {
  Batch b = random_batch(3, 3, 6, 20, 3, 13);
  auto cfg = tiny_config();
  cfg.dropout = 0.2;
  Model a(cfg, 9), c(cfg, 9);
  Rng r1(4), r2(4);
  EXPECT_EQ(values(a.forward(b, &r1)), values(c.forward(b, &r2)));
  EXPECT_EQ(values(a.forward(b)), values(c.forward(b)));
}

TEST(Model, CloneIsDeep) {
  Model m(tiny_config(), 10);
  Model c = m.clone();
  c.param("head.bias")[0] += 1.0;
  EXPECT_NE(c.param("head.bias")[0], m.param("head.bias")[0]);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Model m(tiny_config(), 11);
  SeedSet seeds{5, 6, 7};
  std::stringstream a;
  save_checkpoint(m, seeds, a);
  const std::string bytes = a.str();
  std::stringstream in(bytes);
  auto loaded = load_checkpoint(in);
  EXPECT_EQ(loaded.seeds, seeds);
  std::stringstream b;
  save_checkpoint(loaded.model, loaded.seeds, b);
  EXPECT_EQ(bytes, b.str());
  EXPECT_EQ(bytes.substr(0, 4), "TAVM");
}

TEST(Checkpoint, RejectsCorruption) {
  Model m(tiny_config(), 12);
  std::stringstream s;
  save_checkpoint(m, {}, s);
  std::string bytes = s.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(truncated), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream bm(bad_magic);
  EXPECT_THROW(load_checkpoint(bm), FormatError);
}

TEST(Optimizer, SgdAndAdamStep) {
  Model m(tiny_config(), 13);
  Batch b = random_batch(4, 3, 6, 20, 3, 14);
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    Model local = m.clone();
    OptimizerConfig oc;
    oc.kind = kind;
    oc.learning_rate = kind == OptimizerKind::sgd ? 0.1 : 0.01;
    auto opt = make_optimizer(oc);
    const double before = local.loss(local.forward(b), b).item();
    for (int i = 0; i < 10; ++i) {
      local.zero_grad();
      backward(local.loss(local.forward(b), b));
      opt->step(local.params(), collect_grads(local.params()));
    }
    EXPECT_LT(local.loss(local.forward(b), b).item(), before);
  }
}

TEST(Optimizer, SgdIsPlainDescent) {
  Model m(tiny_config(), 14);
  Sgd sgd(0.5);
  ParamGrads g;
  for (const auto& p : m.params()) g.emplace_back(p.value.size(), 1.0);
  const double before = m.param("head.bias")[0];
  sgd.step(m.params(), g);
  EXPECT_EQ(m.param("head.bias")[0], before - 0.5);
}

}  // namespace
}  // namespace tavat
