// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "oracles/oracles.hpp"
#include "tavat/batch_step.hpp"
#include "test_util.hpp"

namespace tavat {
namespace {

using testing::max_abs_diff;
using testing::random_batch;
using testing::tiny_config;

std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.params()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

AdvConfig freelb_config(int steps = 3) {
  AdvConfig c = AdvConfig::for_mode(AdvMode::freelb);
  c.steps = steps;
  c.epsilon = 1.0;
  c.sigma = 0.08;
  c.alpha = 0.3;
  return c;
}

PerturbationVocabulary make_vocab(const Model& m, double sigma, std::uint64_t seed, double eps) {
  Rng rng(seed);
  auto v = init_vocabulary(m.config().vocab_size, m.config().dim, sigma, rng);
  v.meta().epsilon = eps;
  return v;
}

TEST(BatchStep, FreeLBMatchesReferenceLoop) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model m(tiny_config(), seed);
    Batch b = random_batch(4, 3, 8, 20, 3, 100 + seed);
    const auto before = snapshot(m);
    oracle::ReferenceFreeLBConfig rc;
    const auto ref = oracle::reference_freelb_step(m, b, rc, 77 + seed);

    Sgd sgd(rc.learning_rate);
    Rng adv(77 + seed);
    auto report = tavat_batch_step(m, b, nullptr, freelb_config(rc.steps), sgd, adv);
    const auto after = snapshot(m);
    double worst = 0.0;
    for (std::size_t i = 0; i < after.size(); ++i)
      for (std::size_t j = 0; j < after[i].size(); ++j)
        worst = std::max(worst, std::abs((after[i][j] - before[i][j]) - ref.update[i][j]));
    EXPECT_LE(worst, 1e-12);
    ASSERT_EQ(report.inner_losses.size(), ref.inner_losses.size());
    for (std::size_t t = 0; t < ref.inner_losses.size(); ++t)
      EXPECT_NEAR(report.inner_losses[t], ref.inner_losses[t], 1e-12);
  }
}

TEST(BatchStep, TokenTogglesOffIsFreeLBBitwise) {
  Model base(tiny_config(), 4);
  Batch b = random_batch(3, 3, 7, 20, 3, 5);
  for (bool use_delta : {true, false}) {
    Model a = base.clone(), c = base.clone();
    AdvConfig off;
    off.use_vocab = off.use_token_norm = false;
    off.use_instance_delta = use_delta;
    Sgd s1(0.05), s2(0.05);
    Rng r1(9), r2(9);
    tavat_batch_step(a, b, nullptr, off, s1, r1);
    tavat_batch_step(c, b, nullptr, freelb_config(), s2, r2);
    EXPECT_EQ(snapshot(a), snapshot(c));
  }
}

TEST(BatchStep, SingleStepWithoutNoiseIsCleanGradient) {
  Model m(tiny_config(), 5);
  Batch b = random_batch(3, 3, 7, 20, 3, 6);
  Model probe = m.clone();
  const ParamGrads clean = parameter_gradient(probe, b, nullptr, nullptr);
  AdvConfig c = freelb_config(1);
  c.sigma = 0.0;
  Sgd sgd(0.05);
  Rng adv(1);
  auto report = tavat_batch_step(m, b, nullptr, c, sgd, adv, {.record_trace = true});
  EXPECT_EQ(report.applied_gradient, clean);
}

TEST(BatchStep, PlainModeUsesCleanGradient) {
  Model m(tiny_config(), 6);
  Batch b = random_batch(3, 3, 7, 20, 3, 7);
  Model probe = m.clone();
  const ParamGrads clean = parameter_gradient(probe, b, nullptr, nullptr);
  Sgd sgd(0.05);
  Rng adv(1);
  auto report = tavat_batch_step(m, b, nullptr, AdvConfig::for_mode(AdvMode::none), sgd, adv, {.record_trace = true});
  EXPECT_EQ(report.applied_gradient, clean);
  EXPECT_EQ(report.counters.forward_passes, 1u);
  EXPECT_EQ(report.inner_losses.size(), 1u);
}

TEST(BatchStep, AccumulatedGradientMatchesRecomputation) {
  Model m(tiny_config(), 7);
  Batch b = random_batch(4, 3, 8, 20, 3, 8);
  auto vocab = make_vocab(m, 0.08, 3, 1.0);
  AdvConfig c;
  c.steps = 4;
  Sgd sgd(0.05);
  Rng adv(2);
  Model probe = m.clone();
  auto report = tavat_batch_step(m, b, &vocab, c, sgd, adv, {.record_trace = true});
  ASSERT_EQ(report.trace_delta.size(), 4u);
  ParamGrads sum;
  for (std::size_t t = 0; t < 4; ++t) {
    auto g = parameter_gradient(probe, b, &report.trace_delta[t], &report.trace_eta[t]);
    if (sum.empty()) sum.assign(g.size(), {});
    for (std::size_t i = 0; i < g.size(); ++i) {
      sum[i].resize(g[i].size(), 0.0);
      for (std::size_t j = 0; j < g[i].size(); ++j) sum[i][j] += g[i][j] / 4.0;
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_LE(max_abs_diff(sum[i], report.applied_gradient[i]), 1e-10);
}

TEST(BatchStep, PgdUpdatesFromFinalPerturbation) {
  Model m(tiny_config(), 8);
  Batch b = random_batch(3, 3, 7, 20, 3, 9);
  AdvConfig c = AdvConfig::for_mode(AdvMode::pgd);
  c.steps = 3;
  Sgd sgd(0.05);
  Rng adv(3);
  Model probe = m.clone();
  auto report = tavat_batch_step(m, b, nullptr, c, sgd, adv, {.record_trace = true});
  ASSERT_EQ(report.trace_delta.size(), 4u);
  double loss = 0.0;
  auto g = parameter_gradient(probe, b, &report.trace_delta.back(), nullptr, &loss);
  EXPECT_EQ(g, report.applied_gradient);
  EXPECT_EQ(loss, report.update_loss);
  EXPECT_EQ(report.inner_losses.size(), 3u);
  EXPECT_EQ(report.counters.forward_passes, 4u);
}

TEST(BatchStep, NormsStayInsideTheBall) {
  Model m(tiny_config(), 9);
  auto vocab = make_vocab(m, 0.1, 4, 0.2);
  AdvConfig c;
  c.epsilon = 0.2;
  c.alpha = 0.5;
  c.sigma = 0.5;
  c.steps = 5;
  Sgd sgd(0.05);
  Rng adv(4);
  for (int i = 0; i < 5; ++i) {
    Batch b = random_batch(4, 3, 8, 20, 3, 20 + static_cast<std::uint64_t>(i));
    auto r = tavat_batch_step(m, b, &vocab, c, sgd, adv);
    for (double n : r.max_delta_norm) EXPECT_LE(n, 0.2 * (1 + 1e-12));
    for (double n : r.max_eta_norm) EXPECT_LE(n, 0.2 * (1 + 1e-12));
  }
  for (std::size_t id = 0; id < vocab.rows(); ++id) EXPECT_LE(frobenius_norm(vocab.row(id)), 0.2 * (1 + 1e-12));
}

TEST(BatchStep, PaddingCarriesNoPerturbation) {
  Model m(tiny_config(), 10);
  auto vocab = make_vocab(m, 0.1, 5, 1.0);
  Batch b = random_batch(4, 2, 8, 20, 3, 11);
  Sgd sgd(0.05);
  Rng adv(5);
  auto r = tavat_batch_step(m, b, &vocab, AdvConfig{}, sgd, adv, {.record_trace = true});
  const std::size_t d = m.config().dim;
  for (std::size_t t = 0; t < r.trace_eta.size(); ++t)
    for (std::size_t pos = 0; pos < b.mask.size(); ++pos) {
      if (b.mask[pos]) continue;
      for (std::size_t j = 0; j < d; ++j) {
        EXPECT_EQ(r.trace_eta[t][pos * d + j], 0.0);
        EXPECT_EQ(r.trace_delta[t][pos * d + j], 0.0);
      }
    }
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(vocab.row(kPadId)[j], 0.0);
}

TEST(BatchStep, ExtraPaddingDoesNotChangeTheUpdate) {
  Model base(tiny_config(), 11);
  auto v1 = make_vocab(base, 0.1, 6, 1.0);
  auto v2 = v1;
  Batch b = random_batch(3, 3, 6, 20, 3, 12);
  Batch wide = b;
  wide.length = 9;
  wide.token_ids.assign(b.size * 9, kPadId);
  wide.mask.assign(b.size * 9, 0);
  for (std::size_t e = 0; e < b.size; ++e)
    for (std::size_t j = 0; j < b.length; ++j) {
      wide.token_ids[e * 9 + j] = b.token_ids[e * b.length + j];
      wide.mask[e * 9 + j] = b.mask[e * b.length + j];
    }
  AdvConfig c;
  c.sigma = 0.0;  // the random stream is laid out over padded slots too
  Model a = base.clone(), w = base.clone();
  Sgd s1(0.05), s2(0.05);
  Rng r1(1), r2(1);
  tavat_batch_step(a, b, &v1, c, s1, r1);
  tavat_batch_step(w, wide, &v2, c, s2, r2);
  const auto sa = snapshot(a), sw = snapshot(w);
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_LE(max_abs_diff(sa[i], sw[i]), 1e-12) << i;
  EXPECT_LE(max_abs_diff(v1.table(), v2.table()), 1e-12);
}

TEST(BatchStep, OnlySeenRowsAreWritten) {
  Model m(tiny_config(), 12);
  auto vocab = make_vocab(m, 0.1, 7, 1.0);
  const auto initial = std::vector<double>(vocab.table().begin(), vocab.table().end());
  Batch b = random_batch(4, 4, 8, 20, 3, 13);
  AdvConfig c;
  Sgd sgd(0.05);
  Rng adv(6);
  tavat_batch_step(m, b, &vocab, c, sgd, adv);

  const std::size_t d = m.config().dim;
  std::set<std::int32_t> seen;
  for (std::size_t i = 0; i < b.token_ids.size(); ++i)
    if (b.mask[i]) seen.insert(b.token_ids[i]);
  for (std::size_t id = 0; id < vocab.rows(); ++id) {
    const bool written = seen.count(static_cast<std::int32_t>(id)) && c.special_tokens.permits(static_cast<std::int32_t>(id));
    std::vector<double> now(vocab.row(id).begin(), vocab.row(id).end());
    std::vector<double> was(initial.begin() + static_cast<std::ptrdiff_t>(id * d),
                            initial.begin() + static_cast<std::ptrdiff_t>((id + 1) * d));
    if (!written) EXPECT_EQ(now, was) << "row " << id;
  }

}

TEST(BatchStep, NextBatchGathersCommittedRows) {
  Model m(tiny_config(), 13);
  auto vocab = make_vocab(m, 0.1, 8, 1.0);
  Batch b1 = random_batch(4, 4, 8, 20, 3, 14), b2 = random_batch(4, 4, 8, 20, 3, 15);
  Sgd sgd(0.05);
  Rng adv(7);
  tavat_batch_step(m, b1, &vocab, AdvConfig{}, sgd, adv);
  Tensor expected = gather(vocab, b2.token_ids, b2.mask, b2.size, b2.length);
  auto r = tavat_batch_step(m, b2, &vocab, AdvConfig{}, sgd, adv, {.record_trace = true});
  EXPECT_EQ(std::vector<double>(r.trace_eta[0].data().begin(), r.trace_eta[0].data().end()),
            std::vector<double>(expected.data().begin(), expected.data().end()));
}

TEST(BatchStep, CountersFollowTheToggles) {
  Model base(tiny_config(), 14);
  Batch b = random_batch(3, 3, 7, 20, 3, 16);
  for (int mask = 0; mask < 8; ++mask) {
    AdvConfig c;
    c.steps = 2;
    c.use_vocab = mask & 1;
    c.use_token_norm = mask & 2;
    c.use_instance_delta = mask & 4;
    Model m = base.clone();
    auto vocab = make_vocab(m, 0.1, 9, 1.0);
    Sgd sgd(0.05);
    Rng adv(8);
    const auto s = tavat_batch_step(m, b, &vocab, c, sgd, adv).counters;
    const bool tok = c.use_vocab || c.use_token_norm;
    EXPECT_EQ(s.forward_passes, 2u);
    EXPECT_EQ(s.vocab_gathers, c.use_vocab ? 1u : 0u) << mask;
    EXPECT_EQ(s.vocab_scatters, c.use_vocab ? 1u : 0u) << mask;
    EXPECT_EQ(s.random_eta_inits, tok && !c.use_vocab ? 1u : 0u) << mask;
    EXPECT_EQ(s.token_norm_steps, c.use_token_norm ? 2u : 0u) << mask;
    EXPECT_EQ(s.sequence_norm_token_steps, tok && !c.use_token_norm ? 2u : 0u) << mask;
    EXPECT_EQ(s.instance_steps, (c.use_instance_delta || !tok) ? 2u : 0u) << mask;
  }
}

TEST(BatchStep, RequiresMatchingVocabulary) {
  Model m(tiny_config(), 15);
  Batch b = random_batch(2, 3, 5, 20, 3, 17);
  Sgd sgd(0.05);
  Rng adv(1);
  EXPECT_THROW(tavat_batch_step(m, b, nullptr, AdvConfig{}, sgd, adv), ConfigError);
  Rng vr(1);
  auto small = init_vocabulary(10, m.config().dim, 0.1, vr);
  EXPECT_THROW(tavat_batch_step(m, b, &small, AdvConfig{}, sgd, adv), VocabularyMismatch);
}

TEST(BatchStep, NonFiniteLeavesStateUntouched) {
  Model m(tiny_config(), 16);
  auto vocab = make_vocab(m, 0.1, 10, 1.0);
  Batch b = random_batch(3, 3, 7, 20, 3, 18);
  m.param("head.weight")[0] = std::numeric_limits<double>::quiet_NaN();
  const auto before_vocab = std::vector<double>(vocab.table().begin(), vocab.table().end());
  const auto bias = m.param("head.bias")[0];
  Sgd sgd(0.05);
  Rng adv(2);
  EXPECT_THROW(tavat_batch_step(m, b, &vocab, AdvConfig{}, sgd, adv), NonFiniteError);
  EXPECT_EQ(std::vector<double>(vocab.table().begin(), vocab.table().end()), before_vocab);
  EXPECT_EQ(m.param("head.bias")[0], bias);
}

}  // namespace
}  // namespace tavat
