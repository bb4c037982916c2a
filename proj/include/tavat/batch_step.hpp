// SPDX-License-Identifier: Apache-2.0
//
// One adversarial training step on a batch.
//
//   tavat / freelb:  init delta and eta, then for t = 1..K: forward at
//                    X + delta + eta, accumulate (1/K) grad_theta, update eta
//                    (token level) and delta (instance level) from the same
//                    backward pass. Scatter final eta into the vocabulary,
//                    hand the accumulated gradient to the optimizer.
//   pgd:             K ascent steps on delta with theta frozen, then one
//                    parameter update from the gradient at X + delta_K.
//   none:            plain fine-tuning step.
//
// freelb is tavat with the token channel switched off. Parameters and the
// vocabulary are only written after every inner step has succeeded.
#pragma once

#include <cstdint>
#include <vector>

#include "tavat/model.hpp"
#include "tavat/optim.hpp"
#include "tavat/perturbation.hpp"
#include "tavat/rng.hpp"
#include "tavat/vocabulary.hpp"

namespace tavat {

/// Instrumentation so ablation switches can be shown to touch disjoint code.
struct StepCounters {
  std::uint64_t forward_passes = 0;
  std::uint64_t vocab_gathers = 0;
  std::uint64_t vocab_scatters = 0;
  std::uint64_t random_eta_inits = 0;
  std::uint64_t token_norm_steps = 0;
  std::uint64_t sequence_norm_token_steps = 0;
  std::uint64_t instance_steps = 0;

  StepCounters& operator+=(const StepCounters& o) {
    forward_passes += o.forward_passes;
    vocab_gathers += o.vocab_gathers;
    vocab_scatters += o.vocab_scatters;
    random_eta_inits += o.random_eta_inits;
    token_norm_steps += o.token_norm_steps;
    sequence_norm_token_steps += o.sequence_norm_token_steps;
    instance_steps += o.instance_steps;
    return *this;
  }
};

struct StepOptions {
  /// Keep the perturbations used at each forward pass and the gradient
  /// handed to the optimizer.
  bool record_trace = false;
  Rng* dropout_rng = nullptr;
};

struct StepReport {
  /// Loss at each of the K inner forward passes.
  std::vector<double> inner_losses;
  /// pgd only: loss at X + delta_K, the point the update is computed from.
  double update_loss = 0.0;
  /// Largest per-example norm after each inner step (0 when the channel is off).
  std::vector<double> max_delta_norm;
  std::vector<double> max_eta_norm;
  /// Per-example norms of the final perturbations.
  std::vector<double> final_delta_norms;
  std::vector<double> final_eta_norms;
  StepCounters counters;

  // Filled when StepOptions::record_trace is set. For tavat/freelb, entry t
  // holds the perturbations of forward pass t + 1 (delta_t, eta_t); pgd
  // records the ascent trajectory followed by delta_K.
  std::vector<Tensor> trace_delta;
  std::vector<Tensor> trace_eta;
  ParamGrads applied_gradient;
};

namespace detail {

inline Tensor perturbed_input(const Model& model, const Batch& batch, const Tensor* delta, const Tensor* eta) {
  Tensor x = model.embed(batch);
  if (delta) x = add(x, *delta);
  if (eta) x = add(x, *eta);
  return x;
}

inline double max_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, x);
  return m;
}

}  // namespace detail

/// Gradient of the batch loss w.r.t. all parameters at a fixed input
/// perturbation (either pointer may be null). Leaves the model's grads zeroed.
inline ParamGrads parameter_gradient(Model& model, const Batch& batch, const Tensor* delta, const Tensor* eta,
                                     double* loss_out = nullptr, Rng* dropout_rng = nullptr) {
  model.zero_grad();
  Tensor x = detail::perturbed_input(model, batch, delta, eta);
  Tensor loss = model.loss(model.forward_from_embeddings(x, batch.mask, dropout_rng), batch);
  backward(loss);
  if (loss_out) *loss_out = loss.item();
  ParamGrads g = collect_grads(model.params());
  model.zero_grad();
  return g;
}

inline StepReport tavat_batch_step(Model& model, const Batch& batch, PerturbationVocabulary* vocab,
                                   const AdvConfig& cfg, Optimizer& optimizer, Rng& adv_rng,
                                   const StepOptions& options = {}) {
  cfg.validate();
  batch.validate();
  StepReport report;
  auto& params = model.params();
  const Shape pshape{batch.size, batch.length, model.config().dim};

  if (cfg.mode == AdvMode::none) {
    double loss = 0.0;
    ParamGrads g = parameter_gradient(model, batch, nullptr, nullptr, &loss, options.dropout_rng);
    report.inner_losses.push_back(loss);
    report.counters.forward_passes = 1;
    if (options.record_trace) report.applied_gradient = g;
    optimizer.step(params, g);
    return report;
  }

  const bool use_delta = cfg.instance_channel();
  const bool use_eta = cfg.token_channel();
  const bool eta_from_vocab = use_eta && cfg.use_vocab;
  if (eta_from_vocab) {
    if (!vocab) throw ConfigError("tavat step: use_vocab is set but no perturbation vocabulary was given");
    if (vocab->rows() != model.config().vocab_size || vocab->dim() != model.config().dim) {
      throw VocabularyMismatch("tavat step: perturbation vocabulary does not match the embedding table");
    }
  }

  Tensor delta = use_delta ? init_delta(pshape, cfg.sigma, batch.mask, adv_rng) : Tensor();
  Tensor eta;
  if (eta_from_vocab) {
    eta = gather(*vocab, batch.token_ids, batch.mask, batch.size, batch.length);
    ++report.counters.vocab_gathers;
  } else if (use_eta) {
    eta = init_delta(pshape, cfg.sigma, batch.mask, adv_rng);
    ++report.counters.random_eta_inits;
  }

  auto record = [&](const Tensor& d, const Tensor& e) {
    if (!options.record_trace) return;
    report.trace_delta.push_back(use_delta ? d.clone() : Tensor());
    report.trace_eta.push_back(use_eta ? e.clone() : Tensor());
  };

  // One forward/backward at the current perturbations; returns loss and
  // leaves parameter grads populated.
  auto forward_backward = [&](Tensor& d, Tensor& e) {
    if (use_delta) d.zero_grad(), d.set_requires_grad(true);
    if (use_eta) e.zero_grad(), e.set_requires_grad(true);
    model.zero_grad();
    Tensor x = detail::perturbed_input(model, batch, use_delta ? &d : nullptr, use_eta ? &e : nullptr);
    Tensor loss = model.loss(model.forward_from_embeddings(x, batch.mask, options.dropout_rng), batch);
    backward(loss);
    ++report.counters.forward_passes;
    return loss.item();
  };

  auto ascend = [&](Tensor& d, Tensor& e) {
    // Both updates read gradients from the same backward pass.
    Tensor next_e = e;
    if (use_eta) {
      next_e = token_step(e, e.grad(), cfg.alpha, cfg.eta_epsilon(), batch.mask, cfg.use_token_norm,
                          cfg.scaling_source);
      ++(cfg.use_token_norm ? report.counters.token_norm_steps : report.counters.sequence_norm_token_steps);
    }
    Tensor next_d = d;
    if (use_delta) {
      next_d = instance_step(d, d.grad(), cfg.alpha, cfg.epsilon, batch.mask);
      ++report.counters.instance_steps;
    }
    d = next_d;
    e = next_e;
    report.max_delta_norm.push_back(use_delta ? detail::max_of(example_norms(d)) : 0.0);
    report.max_eta_norm.push_back(use_eta ? detail::max_of(example_norms(e)) : 0.0);
  };

  ParamGrads accumulated;
  if (cfg.mode == AdvMode::pgd) {
    for (int t = 0; t < cfg.steps; ++t) {
      record(delta, eta);
      report.inner_losses.push_back(forward_backward(delta, eta));
      ascend(delta, eta);
    }
    record(delta, eta);
    report.update_loss = forward_backward(delta, eta);
    accumulated = collect_grads(params);
  } else {
    const double inv_k = 1.0 / static_cast<double>(cfg.steps);
    for (const auto& p : params) accumulated.emplace_back(p.value.size(), 0.0);
    for (int t = 0; t < cfg.steps; ++t) {
      record(delta, eta);
      report.inner_losses.push_back(forward_backward(delta, eta));
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].value.has_grad()) continue;
        auto g = params[i].value.grad();
        auto& acc = accumulated[i];
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += inv_k * g[j];
      }
      ascend(delta, eta);
    }
  }
  model.zero_grad();
  for (const auto& g : accumulated) detail::check_finite(g, "tavat step", "accumulated gradient");

  if (use_delta) report.final_delta_norms = example_norms(delta);
  if (use_eta) report.final_eta_norms = example_norms(eta);

  // Commit: vocabulary first, then parameters.
  if (eta_from_vocab) {
    scatter(*vocab, batch.token_ids, batch.mask, eta, cfg.special_tokens);
    ++report.counters.vocab_scatters;
  }
  if (options.record_trace) report.applied_gradient = accumulated;
  optimizer.step(params, accumulated);
  return report;
}

}  // namespace tavat
