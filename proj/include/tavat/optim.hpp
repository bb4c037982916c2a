// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tavat/model.hpp"

namespace tavat {

/// One gradient buffer per parameter, in Model::params() order.
using ParamGrads = std::vector<std::vector<double>>;

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.05;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning_rate must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
  }
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Applies one update from the given gradients.
  virtual void step(std::vector<NamedTensor>& params, const ParamGrads& grads) = 0;
};

inline void check_grad_layout(const std::vector<NamedTensor>& params, const ParamGrads& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("optimizer: gradient count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].value.size()) {
      throw std::invalid_argument("optimizer: gradient for " + params[i].name + " has wrong size");
    }
  }
}

/// theta <- theta - lr * (g + wd * theta)
class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr, double weight_decay = 0.0) : lr_(lr), wd_(weight_decay) {}

  void step(std::vector<NamedTensor>& params, const ParamGrads& grads) override {
    check_grad_layout(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto data = params[i].value.data();
      const auto& g = grads[i];
      for (std::size_t j = 0; j < data.size(); ++j) data[j] -= lr_ * (g[j] + wd_ * data[j]);
    }
  }

 private:
  double lr_;
  double wd_;
};

/// Adam with decoupled weight decay (AdamW form).
class Adam final : public Optimizer {
 public:
  explicit Adam(const OptimizerConfig& c) : c_(c) {}

  void step(std::vector<NamedTensor>& params, const ParamGrads& grads) override {
    check_grad_layout(params, grads);
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.size(), 0.0);
        v_.emplace_back(p.value.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto data = params[i].value.data();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = grads[i][j];
        m_[i][j] = c_.beta1 * m_[i][j] + (1.0 - c_.beta1) * g;
        v_[i][j] = c_.beta2 * v_[i][j] + (1.0 - c_.beta2) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        data[j] -= c_.learning_rate * (mhat / (std::sqrt(vhat) + c_.adam_epsilon) + c_.weight_decay * data[j]);
      }
    }
  }

 private:
  OptimizerConfig c_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

inline std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& c) {
  c.validate();
  if (c.kind == OptimizerKind::adam) return std::make_unique<Adam>(c);
  return std::make_unique<Sgd>(c.learning_rate, c.weight_decay);
}

/// Copies the current parameter gradients (zeros where none were produced).
inline ParamGrads collect_grads(const std::vector<NamedTensor>& params) {
  ParamGrads out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (p.value.has_grad()) {
      out.emplace_back(p.value.grad().begin(), p.value.grad().end());
    } else {
      out.emplace_back(p.value.size(), 0.0);
    }
  }
  return out;
}

}  // namespace tavat
