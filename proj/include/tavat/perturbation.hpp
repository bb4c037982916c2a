// SPDX-License-Identifier: Apache-2.0
//
// Perturbation algebra for adversarial training on embeddings.
//
// All perturbations are [B, L, D] tensors. Norms are Frobenius norms taken
// per example over its L x D slice; the batch dimension never mixes.
// Rows at padded positions are kept exactly zero.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tavat/ops.hpp"
#include "tavat/rng.hpp"
#include "tavat/tensor.hpp"

namespace tavat {

/// Gradient norms below this contribute a zero step instead of a division.
inline constexpr double kGradNormFloor = 1e-12;
/// Below this maximum token norm the scaling index falls back to 1.
inline constexpr double kColdStartNorm = 1e-12;

enum class AdvMode { none, pgd, freelb, tavat };

/// Which token norms feed the scaling index: the perturbation before the
/// ascent step, or the ascended one.
enum class ScalingSource { pre_step, post_ascent };

/// Which token ids may write their final perturbation into the vocabulary.
struct SpecialTokenPolicy {
  enum class Kind { include, exclude };
  Kind kind = Kind::exclude;
  std::set<std::int32_t> ids;

  bool permits(std::int32_t id) const {
    const bool listed = ids.count(id) > 0;
    return kind == Kind::include ? listed : !listed;
  }
  bool operator==(const SpecialTokenPolicy&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AdvConfig {
  AdvMode mode = AdvMode::tavat;
  double epsilon = 1.0;
  double sigma = 0.08;
  double alpha = 0.3;
  int steps = 3;  // K
  bool use_vocab = true;
  bool use_token_norm = true;
  bool use_instance_delta = true;
  /// Separate radius for the token-level perturbation; tied to epsilon when unset.
  std::optional<double> token_epsilon;
  ScalingSource scaling_source = ScalingSource::pre_step;
  SpecialTokenPolicy special_tokens;

  double eta_epsilon() const { return token_epsilon.value_or(epsilon); }

  /// Token-level channel (eta) participates in the step.
  bool token_channel() const { return mode == AdvMode::tavat && (use_vocab || use_token_norm); }
  /// Instance-level channel (delta) participates in the step. Without a
  /// token channel the instance channel carries the whole perturbation.
  bool instance_channel() const {
    if (mode == AdvMode::none) return false;
    if (mode != AdvMode::tavat) return true;
    return use_instance_delta || !token_channel();
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("adversarial config: " + m); };
    if (mode == AdvMode::none) return;
    if (!(epsilon > 0.0)) fail("epsilon must be > 0");
    if (token_epsilon && !(*token_epsilon > 0.0)) fail("token epsilon must be > 0");
    if (!(sigma >= 0.0)) fail("sigma must be >= 0");
    if (!(alpha > 0.0)) fail("alpha must be > 0");
    if (steps < 1) fail("K must be >= 1");
    if ((mode == AdvMode::freelb || mode == AdvMode::pgd) && (use_vocab || use_token_norm)) {
      fail("freelb and pgd modes require use_vocab=false and use_token_norm=false");
    }
  }

  /// Defaults for a mode with the mode-implied flags applied.
  static AdvConfig for_mode(AdvMode m) {
    AdvConfig c;
    c.mode = m;
    if (m != AdvMode::tavat) {
      c.use_vocab = false;
      c.use_token_norm = false;
    }
    return c;
  }
};

inline const char* to_string(AdvMode m) {
  switch (m) {
    case AdvMode::none: return "none";
    case AdvMode::pgd: return "pgd";
    case AdvMode::freelb: return "freelb";
    case AdvMode::tavat: return "tavat";
  }
  return "?";
}

inline AdvMode parse_mode(const std::string& s) {
  if (s == "none" || s == "plain") return AdvMode::none;
  if (s == "pgd") return AdvMode::pgd;
  if (s == "freelb") return AdvMode::freelb;
  if (s == "tavat") return AdvMode::tavat;
  throw ConfigError("unknown adversarial mode: " + s);
}

inline double frobenius_norm(std::span<const double> p) {
  double s = 0.0;
  for (double v : p) s += v * v;
  return std::sqrt(s);
}

/// Projects p onto the Frobenius ball of radius epsilon in place. Interior
/// points are left untouched. Returns true when p was rescaled.
///
/// The factor is nudged down until the recomputed norm is within epsilon,
/// so a second projection is a bitwise no-op.
inline bool project_frobenius(std::span<double> p, double epsilon) {
  const double n = frobenius_norm(p);
  if (n <= epsilon) return false;
  const std::vector<double> original(p.begin(), p.end());
  double f = epsilon / n;
  while (true) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = original[i] * f;
    if (frobenius_norm(p) <= epsilon || f == 0.0) break;
    f = std::nextafter(f, 0.0);
  }
  return true;
}

inline Tensor project_frobenius(const Tensor& p, double epsilon) {
  Tensor out = p.clone();
  project_frobenius(out.data(), epsilon);
  return out;
}

namespace detail {

inline void check_perturbation(const char* op, const Tensor& t, const Mask& mask) {
  if (t.rank() != 3 || mask.size() != t.dim(0) * t.dim(1)) {
    throw ShapeError(std::string(op) + ": perturbation " + to_string(t.shape()) + " does not match mask of " +
                     std::to_string(mask.size()) + " entries");
  }
}

inline void check_gradient(const char* op, std::span<const double> g, std::size_t expected) {
  if (g.size() != expected) {
    throw ShapeError(std::string(op) + ": gradient has " + std::to_string(g.size()) + " entries, expected " +
                     std::to_string(expected));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      std::ostringstream os;
      os << op << ": non-finite perturbation gradient at flat index " << i << " (" << g[i] << "); step aborted";
      throw NonFiniteError(os.str());
    }
  }
}

}  // namespace detail

/// delta_0 = U(-sigma, sigma) / sqrt(D) on real tokens, zero on padding.
/// One draw is consumed per element, padded or not, in row-major order.
inline Tensor init_delta(const Shape& shape, double sigma, const Mask& mask, Rng& rng) {
  if (shape.size() != 3) throw ShapeError("init_delta: expected [B, L, D], got " + to_string(shape));
  if (sigma < 0.0) throw std::invalid_argument("init_delta: sigma must be >= 0");
  Tensor out(shape);
  detail::check_perturbation("init_delta", out, mask);
  const std::size_t d = shape[2];
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t row = 0; row < mask.size(); ++row) {
    for (std::size_t j = 0; j < d; ++j) {
      const double u = rng.uniform(-sigma, sigma);
      out[row * d + j] = mask[row] ? u * inv_sqrt_d : 0.0;
    }
  }
  return out;
}

/// n^i = |eta^i| / max_j |eta^j| over the real tokens of one sequence.
/// eta is [L, D]; padded positions get 0. When the maximum norm is below
/// kColdStartNorm every real token gets 1.
inline std::vector<double> scaling_index(std::span<const double> eta, std::span<const std::uint8_t> mask,
                                         std::size_t dim) {
  const std::size_t len = mask.size();
  if (len == 0 || dim == 0) throw std::invalid_argument("scaling_index: empty sequence");
  if (eta.size() != len * dim) throw ShapeError("scaling_index: eta does not match mask and dim");
  std::vector<double> n(len, 0.0);
  double mx = 0.0;
  bool any_real = false;
  for (std::size_t i = 0; i < len; ++i) {
    if (!mask[i]) continue;
    any_real = true;
    n[i] = frobenius_norm(eta.subspan(i * dim, dim));
    mx = std::max(mx, n[i]);
  }
  if (!any_real) throw std::invalid_argument("scaling_index: sequence has no real tokens");
  for (std::size_t i = 0; i < len; ++i) {
    if (!mask[i]) continue;
    n[i] = mx < kColdStartNorm ? 1.0 : n[i] / mx;
  }
  return n;
}

/// Token-level ascent step on a [B, L, D] perturbation.
///
/// With use_token_norm, each token's gradient is normalized by its own
/// norm, stepped by alpha and scaled by its scaling index; otherwise the
/// gradient is normalized over the whole sequence and no scaling applies.
/// The result is projected per example onto the epsilon ball.
inline Tensor token_step(const Tensor& eta, std::span<const double> grad, double alpha, double epsilon,
                         const Mask& mask, bool use_token_norm,
                         ScalingSource source = ScalingSource::pre_step) {
  detail::check_perturbation("token_step", eta, mask);
  detail::check_gradient("token_step", grad, eta.size());
  const std::size_t b = eta.dim(0), l = eta.dim(1), d = eta.dim(2);
  Tensor out(eta.shape());
  for (std::size_t e = 0; e < b; ++e) {
    const std::size_t off = e * l * d;
    std::span<const std::uint8_t> m(mask.data() + e * l, l);
    std::span<const double> prev = eta.data().subspan(off, l * d);
    std::span<const double> g = grad.subspan(off, l * d);
    std::span<double> next = out.data().subspan(off, l * d);

    if (use_token_norm) {
      std::vector<double> n;
      if (source == ScalingSource::pre_step) n = scaling_index(prev, m, d);
      for (std::size_t i = 0; i < l; ++i) {
        if (!m[i]) continue;
        const double gn = frobenius_norm(g.subspan(i * d, d));
        const double s = gn >= kGradNormFloor ? alpha / gn : 0.0;
        for (std::size_t j = 0; j < d; ++j) next[i * d + j] = prev[i * d + j] + s * g[i * d + j];
      }
      if (source == ScalingSource::post_ascent) n = scaling_index(next, m, d);
      for (std::size_t i = 0; i < l; ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < d; ++j) next[i * d + j] *= n[i];
      }
    } else {
      double sq = 0.0;
      for (std::size_t i = 0; i < l; ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < d; ++j) sq += g[i * d + j] * g[i * d + j];
      }
      const double gn = std::sqrt(sq);
      const double s = gn >= kGradNormFloor ? alpha / gn : 0.0;
      for (std::size_t i = 0; i < l; ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < d; ++j) next[i * d + j] = prev[i * d + j] + s * g[i * d + j];
      }
    }
    project_frobenius(next, epsilon);
  }
  return out;
}

/// Instance-level ascent step: whole-sequence normalized gradient step,
/// then projection onto the epsilon ball, per example.
inline Tensor instance_step(const Tensor& delta, std::span<const double> grad, double alpha, double epsilon,
                            const Mask& mask) {
  detail::check_perturbation("instance_step", delta, mask);
  detail::check_gradient("instance_step", grad, delta.size());
  return token_step(delta, grad, alpha, epsilon, mask, /*use_token_norm=*/false);
}

/// Per-example Frobenius norms of a [B, L, D] tensor.
inline std::vector<double> example_norms(const Tensor& p) {
  const std::size_t b = p.dim(0), per = p.size() / p.dim(0);
  std::vector<double> out(b);
  for (std::size_t e = 0; e < b; ++e) out[e] = frobenius_norm(p.data().subspan(e * per, per));
  return out;
}

}  // namespace tavat
