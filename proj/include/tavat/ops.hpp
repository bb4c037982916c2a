// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Broadcasting is limited to a leading
// batch dimension: the right operand of add() may match the trailing
// dimensions of the left one, and matmul() shares a rank-2 weight across
// all leading rows of its left operand. Anything else is a ShapeError.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tavat/rng.hpp"
#include "tavat/tensor.hpp"

namespace tavat {

/// Row-major boolean mask, 1 = real token.
using Mask = std::vector<std::uint8_t>;

namespace detail {

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b,
                                        const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what + " (lhs " + to_string(a) + ", rhs " +
                   to_string(b) + ")");
}

// C[r, n] += sum_k A[r, k] * B[k, n], or B[n, k] when b_transposed.
inline void gemm_acc(std::size_t rows, std::size_t inner, std::size_t cols, const double* a,
                     const double* b, double* c, bool b_transposed) {
  if (!b_transposed) {
    for (std::size_t r = 0; r < rows; ++r) {
      double* crow = c + r * cols;
      for (std::size_t k = 0; k < inner; ++k) {
        const double av = a[r * inner + k];
        const double* brow = b + k * cols;
        for (std::size_t n = 0; n < cols; ++n) crow[n] += av * brow[n];
      }
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t n = 0; n < cols; ++n) {
        double s = 0.0;
        const double* arow = a + r * inner;
        const double* brow = b + n * inner;
        for (std::size_t k = 0; k < inner; ++k) s += arow[k] * brow[k];
        c[r * cols + n] += s;
      }
    }
  }
}

// C[k, n] += sum_r A[r, k] * G[r, n]  (A^T G)
inline void gemm_tn_acc(std::size_t rows, std::size_t inner, std::size_t cols, const double* a,
                        const double* g, double* c) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* grow = g + r * cols;
    for (std::size_t k = 0; k < inner; ++k) {
      const double av = a[r * inner + k];
      double* crow = c + k * cols;
      for (std::size_t n = 0; n < cols; ++n) crow[n] += av * grow[n];
    }
  }
}

}  // namespace detail

/// a [..., m, k] times b [k, n] (shared weight), or batched a [B, m, k]
/// times b [B, k, n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2) detail::shape_mismatch("matmul", a.shape(), b.shape(), "lhs rank < 2");
  const std::size_t k = a.shape().back();
  if (b.rank() == 2) {
    if (b.dim(0) != k) detail::shape_mismatch("matmul", a.shape(), b.shape(), "inner dims differ");
    const std::size_t n = b.dim(1);
    const std::size_t rows = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    detail::gemm_acc(rows, k, n, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                               [a, b, rows, k, n](const std::vector<double>& g) {
                                 if (a.requires_grad()) {
                                   auto& ga = a.impl()->grad_buffer();
                                   detail::gemm_acc(rows, n, k, g.data(), b.data().data(),
                                                    ga.data(), true);
                                 }
                                 if (b.requires_grad()) {
                                   auto& gb = b.impl()->grad_buffer();
                                   detail::gemm_tn_acc(rows, k, n, a.data().data(), g.data(),
                                                       gb.data());
                                 }
                               });
  }
  if (b.rank() == 3 && a.rank() == 3) {
    if (a.dim(0) != b.dim(0)) detail::shape_mismatch("matmul", a.shape(), b.shape(), "batch dims differ");
    if (b.dim(1) != k) detail::shape_mismatch("matmul", a.shape(), b.shape(), "inner dims differ");
    const std::size_t batch = a.dim(0), m = a.dim(1), n = b.dim(2);
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
      detail::gemm_acc(m, k, n, a.data().data() + s * m * k, b.data().data() + s * k * n,
                       out.data() + s * m * n, false);
    }
    return detail::make_result(
        "matmul", Shape{batch, m, n}, std::move(out), {a, b},
        [a, b, batch, m, k, n](const std::vector<double>& g) {
          for (std::size_t s = 0; s < batch; ++s) {
            const double* gs = g.data() + s * m * n;
            if (a.requires_grad()) {
              detail::gemm_acc(m, n, k, gs, b.data().data() + s * k * n,
                               a.impl()->grad_buffer().data() + s * m * k, true);
            }
            if (b.requires_grad()) {
              detail::gemm_tn_acc(m, k, n, a.data().data() + s * m * k, gs,
                                  b.impl()->grad_buffer().data() + s * k * n);
            }
          }
        });
  }
  detail::shape_mismatch("matmul", a.shape(), b.shape(), "unsupported ranks");
}

/// Batched a [B, m, k] times b^T where b is [B, n, k].
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    detail::shape_mismatch("matmul_transposed", a.shape(), b.shape(), "expected [B,m,k] and [B,n,k]");
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_acc(m, k, n, a.data().data() + s * m * k, b.data().data() + s * n * k,
                     out.data() + s * m * n, true);
  }
  return detail::make_result(
      "matmul_transposed", Shape{batch, m, n}, std::move(out), {a, b},
      [a, b, batch, m, k, n](const std::vector<double>& g) {
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gs = g.data() + s * m * n;
          if (a.requires_grad()) {
            // dA = G B
            detail::gemm_acc(m, n, k, gs, b.data().data() + s * n * k,
                             a.impl()->grad_buffer().data() + s * m * k, false);
          }
          if (b.requires_grad()) {
            // dB = G^T A
            detail::gemm_tn_acc(m, n, k, gs, a.data().data() + s * m * k,
                                b.impl()->grad_buffer().data() + s * n * k);
          }
        }
      });
}

/// Elementwise sum. b may equal a's shape or a's trailing dimensions.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    detail::shape_mismatch("add", as, bs, "rhs must equal lhs or its trailing dims");
  }
  const std::size_t inner = b.size();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % inner];
  return detail::make_result("add", as, std::move(out), {a, b},
                             [a, b, inner](const std::vector<double>& g) {
                               if (a.requires_grad()) {
                                 auto& ga = a.impl()->grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (b.requires_grad()) {
                                 auto& gb = b.impl()->grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
                               }
                             });
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a.shape(), b.shape(), "shapes differ");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b},
                             [a, b](const std::vector<double>& g) {
                               if (a.requires_grad()) {
                                 auto& ga = a.impl()->grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                               }
                               if (b.requires_grad()) {
                                 auto& gb = b.impl()->grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  return detail::make_result("scale", a.shape(), std::move(out), {a},
                             [a, c](const std::vector<double>& g) {
                               auto& ga = a.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                             });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result("relu", a.shape(), std::move(out), {a},
                             [a](const std::vector<double>& g) {
                               auto& ga = a.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (a[i] > 0.0) ga[i] += g[i];
                               }
                             });
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return detail::make_result("gelu", a.shape(), std::move(out), {a},
                             [a](const std::vector<double>& g) {
                               auto& ga = a.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double x = a[i];
                                 const double t = std::tanh(c * (x + k * x * x * x));
                                 const double d = 0.5 * (1.0 + t) +
                                                  0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
                                 ga[i] += g[i] * d;
                               }
                             });
}

/// Variance floor for layer_norm. Rows whose variance falls below it are
/// treated as constant and normalize to zero.
inline constexpr double kLayerNormVarianceFloor = 1e-12;

/// Normalizes over the last dimension, then applies gamma * x + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.shape() != gamma.shape()) {
    detail::shape_mismatch("layer_norm", x.shape(), gamma.shape(), "affine params must be [D]");
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  std::vector<std::uint8_t> floored(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    floored[r] = var < kLayerNormVarianceFloor;
    const double is = floored[r] ? 0.0 : 1.0 / std::sqrt(var);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * is;
      out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std),
       floored = std::move(floored)](const std::vector<double>& g) {
        if (gamma.requires_grad()) {
          auto& gg = gamma.impl()->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (beta.requires_grad()) {
          auto& gb = beta.impl()->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (!x.requires_grad()) return;
        auto& gx = x.impl()->grad_buffer();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          if (floored[r]) continue;  // output is constant in x on this row
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = g[r * d + j] * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[r * d + j];
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
          }
        }
      });
}

/// Softmax over the last dimension.
inline Tensor softmax(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = std::exp(xr[j] - mx);
      z += out[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= z;
  }
  auto probs = out;
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [x, d, rows, p = std::move(probs)](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * p[r * d + j];
                                 for (std::size_t j = 0; j < d; ++j) {
                                   gx[r * d + j] += p[r * d + j] * (g[r * d + j] - dot);
                                 }
                               }
                             });
}

/// Gathers rows of table [N, D] for ids laid out as ids_shape; result is
/// ids_shape + [D].
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids,
                               const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be [N, D], got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) throw ShapeError("embedding_lookup: ids do not match shape " + to_string(ids_shape));
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw std::out_of_range("embedding_lookup: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of size " + std::to_string(n));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return detail::make_result("embedding_lookup", std::move(out_shape), std::move(out), {table},
                             [table, d, idv = std::move(idv)](const std::vector<double>& g) {
                               auto& gt = table.impl()->grad_buffer();
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 double* row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                               }
                             });
}

/// Fill value for masked attention scores. Finite so outputs stay finite;
/// exp(fill - max) underflows to exactly zero.
inline constexpr double kMaskFill = -1e30;

/// scores [B * groups, Lq, Lk]; key_mask [B, Lk]. Entries whose key is
/// masked out are replaced with `value` and receive no gradient.
inline Tensor mask_fill(const Tensor& scores, const Mask& key_mask, std::size_t groups,
                        double value = kMaskFill) {
  if (scores.rank() != 3 || groups == 0 || scores.dim(0) % groups != 0) {
    throw ShapeError("mask_fill: scores must be [B*groups, Lq, Lk], got " + to_string(scores.shape()));
  }
  const std::size_t bg = scores.dim(0), lq = scores.dim(1), lk = scores.dim(2);
  if (key_mask.size() != (bg / groups) * lk) {
    throw ShapeError("mask_fill: mask has " + std::to_string(key_mask.size()) + " entries, expected " +
                     std::to_string((bg / groups) * lk) + " for scores " + to_string(scores.shape()));
  }
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t s = 0; s < bg; ++s) {
    const std::uint8_t* m = key_mask.data() + (s / groups) * lk;
    for (std::size_t q = 0; q < lq; ++q) {
      for (std::size_t k = 0; k < lk; ++k) {
        if (!m[k]) out[(s * lq + q) * lk + k] = value;
      }
    }
  }
  return detail::make_result("mask_fill", scores.shape(), std::move(out), {scores},
                             [scores, key_mask, groups, bg, lq, lk](const std::vector<double>& g) {
                               auto& gs = scores.impl()->grad_buffer();
                               for (std::size_t s = 0; s < bg; ++s) {
                                 const std::uint8_t* m = key_mask.data() + (s / groups) * lk;
                                 for (std::size_t q = 0; q < lq; ++q) {
                                   for (std::size_t k = 0; k < lk; ++k) {
                                     if (m[k]) gs[(s * lq + q) * lk + k] += g[(s * lq + q) * lk + k];
                                   }
                                 }
                               }
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) detail::shape_mismatch("reshape", x.shape(), shape, "element counts differ");
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [x](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

/// [B, L, H*dh] -> [B*H, L, dh]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw ShapeError("split_heads: cannot split " + to_string(x.shape()) + " into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
  auto index = [=](std::size_t bi, std::size_t li, std::size_t h, std::size_t j) {
    return std::pair{((bi * heads + h) * l + li) * dh + j, (bi * l + li) * d + h * dh + j};
  };
  std::vector<double> out(x.size());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          auto [o, i] = index(bi, li, h, j);
          out[o] = x[i];
        }
  return detail::make_result("split_heads", Shape{b * heads, l, dh}, std::move(out), {x},
                             [x, b, l, heads, dh, index](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t bi = 0; bi < b; ++bi)
                                 for (std::size_t li = 0; li < l; ++li)
                                   for (std::size_t h = 0; h < heads; ++h)
                                     for (std::size_t j = 0; j < dh; ++j) {
                                       auto [o, i] = index(bi, li, h, j);
                                       gx[i] += g[o];
                                     }
                             });
}

/// [B*H, L, dh] -> [B, L, H*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: cannot merge " + to_string(x.shape()) + " over " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2), d = dh * heads;
  auto index = [=](std::size_t bi, std::size_t li, std::size_t h, std::size_t j) {
    return std::pair{(bi * l + li) * d + h * dh + j, ((bi * heads + h) * l + li) * dh + j};
  };
  std::vector<double> out(x.size());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          auto [o, i] = index(bi, li, h, j);
          out[o] = x[i];
        }
  return detail::make_result("merge_heads", Shape{b, l, d}, std::move(out), {x},
                             [x, b, l, heads, dh, index](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t bi = 0; bi < b; ++bi)
                                 for (std::size_t li = 0; li < l; ++li)
                                   for (std::size_t h = 0; h < heads; ++h)
                                     for (std::size_t j = 0; j < dh; ++j) {
                                       auto [o, i] = index(bi, li, h, j);
                                       gx[i] += g[o];
                                     }
                             });
}

/// First `rows` rows of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t rows) {
  if (x.rank() != 2 || rows == 0 || rows > x.dim(0)) {
    throw ShapeError("slice_rows: cannot take " + std::to_string(rows) + " rows of " + to_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(rows * d));
  return detail::make_result("slice_rows", Shape{rows, d}, std::move(out), {x},
                             [x](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

/// Mean over unmasked positions: x [B, L, D], mask [B, L] -> [B, D].
/// Masked positions are skipped rather than weighted by zero.
inline Tensor masked_mean_pool(const Tensor& x, const Mask& mask) {
  if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
    throw ShapeError("masked_mean_pool: mask of " + std::to_string(mask.size()) +
                     " entries does not cover " + to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  std::vector<double> out(b * d, 0.0), counts(b, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t li = 0; li < l; ++li) {
      if (!mask[bi * l + li]) continue;
      counts[bi] += 1.0;
      for (std::size_t j = 0; j < d; ++j) out[bi * d + j] += x[(bi * l + li) * d + j];
    }
    if (counts[bi] == 0.0) throw ShapeError("masked_mean_pool: example " + std::to_string(bi) + " has no real tokens");
    for (std::size_t j = 0; j < d; ++j) out[bi * d + j] /= counts[bi];
  }
  return detail::make_result("masked_mean_pool", Shape{b, d}, std::move(out), {x},
                             [x, mask, b, l, d, counts](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t bi = 0; bi < b; ++bi)
                                 for (std::size_t li = 0; li < l; ++li) {
                                   if (!mask[bi * l + li]) continue;
                                   for (std::size_t j = 0; j < d; ++j)
                                     gx[(bi * l + li) * d + j] += g[bi * d + j] / counts[bi];
                                 }
                             });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", Shape{1}, {s}, {x}, [x](const std::vector<double>& g) {
    auto& gx = x.impl()->grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

/// Label value excluded from token-level losses (special tokens, padding).
inline constexpr int kIgnoreLabel = -1;

/// Mean negative log-softmax of the true class over rows whose label is
/// not kIgnoreLabel. logits [M, C].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  std::vector<double> probs(m * c);
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = logits.data().data() + r * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
    if (lab[r] == kIgnoreLabel) continue;
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(lab[r]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    total += lse - row[lab[r]];
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: every label is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  return detail::make_result("cross_entropy", Shape{1}, {total * inv}, {logits},
                             [logits, m, c, inv, probs = std::move(probs), lab = std::move(lab)](
                                 const std::vector<double>& g) {
                               auto& gl = logits.impl()->grad_buffer();
                               for (std::size_t r = 0; r < m; ++r) {
                                 if (lab[r] == kIgnoreLabel) continue;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double onehot = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                                   gl[r * c + j] += g[0] * inv * (probs[r * c + j] - onehot);
                                 }
                               }
                             });
}

/// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::vector<double> keep(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    keep[i] = rng.bernoulli(p) ? 0.0 : 1.0 / (1.0 - p);
    out[i] = x[i] * keep[i];
  }
  return detail::make_result("dropout", x.shape(), std::move(out), {x},
                             [x, keep = std::move(keep)](const std::vector<double>& g) {
                               auto& gx = x.impl()->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
                             });
}

}  // namespace tavat
