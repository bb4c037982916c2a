// SPDX-License-Identifier: Apache-2.0
//
// Global perturbation vocabulary: one accumulated perturbation row per
// token id. Rows seed the token-level perturbation of every batch and are
// overwritten with the final perturbation after the inner ascent loop.
//
// File layout ("TAVV"):
//   "TAVV" | u32 version | u64 N | u64 D | N*D f64 | u64 meta length | meta JSON
// Integers and reals are little-endian. The JSON trailer is written with
// sorted keys so equal vocabularies produce byte-identical files.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tavat/batch.hpp"
#include "tavat/io.hpp"
#include "tavat/perturbation.hpp"
#include "tavat/rng.hpp"
#include "tavat/tensor.hpp"

namespace tavat {

inline constexpr std::uint32_t kVocabularyVersion = 1;

struct VocabularyMeta {
  std::string source_task;
  double sigma = 0.0;
  double epsilon = 1.0;
  std::uint64_t steps_seen = 0;
  std::uint64_t tokenizer_fingerprint = 0;
  SeedSet seeds;

  bool operator==(const VocabularyMeta&) const = default;
};

/// Raised when a vocabulary does not fit the model or tokenizer it is
/// being paired with.
class VocabularyMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PerturbationVocabulary {
 public:
  PerturbationVocabulary() = default;
  PerturbationVocabulary(std::size_t rows, std::size_t dim)
      : rows_(rows), dim_(dim), table_(rows * dim, 0.0) {
    if (rows == 0 || dim == 0) throw std::invalid_argument("perturbation vocabulary: N and D must be positive");
  }

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  std::span<double> row(std::size_t id) { return std::span<double>(table_).subspan(id * dim_, dim_); }
  std::span<const double> row(std::size_t id) const {
    return std::span<const double>(table_).subspan(id * dim_, dim_);
  }
  std::span<const double> table() const { return table_; }
  std::span<double> table() { return table_; }
  VocabularyMeta& meta() { return meta_; }
  const VocabularyMeta& meta() const { return meta_; }

  /// Copy of the table as an [N, D] tensor.
  Tensor as_tensor() const { return Tensor(Shape{rows_, dim_}, table_); }

  bool operator==(const PerturbationVocabulary&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> table_;
  VocabularyMeta meta_;
};

/// V = U(-sigma, sigma) / sqrt(D) elementwise; the padding row is zero.
inline PerturbationVocabulary init_vocabulary(std::size_t rows, std::size_t dim, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("init_vocabulary: sigma must be >= 0");
  PerturbationVocabulary v(rows, dim);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v.table()) x = rng.uniform(-sigma, sigma) * inv_sqrt_d;
  for (auto& x : v.row(kPadId)) x = 0.0;
  v.meta().sigma = sigma;
  return v;
}

/// eta_0 slice (b, j) = V[token_ids(b, j)]; zero at padded positions.
inline Tensor gather(const PerturbationVocabulary& vocab, std::span<const std::int32_t> token_ids,
                     const Mask& mask, std::size_t batch, std::size_t length) {
  if (token_ids.size() != batch * length || mask.size() != batch * length) {
    throw ShapeError("gather: ids/mask do not match " + std::to_string(batch) + "x" + std::to_string(length));
  }
  const std::size_t d = vocab.dim();
  Tensor out(Shape{batch, length, d});
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const auto id = token_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.rows()) {
      throw std::out_of_range("gather: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab.rows()));
    }
    if (!mask[i]) continue;
    auto r = vocab.row(static_cast<std::size_t>(id));
    std::copy(r.begin(), r.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

/// Writes final per-token perturbations back into the vocabulary.
///
/// Every real, policy-permitted id gets the average of its final slices in
/// this batch (a single occurrence is copied as is). The padding row is
/// never written. Rows are projected onto the vocabulary's epsilon ball.
/// Returns the number of rows written.
inline std::size_t scatter(PerturbationVocabulary& vocab, std::span<const std::int32_t> token_ids,
                           const Mask& mask, const Tensor& eta_final, const SpecialTokenPolicy& policy) {
  const std::size_t d = vocab.dim();
  if (eta_final.rank() != 3 || eta_final.dim(2) != d || token_ids.size() != eta_final.dim(0) * eta_final.dim(1) ||
      mask.size() != token_ids.size()) {
    throw ShapeError("scatter: eta " + to_string(eta_final.shape()) + " does not match ids/mask or D=" +
                     std::to_string(d));
  }
  // Ordered map keeps the write order independent of hashing.
  std::map<std::int32_t, std::pair<std::vector<double>, std::size_t>> acc;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const auto id = token_ids[i];
    if (!mask[i] || id == kPadId || !policy.permits(id)) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.rows()) {
      throw std::out_of_range("scatter: token id " + std::to_string(id) + " outside vocabulary");
    }
    auto& [sum, count] = acc[id];
    if (sum.empty()) sum.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) sum[j] += eta_final[i * d + j];
    ++count;
  }
  for (auto& [id, entry] : acc) {
    auto& [sum, count] = entry;
    auto r = vocab.row(static_cast<std::size_t>(id));
    if (count == 1) {
      std::copy(sum.begin(), sum.end(), r.begin());
    } else {
      for (std::size_t j = 0; j < d; ++j) r[j] = sum[j] / static_cast<double>(count);
    }
    project_frobenius(r, vocab.meta().epsilon);
  }
  if (!acc.empty()) ++vocab.meta().steps_seen;
  return acc.size();
}

inline std::string vocabulary_meta_json(const VocabularyMeta& m) {
  std::ostringstream fp;
  fp << std::hex;
  fp.width(16);
  fp.fill('0');
  fp << m.tokenizer_fingerprint;
  nlohmann::json j = {
      {"source_task", m.source_task},
      {"sigma", m.sigma},
      {"epsilon", m.epsilon},
      {"steps_seen", m.steps_seen},
      {"tokenizer_fingerprint", fp.str()},
      {"seeds", {{"init", m.seeds.init}, {"data", m.seeds.data}, {"adversarial", m.seeds.adversarial}}},
  };
  return j.dump();
}

inline VocabularyMeta parse_vocabulary_meta(const std::string& text) {
  VocabularyMeta m;
  try {
    auto j = nlohmann::json::parse(text);
    m.source_task = j.at("source_task").get<std::string>();
    m.sigma = j.at("sigma").get<double>();
    m.epsilon = j.at("epsilon").get<double>();
    m.steps_seen = j.at("steps_seen").get<std::uint64_t>();
    m.tokenizer_fingerprint = std::stoull(j.at("tokenizer_fingerprint").get<std::string>(), nullptr, 16);
    const auto& s = j.at("seeds");
    m.seeds = {s.at("init").get<std::uint64_t>(), s.at("data").get<std::uint64_t>(),
               s.at("adversarial").get<std::uint64_t>()};
  } catch (const std::exception& e) {
    throw FormatError(std::string("vocabulary metadata is corrupt: ") + e.what());
  }
  return m;
}

inline void save_vocabulary(const PerturbationVocabulary& v, std::ostream& os) {
  io::write_bytes(os, "TAVV");
  io::write_u32(os, kVocabularyVersion);
  io::write_u64(os, v.rows());
  io::write_u64(os, v.dim());
  for (double x : v.table()) io::write_f64(os, x);
  const auto meta = vocabulary_meta_json(v.meta());
  io::write_u64(os, meta.size());
  io::write_bytes(os, meta);
}

inline void save_vocabulary(const PerturbationVocabulary& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open vocabulary file for writing: " + path);
  save_vocabulary(v, os);
  if (!os) throw std::runtime_error("failed writing vocabulary file: " + path);
}

/// What the caller expects the loaded vocabulary to fit. Unset fields are
/// not checked.
struct VocabularyExpectation {
  std::optional<std::size_t> rows;
  std::optional<std::size_t> dim;
  std::optional<std::uint64_t> tokenizer_fingerprint;
};

inline PerturbationVocabulary load_vocabulary(std::istream& is, const VocabularyExpectation& expect = {}) {
  io::expect_magic(is, "TAVV");
  const auto version = io::read_u32(is, "version");
  if (version != kVocabularyVersion) {
    throw FormatError("vocabulary version " + std::to_string(version) + " is not supported");
  }
  const auto rows = io::read_u64(is, "N");
  const auto dim = io::read_u64(is, "D");
  if (rows == 0 || dim == 0 || rows > (1ULL << 32) || dim > (1ULL << 20)) {
    throw FormatError("vocabulary header has implausible dimensions");
  }
  if (expect.rows && *expect.rows != rows) {
    throw VocabularyMismatch("vocabulary has N=" + std::to_string(rows) + ", expected " + std::to_string(*expect.rows));
  }
  if (expect.dim && *expect.dim != dim) {
    throw VocabularyMismatch("vocabulary has D=" + std::to_string(dim) + ", expected " + std::to_string(*expect.dim));
  }
  PerturbationVocabulary v(rows, dim);
  for (auto& x : v.table()) x = io::read_f64(is, "vocabulary table");
  const auto meta_len = io::read_u64(is, "metadata length");
  if (meta_len > (1ULL << 24)) throw FormatError("vocabulary metadata length is implausible");
  v.meta() = parse_vocabulary_meta(io::read_string(is, meta_len, "metadata"));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("vocabulary file has trailing bytes");
  if (expect.tokenizer_fingerprint && *expect.tokenizer_fingerprint != v.meta().tokenizer_fingerprint) {
    std::ostringstream os;
    os << std::hex << "tokenizer fingerprint mismatch: vocabulary was built for " << v.meta().tokenizer_fingerprint
       << ", current tokenizer is " << *expect.tokenizer_fingerprint;
    throw VocabularyMismatch(os.str());
  }
  return v;
}

inline PerturbationVocabulary load_vocabulary(const std::string& path, const VocabularyExpectation& expect = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open vocabulary file: " + path);
  return load_vocabulary(is, expect);
}

/// Returns embedding + V elementwise as a new [N, D] tensor.
inline Tensor apply_to_embedding(const Tensor& embedding, const PerturbationVocabulary& vocab) {
  if (embedding.rank() != 2 || embedding.dim(0) != vocab.rows() || embedding.dim(1) != vocab.dim()) {
    throw ShapeError("apply_to_embedding: embedding " + to_string(embedding.shape()) + " vs vocabulary [" +
                     std::to_string(vocab.rows()) + "x" + std::to_string(vocab.dim()) + "]");
  }
  Tensor out = embedding.clone();
  auto t = vocab.table();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  return out;
}

}  // namespace tavat
