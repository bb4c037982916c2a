// SPDX-License-Identifier: Apache-2.0
//
// Small text classifier: token embedding table, learned positions with an
// embedding norm, post-LN transformer blocks (or a masked mean-pool MLP),
// and a sequence- or token-level classification head.
//
// Perturbations are injected on the token-embedding output, i.e. between
// embed() and forward_from_embeddings(). Adding a perturbation table to the
// embedding weights is therefore the same as perturbing every occurrence of
// the token, which is what apply_to_embedding relies on.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tavat/batch.hpp"
#include "tavat/io.hpp"
#include "tavat/ops.hpp"
#include "tavat/rng.hpp"
#include "tavat/tensor.hpp"

namespace tavat {

enum class EncoderKind : std::uint32_t { transformer = 0, mean_pool_mlp = 1 };
enum class HeadKind : std::uint32_t { sequence = 0, token = 1 };
enum class Activation : std::uint32_t { gelu = 0, relu = 1 };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 128;
  std::size_t max_len = 64;
  std::size_t num_classes = 2;
  EncoderKind encoder = EncoderKind::transformer;
  HeadKind head = HeadKind::sequence;
  Activation activation = Activation::gelu;
  double dropout = 0.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (dim == 0 || ffn_hidden == 0 || max_len == 0) fail("dim, ffn_hidden and max_len must be positive");
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (encoder == EncoderKind::transformer) {
      if (layers == 0) fail("transformer needs at least one layer");
      if (heads == 0 || dim % heads != 0) fail("dim must be divisible by heads");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

class Model {
 public:
  Model() = default;

  Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(init_seed);
    const std::size_t d = config_.dim;
    auto uniform = [&](const std::string& name, Shape shape, double bound) {
      Tensor t(std::move(shape));
      for (auto& v : t.data()) v = rng.uniform(-bound, bound);
      add_param(name, t);
      return t;
    };
    auto xavier = [&](const std::string& name, std::size_t in, std::size_t out) {
      return uniform(name, Shape{in, out}, std::sqrt(6.0 / static_cast<double>(in + out)));
    };
    auto constant = [&](const std::string& name, Shape shape, double v) { add_param(name, Tensor(std::move(shape), v)); };

    Tensor tokens = uniform("embedding.tokens", Shape{config_.vocab_size, d}, 0.1);
    for (std::size_t j = 0; j < d; ++j) tokens[j] = 0.0;  // padding row
    uniform("embedding.positions", Shape{config_.max_len, d}, 0.1);
    constant("embedding.norm.gamma", Shape{d}, 1.0);
    constant("embedding.norm.beta", Shape{d}, 0.0);

    std::size_t features = d;
    if (config_.encoder == EncoderKind::transformer) {
      for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        for (const char* w : {"attn.query", "attn.key", "attn.value", "attn.output"}) {
          xavier(p + w + ".weight", d, d);
          constant(p + w + ".bias", Shape{d}, 0.0);
        }
        constant(p + "norm1.gamma", Shape{d}, 1.0);
        constant(p + "norm1.beta", Shape{d}, 0.0);
        xavier(p + "ffn.in.weight", d, config_.ffn_hidden);
        constant(p + "ffn.in.bias", Shape{config_.ffn_hidden}, 0.0);
        xavier(p + "ffn.out.weight", config_.ffn_hidden, d);
        constant(p + "ffn.out.bias", Shape{d}, 0.0);
        constant(p + "norm2.gamma", Shape{d}, 1.0);
        constant(p + "norm2.beta", Shape{d}, 0.0);
      }
    } else {
      xavier("mlp.weight", d, config_.ffn_hidden);
      constant("mlp.bias", Shape{config_.ffn_hidden}, 0.0);
      features = config_.ffn_hidden;
    }
    xavier("head.weight", features, config_.num_classes);
    constant("head.bias", Shape{config_.num_classes}, 0.0);
  }

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor>& params() { return params_; }
  const std::vector<NamedTensor>& params() const { return params_; }

  const Tensor& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.value;
    throw std::out_of_range("model: no parameter named " + name);
  }
  Tensor& param(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).param(name));
  }
  const Tensor& embedding() const { return param("embedding.tokens"); }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Deep copy; the snapshot shares no storage with this model.
  Model clone() const {
    Model m;
    m.config_ = config_;
    for (const auto& p : params_) m.add_param(p.name, p.value.clone());
    return m;
  }

  /// Token-embedding lookup, [B, L, D]. Padded slots get row 0.
  Tensor embed(const Batch& batch) const {
    return embedding_lookup(embedding(), batch.token_ids, Shape{batch.size, batch.length});
  }

  /// Encoder and head applied to (possibly perturbed) token embeddings.
  /// Returns [B, C] logits, or [B*L, C] for the token head. Padded
  /// positions never influence unpadded outputs.
  Tensor forward_from_embeddings(const Tensor& x, const Mask& mask, Rng* dropout_rng = nullptr) const {
    const std::size_t d = config_.dim;
    if (x.rank() != 3 || x.dim(2) != d) {
      throw ShapeError("forward_from_embeddings: expected [B, L, " + std::to_string(d) + "], got " +
                       to_string(x.shape()));
    }
    const std::size_t b = x.dim(0), l = x.dim(1);
    if (l > config_.max_len) {
      throw ShapeError("forward_from_embeddings: length " + std::to_string(l) + " exceeds max_len " +
                       std::to_string(config_.max_len));
    }
    if (mask.size() != b * l) throw ShapeError("forward_from_embeddings: mask does not match " + to_string(x.shape()));
    const bool drop = config_.dropout > 0.0 && dropout_rng != nullptr;
    auto maybe_drop = [&](const Tensor& t) { return drop ? dropout(t, config_.dropout, *dropout_rng) : t; };

    Tensor h = add(x, slice_rows(param("embedding.positions"), l));
    h = layer_norm(h, param("embedding.norm.gamma"), param("embedding.norm.beta"));

    Tensor features;
    if (config_.encoder == EncoderKind::transformer) {
      for (std::size_t layer = 0; layer < config_.layers; ++layer) h = block(layer, h, mask, maybe_drop);
      features = config_.head == HeadKind::sequence ? masked_mean_pool(h, mask) : h;
    } else {
      Tensor pooled = config_.head == HeadKind::sequence ? masked_mean_pool(h, mask) : h;
      features = activate(add(matmul(pooled, param("mlp.weight")), param("mlp.bias")));
      features = maybe_drop(features);
    }
    Tensor logits = add(matmul(features, param("head.weight")), param("head.bias"));
    if (config_.head == HeadKind::token) logits = reshape(logits, Shape{b * l, config_.num_classes});
    return logits;
  }

  Tensor forward(const Batch& batch, Rng* dropout_rng = nullptr) const {
    return forward_from_embeddings(embed(batch), batch.mask, dropout_rng);
  }

  /// Mean cross-entropy against the batch labels (or tags for the token head).
  Tensor loss(const Tensor& logits, const Batch& batch) const {
    if (config_.head == HeadKind::token) {
      if (!batch.is_tagging()) throw std::invalid_argument("model: token head needs a tagging batch");
      return cross_entropy(logits, batch.tags);
    }
    return cross_entropy(logits, batch.labels);
  }

  /// Argmax per logits row.
  static std::vector<int> predict(const Tensor& logits) {
    const std::size_t c = logits.shape().back();
    const std::size_t rows = logits.size() / c;
    std::vector<int> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (logits[r * c + j] > logits[r * c + best]) best = j;
      out[r] = static_cast<int>(best);
    }
    return out;
  }

  void add_param(std::string name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(t)});
  }

 private:
  template <class Drop>
  Tensor block(std::size_t layer, const Tensor& x, const Mask& mask, Drop&& maybe_drop) const {
    const std::string p = "block" + std::to_string(layer) + ".";
    const std::size_t heads = config_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config_.dim / heads));
    auto dense = [&](const Tensor& in, const std::string& w) {
      return add(matmul(in, param(p + w + ".weight")), param(p + w + ".bias"));
    };
    Tensor q = split_heads(dense(x, "attn.query"), heads);
    Tensor k = split_heads(dense(x, "attn.key"), heads);
    Tensor v = split_heads(dense(x, "attn.value"), heads);
    Tensor scores = mask_fill(scale(matmul_transposed(q, k), inv_sqrt), mask, heads);
    Tensor ctx = merge_heads(matmul(softmax(scores), v), heads);
    Tensor attn = maybe_drop(dense(ctx, "attn.output"));
    Tensor h = layer_norm(add(x, attn), param(p + "norm1.gamma"), param(p + "norm1.beta"));
    Tensor f = maybe_drop(dense(activate(dense(h, "ffn.in")), "ffn.out"));
    return layer_norm(add(h, f), param(p + "norm2.gamma"), param(p + "norm2.beta"));
  }

  Tensor activate(const Tensor& t) const {
    return config_.activation == Activation::gelu ? gelu(t) : relu(t);
  }

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "TAVM" | u32 version | hyperparameter block | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims..., f64 data
//
// Hyperparameter block: u32 vocab_size, dim, layers, heads, ffn_hidden,
// max_len, num_classes, encoder, head, activation; f64 dropout; u64 seeds
// (init, data, adversarial). All integers and reals are little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& model, const SeedSet& seeds, std::ostream& os) {
  const auto& c = model.config();
  io::write_bytes(os, "TAVM");
  io::write_u32(os, kCheckpointVersion);
  for (std::size_t v : {c.vocab_size, c.dim, c.layers, c.heads, c.ffn_hidden, c.max_len, c.num_classes}) {
    io::write_u32(os, static_cast<std::uint32_t>(v));
  }
  io::write_u32(os, static_cast<std::uint32_t>(c.encoder));
  io::write_u32(os, static_cast<std::uint32_t>(c.head));
  io::write_u32(os, static_cast<std::uint32_t>(c.activation));
  io::write_f64(os, c.dropout);
  io::write_u64(os, seeds.init);
  io::write_u64(os, seeds.data);
  io::write_u64(os, seeds.adversarial);
  io::write_u32(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    io::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    io::write_bytes(os, p.name);
    io::write_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) io::write_u64(os, d);
    for (double v : p.value.data()) io::write_f64(os, v);
  }
}

inline void save_checkpoint(const Model& model, const SeedSet& seeds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  save_checkpoint(model, seeds, os);
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

struct LoadedCheckpoint {
  Model model;
  SeedSet seeds;
};

inline LoadedCheckpoint load_checkpoint(std::istream& is) {
  io::expect_magic(is, "TAVM");
  const auto version = io::read_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  ModelConfig c;
  c.vocab_size = io::read_u32(is, "vocab_size");
  c.dim = io::read_u32(is, "dim");
  c.layers = io::read_u32(is, "layers");
  c.heads = io::read_u32(is, "heads");
  c.ffn_hidden = io::read_u32(is, "ffn_hidden");
  c.max_len = io::read_u32(is, "max_len");
  c.num_classes = io::read_u32(is, "num_classes");
  const auto enc = io::read_u32(is, "encoder");
  const auto head = io::read_u32(is, "head");
  const auto act = io::read_u32(is, "activation");
  if (enc > 1 || head > 1 || act > 1) throw FormatError("checkpoint: unknown architecture enum");
  c.encoder = static_cast<EncoderKind>(enc);
  c.head = static_cast<HeadKind>(head);
  c.activation = static_cast<Activation>(act);
  c.dropout = io::read_f64(is, "dropout");
  LoadedCheckpoint out;
  out.seeds.init = io::read_u64(is, "seed");
  out.seeds.data = io::read_u64(is, "seed");
  out.seeds.adversarial = io::read_u64(is, "seed");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  // Build the reference layout, then fill it tensor by tensor.
  Model model(c, 0);
  const auto count = io::read_u32(is, "tensor count");
  if (count != model.params().size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, architecture expects " +
                      std::to_string(model.params().size()));
  }
  for (auto& p : model.params()) {
    const auto name = io::read_string(is, io::read_u32(is, "name length"), "name");
    if (name != p.name) throw FormatError("checkpoint: expected tensor " + p.name + ", found " + name);
    const auto rank = io::read_u32(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u64(is, "dims");
    if (shape != p.value.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + to_string(shape) + ", expected " +
                        to_string(p.value.shape()));
    }
    for (auto& v : p.value.data()) v = io::read_f64(is, "tensor data");
  }
  out.model = std::move(model);
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  return load_checkpoint(is);
}

}  // namespace tavat
