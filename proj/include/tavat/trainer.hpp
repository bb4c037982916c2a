// SPDX-License-Identifier: Apache-2.0
//
// Training runs: configuration, data preparation, the epoch/batch loop,
// evaluation, artifacts and toggle grids.
//
// Output directory layout (all optional parts skipped when output_dir is
// empty):
//   config.json       resolved configuration including seeds
//   tokenizer.txt     token inventory
//   checkpoint.tavm   final (or last-good) parameters
//   metrics.jsonl     metrics stream
//   vocabulary.tavv   perturbation vocabulary, when the run keeps one
#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tavat/batch_step.hpp"
#include "tavat/data.hpp"
#include "tavat/metrics.hpp"
#include "tavat/model.hpp"
#include "tavat/optim.hpp"
#include "tavat/perturbation.hpp"
#include "tavat/vocabulary.hpp"

namespace tavat {

enum class DataSource { synthetic_classification, synthetic_tagging, delimited };

struct DatasetSpec {
  DataSource source = DataSource::synthetic_classification;
  // Synthetic sources: the pool of train_size + dev_size examples is drawn
  // with corpus_seed and split by a split_seed permutation.
  std::size_t train_size = 1000;
  std::size_t dev_size = 500;
  double noise = 0.0;
  std::uint64_t corpus_seed = 11;
  std::uint64_t split_seed = 12;
  // Optional low-resource subsample of the training split.
  std::optional<std::size_t> subsample_count;
  std::optional<double> subsample_fraction;
  std::size_t max_len = 32;
  // Delimited source. Without dev_path, dev_fraction of train_path is held out.
  std::string train_path;
  std::string dev_path;
  double dev_fraction = 0.2;
  DelimitedFormat format;
  bool lowercase = false;
};

struct EmitOptions {
  bool wall_time = false;
  /// Write the perturbation vocabulary when the run keeps one.
  bool save_vocab = true;
};

struct TrainConfig {
  ModelConfig model;
  /// Radius 0.1: with embeddings of norm ~0.3 per token, 1.0 drowns the input.
  AdvConfig adv = [] {
    AdvConfig a;
    a.epsilon = 0.1;
    return a;
  }();
  /// Unset: sigma = 1e-2 * sqrt(D) and alpha = 0.3 * epsilon.
  std::optional<double> sigma;
  std::optional<double> alpha;
  /// Token names; resolved against the tokenizer into adv.special_tokens.
  SpecialTokenPolicy::Kind special_policy = SpecialTokenPolicy::Kind::exclude;
  std::vector<std::string> special_token_names;
  OptimizerConfig optimizer;
  int epochs = 3;
  std::size_t batch_size = 16;
  std::size_t eval_batch_size = 64;
  SeedSet seeds;
  DatasetSpec data;
  std::string output_dir;
  std::string task_name = "synthetic";
  std::string init_embedding_from_vocab;
  std::string save_vocab_path;
  EmitOptions emit;

  /// Adversarial settings with defaults that depend on other fields filled in.
  AdvConfig resolved_adv() const {
    AdvConfig a = adv;
    a.sigma = sigma.value_or(1e-2 * std::sqrt(static_cast<double>(model.dim)));
    a.alpha = alpha.value_or(0.3 * adv.epsilon);
    return a;
  }

  /// Checks everything that can be checked without touching data.
  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (epochs < 0) fail("epochs must be >= 0");
    if (batch_size == 0 || eval_batch_size == 0) fail("batch sizes must be >= 1");
    if (data.max_len < 3) fail("max_len must be >= 3");
    if (data.max_len > model.max_len) fail("data max_len exceeds the model's max_len");
    if (data.subsample_count && data.subsample_fraction) fail("give a subsample count or a fraction, not both");
    if (data.source == DataSource::delimited) {
      if (data.train_path.empty()) fail("delimited source needs train_path");
      if (!std::filesystem::exists(data.train_path)) fail("train_path does not exist: " + data.train_path);
      if (!data.dev_path.empty() && !std::filesystem::exists(data.dev_path)) {
        fail("dev_path does not exist: " + data.dev_path);
      }
      if (data.dev_path.empty() && !(data.dev_fraction > 0.0 && data.dev_fraction < 1.0)) {
        fail("dev_fraction must be in (0, 1)");
      }
    } else if (data.train_size == 0 || data.dev_size == 0) {
      fail("synthetic train_size and dev_size must be > 0");
    }
    if (!init_embedding_from_vocab.empty() && !std::filesystem::exists(init_embedding_from_vocab)) {
      fail("vocabulary to apply does not exist: " + init_embedding_from_vocab);
    }
    resolved_adv().validate();
    optimizer.validate();
  }
};

// ---------------------------------------------------------------------------
// Config <-> JSON

inline const char* to_string(DataSource s) {
  switch (s) {
    case DataSource::synthetic_classification: return "synthetic-classification";
    case DataSource::synthetic_tagging: return "synthetic-tagging";
    case DataSource::delimited: return "delimited";
  }
  return "?";
}

inline DataSource parse_source(const std::string& s) {
  if (s == "synthetic-classification") return DataSource::synthetic_classification;
  if (s == "synthetic-tagging") return DataSource::synthetic_tagging;
  if (s == "delimited") return DataSource::delimited;
  throw ConfigError("unknown data source: " + s);
}

inline nlohmann::json to_json(const TrainConfig& c) {
  using nlohmann::json;
  const auto a = c.resolved_adv();
  json adv = {{"mode", to_string(a.mode)},
              {"epsilon", a.epsilon},
              {"sigma", a.sigma},
              {"alpha", a.alpha},
              {"steps", a.steps},
              {"use_vocab", a.use_vocab},
              {"use_token_norm", a.use_token_norm},
              {"use_instance_delta", a.use_instance_delta},
              {"scaling_source", a.scaling_source == ScalingSource::pre_step ? "pre-step" : "post-ascent"},
              {"special_tokens",
               {{"policy", c.special_policy == SpecialTokenPolicy::Kind::include ? "include" : "exclude"},
                {"tokens", c.special_token_names}}}};
  if (a.token_epsilon) adv["token_epsilon"] = *a.token_epsilon;
  json data = {{"source", to_string(c.data.source)},
               {"train_size", c.data.train_size},
               {"dev_size", c.data.dev_size},
               {"noise", c.data.noise},
               {"corpus_seed", c.data.corpus_seed},
               {"split_seed", c.data.split_seed},
               {"max_len", c.data.max_len},
               {"lowercase", c.data.lowercase}};
  if (c.data.subsample_count) data["subsample_count"] = *c.data.subsample_count;
  if (c.data.subsample_fraction) data["subsample_fraction"] = *c.data.subsample_fraction;
  if (c.data.source == DataSource::delimited) {
    data["train_path"] = c.data.train_path;
    data["dev_path"] = c.data.dev_path;
    data["dev_fraction"] = c.data.dev_fraction;
    data["delimiter"] = std::string(1, c.data.format.delimiter);
    data["has_header"] = c.data.format.has_header;
    data["text_column"] = c.data.format.text_column;
    data["label_column"] = c.data.format.label_column;
    data["label_names"] = c.data.format.label_names;
    data["num_classes"] = c.data.format.num_classes;
  }
  return {
      {"model",
       {{"dim", c.model.dim},
        {"layers", c.model.layers},
        {"heads", c.model.heads},
        {"ffn_hidden", c.model.ffn_hidden},
        {"max_len", c.model.max_len},
        {"encoder", c.model.encoder == EncoderKind::transformer ? "transformer" : "mean-pool-mlp"},
        {"activation", c.model.activation == Activation::gelu ? "gelu" : "relu"},
        {"dropout", c.model.dropout}}},
      {"adversarial", adv},
      {"optimizer",
       {{"kind", c.optimizer.kind == OptimizerKind::sgd ? "sgd" : "adam"},
        {"learning_rate", c.optimizer.learning_rate},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"eval_batch_size", c.eval_batch_size},
      {"seeds", {{"init", c.seeds.init}, {"data", c.seeds.data}, {"adversarial", c.seeds.adversarial}}},
      {"data", data},
      {"output_dir", c.output_dir},
      {"task_name", c.task_name},
      {"init_embedding_from_vocab", c.init_embedding_from_vocab},
      {"save_vocab_path", c.save_vocab_path},
      {"emit", {{"wall_time", c.emit.wall_time}, {"save_vocab", c.emit.save_vocab}}},
  };
}

/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected so
/// typos do not silently fall back to defaults.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  auto known = [](const nlohmann::json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    for (const auto& [k, v] : obj.items()) {
      bool ok = false;
      for (const char* key : keys) ok = ok || k == key;
      if (!ok) throw ConfigError("config: unknown key \"" + where + k + "\"");
    }
  };
  try {
    known(j, {"model", "adversarial", "optimizer", "epochs", "batch_size", "eval_batch_size", "seeds", "data",
              "output_dir", "task_name", "init_embedding_from_vocab", "save_vocab_path", "emit"},
          "");
    if (auto it = j.find("model"); it != j.end()) {
      const auto& m = *it;
      known(m, {"dim", "layers", "heads", "ffn_hidden", "max_len", "encoder", "activation", "dropout"}, "model.");
      c.model.dim = m.value("dim", c.model.dim);
      c.model.layers = m.value("layers", c.model.layers);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.ffn_hidden = m.value("ffn_hidden", c.model.ffn_hidden);
      c.model.max_len = m.value("max_len", c.model.max_len);
      c.model.dropout = m.value("dropout", c.model.dropout);
      if (m.contains("encoder")) {
        const auto e = m.at("encoder").get<std::string>();
        if (e != "transformer" && e != "mean-pool-mlp") throw ConfigError("config: unknown encoder " + e);
        c.model.encoder = e == "transformer" ? EncoderKind::transformer : EncoderKind::mean_pool_mlp;
      }
      if (m.contains("activation")) {
        const auto a = m.at("activation").get<std::string>();
        if (a != "gelu" && a != "relu") throw ConfigError("config: unknown activation " + a);
        c.model.activation = a == "gelu" ? Activation::gelu : Activation::relu;
      }
    }
    if (auto it = j.find("adversarial"); it != j.end()) {
      const auto& a = *it;
      known(a, {"mode", "epsilon", "sigma", "alpha", "steps", "use_vocab", "use_token_norm", "use_instance_delta",
                "token_epsilon", "scaling_source", "special_tokens"},
            "adversarial.");
      if (a.contains("mode")) {
        // Mode-implied flags first; explicit flags below still win.
        const auto mode = parse_mode(a.at("mode").get<std::string>());
        const auto fresh = AdvConfig::for_mode(mode);
        c.adv.mode = mode;
        c.adv.use_vocab = fresh.use_vocab;
        c.adv.use_token_norm = fresh.use_token_norm;
      }
      c.adv.epsilon = a.value("epsilon", c.adv.epsilon);
      if (a.contains("sigma")) c.sigma = a.at("sigma").get<double>();
      if (a.contains("alpha")) c.alpha = a.at("alpha").get<double>();
      c.adv.steps = a.value("steps", c.adv.steps);
      c.adv.use_vocab = a.value("use_vocab", c.adv.use_vocab);
      c.adv.use_token_norm = a.value("use_token_norm", c.adv.use_token_norm);
      c.adv.use_instance_delta = a.value("use_instance_delta", c.adv.use_instance_delta);
      if (a.contains("token_epsilon")) c.adv.token_epsilon = a.at("token_epsilon").get<double>();
      if (a.contains("scaling_source")) {
        const auto s = a.at("scaling_source").get<std::string>();
        if (s != "pre-step" && s != "post-ascent") throw ConfigError("config: unknown scaling_source " + s);
        c.adv.scaling_source = s == "pre-step" ? ScalingSource::pre_step : ScalingSource::post_ascent;
      }
      if (a.contains("special_tokens")) {
        const auto& st = a.at("special_tokens");
        known(st, {"policy", "tokens"}, "adversarial.special_tokens.");
        const auto p = st.value("policy", std::string("exclude"));
        if (p != "include" && p != "exclude") throw ConfigError("config: special token policy must be include|exclude");
        c.special_policy = p == "include" ? SpecialTokenPolicy::Kind::include : SpecialTokenPolicy::Kind::exclude;
        c.special_token_names = st.value("tokens", std::vector<std::string>{});
      }
    }
    if (auto it = j.find("optimizer"); it != j.end()) {
      const auto& o = *it;
      known(o, {"kind", "learning_rate", "weight_decay"}, "optimizer.");
      if (o.contains("kind")) {
        const auto k = o.at("kind").get<std::string>();
        if (k != "sgd" && k != "adam") throw ConfigError("config: unknown optimizer " + k);
        c.optimizer.kind = k == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
      }
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    if (auto it = j.find("seeds"); it != j.end()) {
      known(*it, {"init", "data", "adversarial"}, "seeds.");
      c.seeds.init = it->value("init", c.seeds.init);
      c.seeds.data = it->value("data", c.seeds.data);
      c.seeds.adversarial = it->value("adversarial", c.seeds.adversarial);
    }
    if (auto it = j.find("data"); it != j.end()) {
      const auto& d = *it;
      known(d, {"source", "train_size", "dev_size", "noise", "corpus_seed", "split_seed", "subsample_count",
                "subsample_fraction", "max_len", "train_path", "dev_path", "dev_fraction", "delimiter", "has_header",
                "text_column", "label_column", "label_names", "num_classes", "lowercase"},
            "data.");
      if (d.contains("source")) c.data.source = parse_source(d.at("source").get<std::string>());
      c.data.train_size = d.value("train_size", c.data.train_size);
      c.data.dev_size = d.value("dev_size", c.data.dev_size);
      c.data.noise = d.value("noise", c.data.noise);
      c.data.corpus_seed = d.value("corpus_seed", c.data.corpus_seed);
      c.data.split_seed = d.value("split_seed", c.data.split_seed);
      if (d.contains("subsample_count")) c.data.subsample_count = d.at("subsample_count").get<std::size_t>();
      if (d.contains("subsample_fraction")) c.data.subsample_fraction = d.at("subsample_fraction").get<double>();
      c.data.max_len = d.value("max_len", c.data.max_len);
      c.data.train_path = d.value("train_path", c.data.train_path);
      c.data.dev_path = d.value("dev_path", c.data.dev_path);
      c.data.dev_fraction = d.value("dev_fraction", c.data.dev_fraction);
      if (d.contains("delimiter")) {
        auto s = d.at("delimiter").get<std::string>();
        if (s == "\\t" || s == "tab") s = "\t";
        if (s.size() != 1) throw ConfigError("config: delimiter must be one character");
        c.data.format.delimiter = s[0];
      }
      c.data.format.has_header = d.value("has_header", c.data.format.has_header);
      c.data.format.text_column = d.value("text_column", c.data.format.text_column);
      c.data.format.label_column = d.value("label_column", c.data.format.label_column);
      c.data.format.label_names = d.value("label_names", c.data.format.label_names);
      c.data.format.num_classes = d.value("num_classes", c.data.format.num_classes);
      c.data.lowercase = d.value("lowercase", c.data.lowercase);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.task_name = j.value("task_name", c.task_name);
    c.init_embedding_from_vocab = j.value("init_embedding_from_vocab", c.init_embedding_from_vocab);
    c.save_vocab_path = j.value("save_vocab_path", c.save_vocab_path);
    if (auto it = j.find("emit"); it != j.end()) {
      known(*it, {"wall_time", "save_vocab"}, "emit.");
      c.emit.wall_time = it->value("wall_time", c.emit.wall_time);
      c.emit.save_vocab = it->value("save_vocab", c.emit.save_vocab);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  TrainConfig c;
  apply_json(c, j);
  return c;
}

/// Output root when none is configured: $TAVAT_OUT_DIR, else "runs".
inline std::string default_output_root() {
  const char* env = std::getenv("TAVAT_OUT_DIR");
  return env && *env ? std::string(env) : std::string("runs");
}

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  Tokenizer tokenizer;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::size_t num_classes = 2;
  bool tagging = false;
  std::map<int, std::size_t> train_label_counts;
};

namespace detail {

/// Seeded split of a pool into (rest, held-out) by a permutation.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_pool(std::vector<T> pool, std::size_t held_out, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  std::vector<T> dev(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(held_out));
  std::vector<T> rest(pool.begin() + static_cast<std::ptrdiff_t>(held_out), pool.end());
  return {std::move(rest), std::move(dev)};
}

}  // namespace detail

inline PreparedData prepare_data(const DatasetSpec& spec) {
  PreparedData out;
  std::vector<TextExample> train_raw, dev_raw;
  switch (spec.source) {
    case DataSource::synthetic_classification: {
      SyntheticClassification gen;
      out.tokenizer = Tokenizer::from_tokens(gen.token_inventory(), spec.lowercase);
      out.num_classes = gen.num_classes;
      auto pool = gen.generate(spec.train_size + spec.dev_size, spec.corpus_seed, spec.noise);
      std::tie(train_raw, dev_raw) = detail::split_pool(std::move(pool), spec.dev_size, spec.split_seed);
      break;
    }
    case DataSource::synthetic_tagging: {
      SyntheticTagging gen;
      out.tokenizer = Tokenizer::from_tokens(gen.token_inventory(), spec.lowercase);
      out.num_classes = gen.num_tags();
      out.tagging = true;
      auto pool = gen.generate(spec.train_size + spec.dev_size, spec.corpus_seed);
      std::tie(train_raw, dev_raw) = detail::split_pool(std::move(pool), spec.dev_size, spec.split_seed);
      break;
    }
    case DataSource::delimited: {
      out.num_classes = spec.format.label_names.empty() ? spec.format.num_classes : spec.format.label_names.size();
      auto rows = read_delimited(spec.train_path, spec.format);
      if (spec.dev_path.empty()) {
        const auto held = static_cast<std::size_t>(std::llround(spec.dev_fraction * static_cast<double>(rows.size())));
        if (held == 0 || held >= rows.size()) throw ConfigError("delimited data: too few rows to hold out a dev split");
        std::tie(train_raw, dev_raw) = detail::split_pool(std::move(rows), held, spec.split_seed);
      } else {
        train_raw = std::move(rows);
        dev_raw = read_delimited(spec.dev_path, spec.format);
      }
      std::vector<std::string> texts;
      for (const auto& r : train_raw) texts.push_back(r.text);
      out.tokenizer = Tokenizer::from_corpus(texts, spec.lowercase);
      break;
    }
  }
  out.train = tokenize_examples(train_raw, out.tokenizer, spec.max_len);
  out.dev = tokenize_examples(dev_raw, out.tokenizer, spec.max_len);
  const std::uint64_t sub_seed = derive_seed(spec.split_seed, 1);
  SubsampleResult sub;
  if (spec.subsample_count) {
    sub = subsample(out.train, *spec.subsample_count, sub_seed);
  } else if (spec.subsample_fraction) {
    sub = subsample_fraction(out.train, *spec.subsample_fraction, sub_seed);
  } else {
    sub = subsample(out.train, out.train.size(), sub_seed);
  }
  out.train = std::move(sub.examples);
  out.train_label_counts = std::move(sub.label_counts);
  if (out.train.empty() || out.dev.empty()) throw ConfigError("dataset: empty train or dev split");
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline EvalRecord evaluate(const Model& model, const std::vector<Example>& examples, std::size_t batch_size) {
  EvalRecord r;
  r.tagging = model.config().head == HeadKind::token;
  r.count = examples.size();
  std::vector<int> pred_labels, gold_labels;
  std::vector<std::vector<int>> pred_tags, gold_tags;
  double loss_sum = 0.0;
  std::size_t loss_rows = 0;
  for (const auto& b : make_batches(examples, batch_size, 0, false)) {
    for (auto id : b.token_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= model.config().vocab_size) {
        throw ShapeError("evaluate: token id " + std::to_string(id) + " outside the model's vocabulary");
      }
    }
    Tensor logits = model.forward(b);
    if (logits.shape().back() != model.config().num_classes) throw ShapeError("evaluate: class count mismatch");
    const auto pred = Model::predict(logits);
    std::size_t rows = 0;
    if (r.tagging) {
      if (!b.is_tagging()) throw ShapeError("evaluate: token-level model needs tagged data");
      for (std::size_t e = 0; e < b.size; ++e) {
        std::vector<int> p, g;
        for (std::size_t j = 0; j < b.length; ++j) {
          const auto i = e * b.length + j;
          if (b.tags[i] == kIgnoreLabel) continue;
          p.push_back(pred[i]);
          g.push_back(b.tags[i]);
        }
        rows += g.size();
        pred_tags.push_back(std::move(p));
        gold_tags.push_back(std::move(g));
      }
    } else {
      if (b.is_tagging()) throw ShapeError("evaluate: sequence-level model given tagged data");
      for (int l : b.labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= model.config().num_classes) {
          throw ShapeError("evaluate: label " + std::to_string(l) + " outside the model's classes");
        }
      }
      pred_labels.insert(pred_labels.end(), pred.begin(), pred.end());
      gold_labels.insert(gold_labels.end(), b.labels.begin(), b.labels.end());
      rows = b.size;
    }
    if (rows) {
      loss_sum += model.loss(logits, b).item() * static_cast<double>(rows);
      loss_rows += rows;
    }
  }
  r.loss = loss_rows ? loss_sum / static_cast<double>(loss_rows) : 0.0;
  if (r.tagging) {
    r.spans = span_f1(pred_tags, gold_tags);
  } else {
    r.accuracy = accuracy(pred_labels, gold_labels);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Model model;
  std::optional<PerturbationVocabulary> vocabulary;
  Tokenizer tokenizer;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  MetricsSummary summary;
  StepCounters counters;
  EvalRecord final_dev;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string vocabulary_path;
};

namespace detail {

inline bool all_finite(const std::vector<NamedTensor>& params) {
  for (const auto& p : params)
    for (double v : p.value.data())
      if (!std::isfinite(v)) return false;
  return true;
}

inline std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

inline void restore(std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(snap[i].begin(), snap[i].end(), params[i].value.data().begin());
}

}  // namespace detail

/// Fits the data-dependent parts of the model config.
inline ModelConfig model_config_for(const TrainConfig& cfg, const PreparedData& data) {
  ModelConfig m = cfg.model;
  m.vocab_size = data.tokenizer.size();
  m.num_classes = data.num_classes;
  m.head = data.tagging ? HeadKind::token : HeadKind::sequence;
  return m;
}

inline SpecialTokenPolicy resolve_special_tokens(const TrainConfig& cfg, const Tokenizer& tok) {
  SpecialTokenPolicy p;
  p.kind = cfg.special_policy;
  for (const auto& name : cfg.special_token_names) {
    const auto id = tok.id(name);
    if (id == Tokenizer::unk_id && name != "[UNK]") throw ConfigError("special token policy: unknown token " + name);
    p.ids.insert(id);
  }
  return p;
}

inline TrainResult train(const TrainConfig& cfg, const PreparedData& data) {
  cfg.validate();
  AdvConfig adv = cfg.resolved_adv();
  adv.special_tokens = resolve_special_tokens(cfg, data.tokenizer);
  const ModelConfig mcfg = model_config_for(cfg, data);
  mcfg.validate();

  TrainResult result{Model(mcfg, cfg.seeds.init), std::nullopt, data.tokenizer, {}, {}, {}, {}, {}, {}, {}, {}};
  Model& model = result.model;

  if (!cfg.init_embedding_from_vocab.empty()) {
    auto v = load_vocabulary(cfg.init_embedding_from_vocab,
                             {mcfg.vocab_size, mcfg.dim, data.tokenizer.fingerprint()});
    Tensor& table = model.param("embedding.tokens");
    Tensor combined = apply_to_embedding(table, v);
    std::copy(combined.data().begin(), combined.data().end(), table.data().begin());
  }

  const bool keep_vocab = adv.token_channel() && adv.use_vocab;
  if (keep_vocab) {
    Rng vrng(derive_seed(cfg.seeds.adversarial, 1));
    auto v = init_vocabulary(mcfg.vocab_size, mcfg.dim, adv.sigma, vrng);
    v.meta().epsilon = adv.eta_epsilon();
    v.meta().source_task = cfg.task_name;
    v.meta().tokenizer_fingerprint = data.tokenizer.fingerprint();
    v.meta().seeds = cfg.seeds;
    result.vocabulary = std::move(v);
  }

  namespace fs = std::filesystem;
  const bool write = !cfg.output_dir.empty();
  std::ostringstream sink;
  std::unique_ptr<MetricsWriter> metrics;
  if (write) {
    fs::create_directories(cfg.output_dir);
    const fs::path dir(cfg.output_dir);
    std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << '\n';
    data.tokenizer.save((dir / "tokenizer.txt").string());
    result.checkpoint_path = (dir / "checkpoint.tavm").string();
    result.metrics_path = (dir / "metrics.jsonl").string();
    metrics = std::make_unique<MetricsWriter>(result.metrics_path);
  } else {
    metrics = std::make_unique<MetricsWriter>(sink);
  }

  auto optimizer = make_optimizer(cfg.optimizer);
  Rng adv_rng(cfg.seeds.adversarial);
  Rng dropout_rng(derive_seed(cfg.seeds.data, 2));
  StepOptions options;
  if (mcfg.dropout > 0.0) options.dropout_rng = &dropout_rng;

  auto evaluate_dev = [&](int epoch, std::size_t batches) {
    EvalRecord r = evaluate(model, data.dev, cfg.eval_batch_size);
    r.epoch = epoch;
    r.batch = batches;
    metrics->write(r);
    result.final_dev = r;
  };

  if (cfg.epochs == 0) evaluate_dev(0, 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = make_batches(data.train, cfg.batch_size, derive_seed(cfg.seeds.data, static_cast<std::uint64_t>(epoch)), true);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto started = std::chrono::steady_clock::now();
      auto snap = detail::snapshot(model.params());
      StepReport rep;
      std::string failure;
      try {
        rep = tavat_batch_step(model, batches[bi], result.vocabulary ? &*result.vocabulary : nullptr, adv, *optimizer,
                               adv_rng, options);
        if (!detail::all_finite(model.params())) failure = "non-finite parameters after the optimizer step";
      } catch (const NonFiniteError& e) {
        failure = e.what();
      }
      if (!failure.empty()) {
        detail::restore(model.params(), snap);
        model.zero_grad();
        const std::string where = "epoch " + std::to_string(epoch) + " batch " + std::to_string(bi);
        metrics->note({{"type", "abort"}, {"epoch", epoch}, {"batch", bi}, {"reason", failure}});
        result.summary = metrics->finish();
        if (write) save_checkpoint(model, cfg.seeds, result.checkpoint_path);
        throw TrainingAborted("training aborted at " + where + ": " + failure +
                              (write ? "; last good checkpoint written to " + result.checkpoint_path : std::string()));
      }
      result.counters += rep.counters;
      StepRecord rec;
      rec.epoch = epoch;
      rec.batch = bi;
      rec.inner_losses = rep.inner_losses;
      rec.update_loss = adv.mode == AdvMode::pgd ? rep.update_loss : rep.inner_losses.back();
      rec.delta_norm = summarize_norms(rep.final_delta_norms);
      rec.eta_norm = summarize_norms(rep.final_eta_norms);
      if (cfg.emit.wall_time) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
      }
      metrics->write(rec);
    }
    evaluate_dev(epoch, batches.size());
  }

  result.summary = metrics->finish();
  result.steps = metrics->steps();
  result.evals = metrics->evals();
  if (write) {
    save_checkpoint(model, cfg.seeds, result.checkpoint_path);
    if (result.vocabulary && cfg.emit.save_vocab) {
      result.vocabulary_path = cfg.save_vocab_path.empty() ? (fs::path(cfg.output_dir) / "vocabulary.tavv").string()
                                                           : cfg.save_vocab_path;
      save_vocabulary(*result.vocabulary, result.vocabulary_path);
    }
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  return train(cfg, prepare_data(cfg.data));
}

// ---------------------------------------------------------------------------
// Toggle grids

struct AblationRow {
  std::string name;
  bool use_vocab = true;
  bool use_token_norm = true;
  /// Overrides the base special-token policy when set.
  std::optional<SpecialTokenPolicy::Kind> special_policy;
  std::vector<std::string> special_tokens;
};

/// Perturbation vocabulary x token normalization, all four combinations.
inline std::vector<AblationRow> token_toggle_grid() {
  return {{"ptb_vocab+tok_norm", true, true, {}, {}},
          {"tok_norm", false, true, {}, {}},
          {"ptb_vocab", true, false, {}, {}},
          {"none", false, false, {}, {}}};
}

/// Which token classes may write into the perturbation vocabulary.
inline std::vector<AblationRow> special_token_grid() {
  const std::vector<std::string> specials{"[CLS]", "[SEP]", "[UNK]"};
  using K = SpecialTokenPolicy::Kind;
  return {{"special+normal", true, true, K::exclude, {}},
          {"normal_only", true, true, K::exclude, specials},
          {"special_only", true, true, K::include, specials}};
}

struct AblationResultRow {
  AblationRow row;
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;
};

struct AblationTable {
  std::string metric;
  std::vector<SeedSet> seeds;
  std::vector<AblationResultRow> rows;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Seed set for replicate r: every role seed shifted by r.
inline SeedSet replicate_seeds(const SeedSet& base, std::size_t r) {
  return {base.init + r, base.data + r, base.adversarial + r};
}

/// One run per (row, replicate) with mode=tavat and the row's toggles. All
/// rows of a replicate share seeds and data.
inline AblationTable run_ablation(const TrainConfig& base, const std::vector<AblationRow>& rows, std::size_t replicates) {
  if (rows.empty()) throw ConfigError("ablation: no toggle rows requested");
  if (replicates == 0) throw ConfigError("ablation: replicates must be >= 1");
  const auto data = prepare_data(base.data);
  AblationTable table;
  table.metric = data.tagging ? "span_f1" : "accuracy";
  for (std::size_t r = 0; r < replicates; ++r) table.seeds.push_back(replicate_seeds(base.seeds, r));
  for (const auto& row : rows) {
    AblationResultRow out{row, {}, 0.0, 0.0};
    for (std::size_t r = 0; r < replicates; ++r) {
      TrainConfig c = base;
      c.adv.mode = AdvMode::tavat;
      c.adv.use_vocab = row.use_vocab;
      c.adv.use_token_norm = row.use_token_norm;
      if (row.special_policy) {
        c.special_policy = *row.special_policy;
        c.special_token_names = row.special_tokens;
      }
      c.seeds = table.seeds[r];
      if (!base.output_dir.empty()) {
        c.output_dir = (std::filesystem::path(base.output_dir) / row.name / ("seed" + std::to_string(r))).string();
      }
      out.per_seed.push_back(train(c, data).final_dev.primary());
    }
    std::tie(out.mean, out.stddev) = mean_std(out.per_seed);
    table.rows.push_back(std::move(out));
  }
  return table;
}

inline nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json toggles = {{"ptb_vocab", r.row.use_vocab}, {"tok_norm", r.row.use_token_norm}};
    if (r.row.special_policy) {
      toggles["special_policy"] = *r.row.special_policy == SpecialTokenPolicy::Kind::include ? "include" : "exclude";
      toggles["special_tokens"] = r.row.special_tokens;
    }
    rows.push_back({{"name", r.row.name}, {"toggles", toggles}, {"per_seed", r.per_seed}, {"mean", r.mean},
                    {"std", r.stddev}});
  }
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : t.seeds) seeds.push_back({{"init", s.init}, {"data", s.data}, {"adversarial", s.adversarial}});
  return {{"metric", t.metric}, {"seeds", seeds}, {"rows", rows}};
}

/// Fixed-width text rendering: name, mean, std, then per-seed values.
inline std::string format_table(const AblationTable& t) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "row                     mean     std      per-seed " << t.metric << '\n';
  for (const auto& r : t.rows) {
    std::string name = r.row.name;
    name.resize(std::max<std::size_t>(name.size(), 22), ' ');
    os << name << "  " << r.mean << "  " << r.stddev << " ";
    for (double v : r.per_seed) os << ' ' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace tavat
