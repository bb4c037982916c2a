// SPDX-License-Identifier: Apache-2.0
//
// tavat: train, evaluate, ablate, export-vocab.
//
// Settings come from built-in defaults, then --config (JSON), then flags.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tavat/trainer.hpp"

namespace fs = std::filesystem;
using namespace tavat;

namespace {

/// Flags that mirror TrainConfig fields. Only flags the user actually gave
/// are applied, so a config file value is kept unless overridden.
struct TrainFlags {
  std::string config;
  std::string mode;
  double epsilon = 0, sigma = 0, alpha = 0, token_epsilon = 0, lr = 0, weight_decay = 0, noise = 0, dropout = 0;
  double subsample_fraction = 0;
  int steps = 0, epochs = 0;
  bool use_vocab = true, use_token_norm = true, use_instance_delta = true, wall_time = false;
  std::size_t batch_size = 0, dim = 0, layers = 0, heads = 0, ffn = 0, max_len = 0;
  std::size_t train_size = 0, dev_size = 0, subsample_count = 0;
  std::uint64_t seed_init = 0, seed_data = 0, seed_adv = 0, corpus_seed = 0;
  std::string optimizer, source, train_path, dev_path, out, task, save_vocab, init_from_vocab, encoder;
  std::string special_policy;
  std::vector<std::string> special_tokens;

  CLI::App* app = nullptr;

  void add(CLI::App& a) {
    app = &a;
    a.add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
    a.add_option("--mode", mode, "none | pgd | freelb | tavat");
    a.add_option("--epsilon", epsilon, "perturbation radius");
    a.add_option("--sigma", sigma, "initial perturbation scale (default 1e-2*sqrt(D))");
    a.add_option("--alpha", alpha, "ascent step size (default 0.3*epsilon)");
    a.add_option("--token-epsilon", token_epsilon, "separate radius for token-level perturbations");
    a.add_option("--steps", steps, "inner ascent steps K");
    a.add_option("--use-vocab", use_vocab, "initialize token perturbations from the perturbation vocabulary");
    a.add_option("--use-token-norm", use_token_norm, "token-level normalization");
    a.add_option("--use-instance-delta", use_instance_delta, "keep the instance-level perturbation in tavat mode");
    a.add_option("--special-policy", special_policy, "include | exclude")->check(CLI::IsMember({"include", "exclude"}));
    a.add_option("--special-tokens", special_tokens, "tokens the special policy lists");
    a.add_option("--optimizer", optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
    a.add_option("--lr", lr, "learning rate");
    a.add_option("--weight-decay", weight_decay, "weight decay");
    a.add_option("--epochs", epochs, "epochs (0 evaluates the initial model)");
    a.add_option("--batch-size", batch_size, "training batch size");
    a.add_option("--dim", dim, "model width D");
    a.add_option("--layers", layers, "encoder blocks");
    a.add_option("--heads", heads, "attention heads");
    a.add_option("--ffn", ffn, "feed-forward width");
    a.add_option("--encoder", encoder, "transformer | mean-pool-mlp")
        ->check(CLI::IsMember({"transformer", "mean-pool-mlp"}));
    a.add_option("--dropout", dropout, "dropout probability");
    a.add_option("--max-len", max_len, "maximum sequence length including [CLS]/[SEP]");
    a.add_option("--seed-init", seed_init, "parameter init seed");
    a.add_option("--seed-data", seed_data, "shuffle seed");
    a.add_option("--seed-adv", seed_adv, "adversarial seed");
    a.add_option("--source", source, "synthetic-classification | synthetic-tagging | delimited");
    a.add_option("--train-size", train_size, "synthetic training pool size");
    a.add_option("--dev-size", dev_size, "synthetic dev size");
    a.add_option("--noise", noise, "synthetic label noise");
    a.add_option("--corpus-seed", corpus_seed, "synthetic corpus seed");
    a.add_option("--subsample", subsample_count, "keep this many training examples");
    a.add_option("--subsample-fraction", subsample_fraction, "keep this fraction of training examples");
    a.add_option("--train-path", train_path, "delimited training file");
    a.add_option("--dev-path", dev_path, "delimited dev file");
    a.add_option("--out", out, "output directory (default $TAVAT_OUT_DIR/<task>-<mode>)");
    a.add_option("--task", task, "task name recorded in artifacts");
    a.add_option("--save-ptb-vocab", save_vocab, "where to write the perturbation vocabulary");
    a.add_option("--init-embedding-from-vocab", init_from_vocab, "add a saved perturbation vocabulary to the embeddings");
    a.add_flag("--wall-time", wall_time, "record wall time per step (breaks bitwise-equal metrics)");
  }

  bool given(const char* name) const { return app->count(name) > 0; }

  TrainConfig build() const {
    TrainConfig c = config.empty() ? TrainConfig{} : load_config(config);
    if (given("--mode")) {
      const auto fresh = AdvConfig::for_mode(parse_mode(mode));
      c.adv.mode = fresh.mode;
      c.adv.use_vocab = fresh.use_vocab;
      c.adv.use_token_norm = fresh.use_token_norm;
    }
    if (given("--epsilon")) c.adv.epsilon = epsilon;
    if (given("--sigma")) c.sigma = sigma;
    if (given("--alpha")) c.alpha = alpha;
    if (given("--token-epsilon")) c.adv.token_epsilon = token_epsilon;
    if (given("--steps")) c.adv.steps = steps;
    if (given("--use-vocab")) c.adv.use_vocab = use_vocab;
    if (given("--use-token-norm")) c.adv.use_token_norm = use_token_norm;
    if (given("--use-instance-delta")) c.adv.use_instance_delta = use_instance_delta;
    if (given("--special-policy")) {
      c.special_policy = special_policy == "include" ? SpecialTokenPolicy::Kind::include : SpecialTokenPolicy::Kind::exclude;
    }
    if (given("--special-tokens")) c.special_token_names = special_tokens;
    if (given("--optimizer")) c.optimizer.kind = optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    if (given("--lr")) c.optimizer.learning_rate = lr;
    if (given("--weight-decay")) c.optimizer.weight_decay = weight_decay;
    if (given("--epochs")) c.epochs = epochs;
    if (given("--batch-size")) c.batch_size = batch_size;
    if (given("--dim")) c.model.dim = dim;
    if (given("--layers")) c.model.layers = layers;
    if (given("--heads")) c.model.heads = heads;
    if (given("--ffn")) c.model.ffn_hidden = ffn;
    if (given("--encoder")) c.model.encoder = encoder == "transformer" ? EncoderKind::transformer : EncoderKind::mean_pool_mlp;
    if (given("--dropout")) c.model.dropout = dropout;
    if (given("--max-len")) c.data.max_len = max_len;
    if (given("--seed-init")) c.seeds.init = seed_init;
    if (given("--seed-data")) c.seeds.data = seed_data;
    if (given("--seed-adv")) c.seeds.adversarial = seed_adv;
    if (given("--source")) c.data.source = parse_source(source);
    if (given("--train-size")) c.data.train_size = train_size;
    if (given("--dev-size")) c.data.dev_size = dev_size;
    if (given("--noise")) c.data.noise = noise;
    if (given("--corpus-seed")) c.data.corpus_seed = corpus_seed;
    if (given("--subsample")) c.data.subsample_count = subsample_count;
    if (given("--subsample-fraction")) c.data.subsample_fraction = subsample_fraction;
    if (given("--train-path")) c.data.train_path = train_path;
    if (given("--dev-path")) c.data.dev_path = dev_path;
    if (given("--task")) c.task_name = task;
    if (given("--save-ptb-vocab")) c.save_vocab_path = save_vocab;
    if (given("--init-embedding-from-vocab")) c.init_embedding_from_vocab = init_from_vocab;
    if (wall_time) c.emit.wall_time = true;
    if (given("--out")) {
      c.output_dir = out;
    } else if (c.output_dir.empty()) {
      c.output_dir = (fs::path(default_output_root()) / (c.task_name + "-" + to_string(c.adv.mode))).string();
    }
    return c;
  }
};

nlohmann::json eval_json(const EvalRecord& r) {
  nlohmann::json j = to_json(r);
  j.erase("schema");
  j.erase("type");
  j.erase("epoch");
  j.erase("batch");
  return j;
}

int cmd_train(const TrainFlags& f) {
  const TrainConfig cfg = f.build();
  const auto result = train(cfg);
  std::cout << "mode " << to_string(cfg.adv.mode) << ", " << result.steps.size() << " steps\n"
            << "dev " << eval_json(result.final_dev).dump() << '\n'
            << "checkpoint " << result.checkpoint_path << '\n'
            << "metrics " << result.metrics_path << '\n';
  if (!result.vocabulary_path.empty()) std::cout << "vocabulary " << result.vocabulary_path << '\n';
  return 0;
}

int cmd_evaluate(const std::string& run_dir, std::string checkpoint, std::string tokenizer, std::string config,
                 const std::string& split) {
  if (!run_dir.empty()) {
    const fs::path d(run_dir);
    if (checkpoint.empty()) checkpoint = (d / "checkpoint.tavm").string();
    if (tokenizer.empty()) tokenizer = (d / "tokenizer.txt").string();
    if (config.empty()) config = (d / "config.json").string();
  }
  if (checkpoint.empty() || config.empty()) throw ConfigError("evaluate: give --run or --checkpoint and --config");
  const TrainConfig cfg = load_config(config);
  auto data = prepare_data(cfg.data);
  if (!tokenizer.empty()) {
    const auto saved = Tokenizer::load(tokenizer);
    if (saved.fingerprint() != data.tokenizer.fingerprint()) {
      throw ConfigError("evaluate: saved tokenizer does not match the one rebuilt from the dataset config");
    }
  }
  const auto loaded = load_checkpoint(checkpoint);
  const auto& mc = loaded.model.config();
  if (mc.vocab_size != data.tokenizer.size() || mc.num_classes != data.num_classes ||
      (mc.head == HeadKind::token) != data.tagging) {
    throw ShapeError("evaluate: checkpoint (vocab " + std::to_string(mc.vocab_size) + ", classes " +
                     std::to_string(mc.num_classes) + ") does not fit the dataset (vocab " +
                     std::to_string(data.tokenizer.size()) + ", classes " + std::to_string(data.num_classes) + ")");
  }
  const auto& examples = split == "train" ? data.train : data.dev;
  std::cout << eval_json(evaluate(loaded.model, examples, cfg.eval_batch_size)).dump() << '\n';
  return 0;
}

int cmd_ablate(const TrainFlags& f, const std::string& grid, std::size_t replicates) {
  TrainConfig cfg = f.build();
  const auto rows = grid == "special" ? special_token_grid() : token_toggle_grid();
  const auto table = run_ablation(cfg, rows, replicates);
  std::cout << format_table(table);
  fs::create_directories(cfg.output_dir);
  const auto path = fs::path(cfg.output_dir) / ("ablation-" + grid + ".json");
  std::ofstream(path) << to_json(table).dump(2) << '\n';
  std::cout << "table " << path.string() << '\n';
  return 0;
}

int cmd_export_vocab(const std::string& vocab_path, const std::string& tokenizer_path, const std::string& out) {
  std::optional<Tokenizer> tok;
  VocabularyExpectation expect;
  if (!tokenizer_path.empty()) {
    tok = Tokenizer::load(tokenizer_path);
    expect = {tok->size(), std::nullopt, tok->fingerprint()};
  }
  const auto v = load_vocabulary(vocab_path, expect);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < v.rows(); ++i) {
    auto r = v.row(i);
    nlohmann::json row = {{"id", i}, {"norm", frobenius_norm(r)}, {"values", std::vector<double>(r.begin(), r.end())}};
    if (tok) row["token"] = tok->token(static_cast<std::int32_t>(i));
    rows.push_back(std::move(row));
  }
  nlohmann::json j = {{"meta", nlohmann::json::parse(vocabulary_meta_json(v.meta()))},
                      {"rows", v.rows()},
                      {"dim", v.dim()},
                      {"table", rows}};
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << j.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-aware virtual adversarial training"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_flags.add(*train_cmd);

  std::string run_dir, checkpoint, tokenizer, eval_config, split = "dev";
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint");
  eval_cmd->add_option("--run", run_dir, "run directory written by train")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--tokenizer", tokenizer, "tokenizer file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", eval_config, "config describing the dataset")->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", split, "dev | train")->check(CLI::IsMember({"dev", "train"}));

  TrainFlags ablate_flags;
  std::string grid = "token";
  std::size_t replicates = 3;
  auto* ablate_cmd = app.add_subcommand("ablate", "train every row of a toggle grid");
  ablate_flags.add(*ablate_cmd);
  ablate_cmd->add_option("--grid", grid, "token (vocab x token norm) | special (special-token policy)")
      ->check(CLI::IsMember({"token", "special"}));
  ablate_cmd->add_option("--replicates", replicates, "seed replicates per row")->check(CLI::PositiveNumber);

  std::string vocab_path, vocab_tokenizer, vocab_out;
  auto* export_cmd = app.add_subcommand("export-vocab", "dump a perturbation vocabulary as JSON");
  export_cmd->add_option("vocabulary", vocab_path, "vocabulary file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--tokenizer", vocab_tokenizer, "tokenizer file for token names")->check(CLI::ExistingFile);
  export_cmd->add_option("--out", vocab_out, "output file (default stdout)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(train_flags);
    if (*eval_cmd) return cmd_evaluate(run_dir, checkpoint, tokenizer, eval_config, split);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, grid, replicates);
    if (*export_cmd) return cmd_export_vocab(vocab_path, vocab_tokenizer, vocab_out);
  } catch (const TrainingAborted& e) {
    std::cerr << "tavat: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "tavat: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
