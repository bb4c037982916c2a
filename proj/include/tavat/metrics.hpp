// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics and the line-delimited metrics stream.
//
// Stream schema (one JSON object per line, `schema` = kMetricsSchema):
//   {"type":"step", "epoch", "batch", "inner_losses":[K], "update_loss",
//    "delta_norm":{"mean","max"}, "eta_norm":{"mean","max"}, ["wall_ms"]}
//   {"type":"eval", "epoch", "batch", "split", "count", "loss",
//    "accuracy" | "precision","recall","f1"}
//   {"type":"summary", "steps", "evals", "final", "best", "mean_last_inner_loss"}
// `batch` on eval records is the number of batches seen in that epoch.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace tavat {

inline constexpr int kMetricsSchema = 1;

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (gold.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

/// Entity span [start, end) with its type index.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  int type = 0;
  auto operator<=>(const Span&) const = default;
};

/// Spans from BIO tag ids (0 = O, 2t+1 = B-t, 2t+2 = I-t). An I tag that
/// does not continue a span of its type opens a new one.
inline std::vector<Span> extract_spans(const std::vector<int>& tags) {
  std::vector<Span> spans;
  std::optional<Span> open;
  auto close = [&](std::size_t at) {
    if (open) {
      open->end = at;
      spans.push_back(*open);
      open.reset();
    }
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const int t = tags[i];
    if (t <= 0) {
      close(i);
      continue;
    }
    const int type = (t - 1) / 2;
    const bool begin = (t % 2) == 1;
    if (begin || !open || open->type != type) {
      close(i);
      open = Span{i, i, type};
    }
  }
  close(tags.size());
  return spans;
}

struct SpanScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t gold = 0;
  std::size_t predicted = 0;
  std::size_t correct = 0;
};

inline SpanScores score_counts(std::size_t gold, std::size_t predicted, std::size_t correct) {
  SpanScores s{0.0, 0.0, 0.0, gold, predicted, correct};
  if (gold == 0 && predicted == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  if (predicted) s.precision = static_cast<double>(correct) / static_cast<double>(predicted);
  if (gold) s.recall = static_cast<double>(correct) / static_cast<double>(gold);
  if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

/// Exact-match span scores over a set of sentences.
inline SpanScores span_f1(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& gold) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("span_f1: sentence count mismatch");
  std::size_t n_gold = 0, n_pred = 0, n_correct = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (predicted[s].size() != gold[s].size()) throw std::invalid_argument("span_f1: sentence length mismatch");
    auto g = extract_spans(gold[s]);
    auto p = extract_spans(predicted[s]);
    std::set<Span> gs(g.begin(), g.end());
    n_gold += g.size();
    n_pred += p.size();
    for (const auto& sp : p) n_correct += gs.count(sp);
  }
  return score_counts(n_gold, n_pred, n_correct);
}

// ---------------------------------------------------------------------------
// Records

struct NormSummary {
  double mean = 0.0;
  double max = 0.0;
  bool operator==(const NormSummary&) const = default;
};

inline NormSummary summarize_norms(const std::vector<double>& v) {
  NormSummary s;
  for (double x : v) {
    s.mean += x;
    s.max = std::max(s.max, x);
  }
  if (!v.empty()) s.mean /= static_cast<double>(v.size());
  return s;
}

struct StepRecord {
  int epoch = 0;
  std::size_t batch = 0;
  std::vector<double> inner_losses;
  double update_loss = 0.0;
  NormSummary delta_norm;
  NormSummary eta_norm;
  std::optional<double> wall_ms;
  bool operator==(const StepRecord&) const = default;
};

struct EvalRecord {
  int epoch = 0;
  std::size_t batch = 0;
  std::string split = "dev";
  std::size_t count = 0;
  double loss = 0.0;
  bool tagging = false;
  double accuracy = 0.0;
  SpanScores spans;

  /// Accuracy for classification, span F1 for tagging.
  double primary() const { return tagging ? spans.f1 : accuracy; }
};

struct MetricsSummary {
  std::size_t steps = 0;
  std::size_t evals = 0;
  double final_metric = 0.0;
  double best_metric = 0.0;
  double mean_last_inner_loss = 0.0;
  bool operator==(const MetricsSummary&) const = default;
};

/// Summary over the records of one run; `final`/`best` use the primary
/// metric of the dev evaluations.
inline MetricsSummary summarize(const std::vector<StepRecord>& steps, const std::vector<EvalRecord>& evals) {
  MetricsSummary s;
  s.steps = steps.size();
  s.evals = evals.size();
  bool first = true;
  for (const auto& e : evals) {
    if (e.split != "dev") continue;
    s.final_metric = e.primary();
    s.best_metric = first ? e.primary() : std::max(s.best_metric, e.primary());
    first = false;
  }
  for (const auto& r : steps)
    if (!r.inner_losses.empty()) s.mean_last_inner_loss += r.inner_losses.back();
  if (!steps.empty()) s.mean_last_inner_loss /= static_cast<double>(steps.size());
  return s;
}

inline nlohmann::json to_json(const NormSummary& n) { return {{"mean", n.mean}, {"max", n.max}}; }

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j = {{"schema", kMetricsSchema}, {"type", "step"},         {"epoch", r.epoch},
                      {"batch", r.batch},         {"inner_losses", r.inner_losses}, {"update_loss", r.update_loss},
                      {"delta_norm", to_json(r.delta_norm)}, {"eta_norm", to_json(r.eta_norm)}};
  if (r.wall_ms) j["wall_ms"] = *r.wall_ms;
  return j;
}

inline nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json j = {{"schema", kMetricsSchema}, {"type", "eval"}, {"epoch", r.epoch}, {"batch", r.batch},
                      {"split", r.split},         {"count", r.count}, {"loss", r.loss}};
  if (r.tagging) {
    j["precision"] = r.spans.precision;
    j["recall"] = r.spans.recall;
    j["f1"] = r.spans.f1;
    j["gold_spans"] = r.spans.gold;
    j["predicted_spans"] = r.spans.predicted;
    j["correct_spans"] = r.spans.correct;
  } else {
    j["accuracy"] = r.accuracy;
  }
  return j;
}

inline nlohmann::json to_json(const MetricsSummary& s) {
  return {{"schema", kMetricsSchema}, {"type", "summary"},        {"steps", s.steps},
          {"evals", s.evals},         {"final", s.final_metric}, {"best", s.best_metric},
          {"mean_last_inner_loss", s.mean_last_inner_loss}};
}

/// Append-only JSONL writer. Every record is flushed; a failed write throws
/// and leaves the lines already written intact.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& os) : os_(&os) {}
  explicit MetricsWriter(const std::string& path) : file_(path, std::ios::trunc), os_(&file_) {
    if (!file_) throw std::runtime_error("cannot open metrics stream: " + path);
  }
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void write(const StepRecord& r) {
    if (!steps_.empty() && std::tie(r.epoch, r.batch) <= std::tie(steps_.back().epoch, steps_.back().batch)) {
      throw std::logic_error("metrics: step records must be in increasing (epoch, batch) order");
    }
    emit(to_json(r));
    steps_.push_back(r);
  }
  void write(const EvalRecord& r) {
    emit(to_json(r));
    evals_.push_back(r);
  }
  MetricsSummary finish() {
    auto s = summarize(steps_, evals_);
    emit(to_json(s));
    return s;
  }
  /// Free-form record (e.g. an abort notice); carries the schema tag.
  void note(nlohmann::json j) {
    j["schema"] = kMetricsSchema;
    emit(j);
  }

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<EvalRecord>& evals() const { return evals_; }

 private:
  void emit(const nlohmann::json& j) {
    *os_ << j.dump() << '\n';
    os_->flush();
    if (!*os_) throw std::runtime_error("metrics: write failed");
  }

  std::ofstream file_;
  std::ostream* os_;
  std::vector<StepRecord> steps_;
  std::vector<EvalRecord> evals_;
};

struct ParsedMetrics {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::optional<MetricsSummary> summary;
  std::vector<nlohmann::json> notes;
};

inline ParsedMetrics parse_metrics(std::istream& is) {
  ParsedMetrics out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("metrics line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.value("schema", -1) != kMetricsSchema) {
      throw std::runtime_error("metrics line " + std::to_string(line_no) + ": unsupported schema");
    }
    const auto type = j.at("type").get<std::string>();
    if (type == "step") {
      StepRecord r;
      r.epoch = j.at("epoch");
      r.batch = j.at("batch");
      r.inner_losses = j.at("inner_losses").get<std::vector<double>>();
      r.update_loss = j.at("update_loss");
      r.delta_norm = {j.at("delta_norm").at("mean"), j.at("delta_norm").at("max")};
      r.eta_norm = {j.at("eta_norm").at("mean"), j.at("eta_norm").at("max")};
      if (j.contains("wall_ms")) r.wall_ms = j.at("wall_ms").get<double>();
      out.steps.push_back(std::move(r));
    } else if (type == "eval") {
      EvalRecord r;
      r.epoch = j.at("epoch");
      r.batch = j.at("batch");
      r.split = j.at("split");
      r.count = j.at("count");
      r.loss = j.at("loss");
      r.tagging = j.contains("f1");
      if (r.tagging) {
        r.spans = {j.at("precision"), j.at("recall"), j.at("f1"), j.at("gold_spans"), j.at("predicted_spans"),
                   j.at("correct_spans")};
      } else {
        r.accuracy = j.at("accuracy");
      }
      out.evals.push_back(std::move(r));
    } else if (type == "summary") {
      out.summary = MetricsSummary{j.at("steps"), j.at("evals"), j.at("final"), j.at("best"),
                                   j.at("mean_last_inner_loss")};
    } else {
      out.notes.push_back(std::move(j));
    }
  }
  return out;
}

}  // namespace tavat
