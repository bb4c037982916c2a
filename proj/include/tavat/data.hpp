// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenization, synthetic task generators, delimited-file
// ingestion, padded batching and seeded subsampling.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tavat/batch.hpp"
#include "tavat/io.hpp"
#include "tavat/rng.hpp"

namespace tavat {

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Whitespace tokenizer with reserved specials: [PAD]=0, [CLS]=1, [SEP]=2,
/// [UNK]=3. Ordinary tokens follow in first-seen order.
class Tokenizer {
 public:
  static constexpr std::int32_t pad_id = kPadId;
  static constexpr std::int32_t cls_id = 1;
  static constexpr std::int32_t sep_id = 2;
  static constexpr std::int32_t unk_id = 3;
  static constexpr std::int32_t num_special = 4;

  /// Builds from an explicit, ordered token list. Duplicates and special
  /// spellings are ignored.
  static Tokenizer from_tokens(const std::vector<std::string>& tokens, bool lowercase = false) {
    Tokenizer t;
    t.lowercase_ = lowercase;
    for (const char* s : {"[PAD]", "[CLS]", "[SEP]", "[UNK]"}) t.push(s);
    for (const auto& tok : tokens) {
      auto norm = t.normalize(tok);
      if (!t.index_.count(norm)) t.push(norm);
    }
    if (t.size() == static_cast<std::size_t>(num_special)) {
      throw std::invalid_argument("tokenizer: empty token source");
    }
    return t;
  }

  /// Builds from whitespace-split text in corpus order.
  static Tokenizer from_corpus(const std::vector<std::string>& texts, bool lowercase = false) {
    std::vector<std::string> tokens;
    for (const auto& text : texts) {
      auto words = split_whitespace(text);
      tokens.insert(tokens.end(), words.begin(), words.end());
    }
    return from_tokens(tokens, lowercase);
  }

  std::size_t size() const { return tokens_.size(); }
  bool lowercase() const { return lowercase_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool is_special(std::int32_t id) const { return id >= 0 && id < num_special; }

  std::int32_t id(const std::string& word) const {
    auto it = index_.find(normalize(word));
    return it == index_.end() ? unk_id : it->second;
  }

  /// [CLS] w1 .. wn [SEP], truncated to max_len with [SEP] kept last.
  std::vector<std::int32_t> encode(std::string_view text, std::size_t max_len) const {
    return wrap(words_to_ids(split_whitespace(text)), max_len);
  }

  std::vector<std::int32_t> words_to_ids(const std::vector<std::string>& words) const {
    std::vector<std::int32_t> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  static std::vector<std::int32_t> wrap(const std::vector<std::int32_t>& body, std::size_t max_len) {
    if (max_len < 2) throw std::invalid_argument("tokenizer: max_len must leave room for [CLS] and [SEP]");
    std::vector<std::int32_t> ids{cls_id};
    const std::size_t keep = std::min(body.size(), max_len - 2);
    ids.insert(ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(keep));
    ids.push_back(sep_id);
    return ids;
  }

  /// Hash of the ordered token list; equal lists give equal fingerprints.
  std::uint64_t fingerprint() const {
    std::uint64_t h = io::fnv1a(lowercase_ ? "lower\n" : "cased\n");
    for (const auto& t : tokens_) {
      h = io::fnv1a(t, h);
      h = io::fnv1a("\n", h);
    }
    return h;
  }

  /// One token per line; the first line records the casing policy.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write tokenizer: " + path);
    os << (lowercase_ ? "#lowercase" : "#cased") << '\n';
    for (std::size_t i = num_special; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read tokenizer: " + path);
    std::string line;
    std::getline(is, line);
    if (line != "#lowercase" && line != "#cased") throw FormatError("tokenizer file has no casing header: " + path);
    const bool lower = line == "#lowercase";
    std::vector<std::string> toks;
    while (std::getline(is, line))
      if (!line.empty()) toks.push_back(line);
    return from_tokens(toks, lower);
  }

 private:
  void push(const std::string& s) {
    index_.emplace(s, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(s);
  }
  std::string normalize(std::string s) const {
    if (lowercase_) {
      for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
  }

  bool lowercase_ = false;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Raw labeled text. `tags` is filled for tagging tasks, one per word.
struct TextExample {
  std::string text;
  int label = 0;
  std::vector<int> tags;
  bool operator==(const TextExample&) const = default;
};

/// Tokenized example. For tagging tasks `tags` aligns with `ids` and holds
/// kIgnoreLabel at [CLS]/[SEP].
struct Example {
  std::vector<std::int32_t> ids;
  int label = 0;
  std::vector<int> tags;
  bool operator==(const Example&) const = default;
};

inline std::vector<Example> tokenize_examples(const std::vector<TextExample>& raw, const Tokenizer& tok,
                                              std::size_t max_len) {
  std::vector<Example> out;
  out.reserve(raw.size());
  for (const auto& r : raw) {
    Example e;
    auto words = split_whitespace(r.text);
    e.ids = Tokenizer::wrap(tok.words_to_ids(words), max_len);
    e.label = r.label;
    if (!r.tags.empty()) {
      if (r.tags.size() != words.size()) throw std::invalid_argument("tagging example: tag count != word count");
      e.tags.push_back(kIgnoreLabel);
      for (std::size_t i = 0; i + 2 < e.ids.size(); ++i) e.tags.push_back(r.tags[i]);
      e.tags.push_back(kIgnoreLabel);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic classification
//
// Each sequence mixes filler words with 1-3 cue words. Every cue word belongs
// to one class; the clean label is the majority class of the cues (ties
// cannot occur by construction). With probability `noise` the label is
// replaced by a different class.

struct SyntheticClassification {
  std::size_t num_classes = 2;
  std::size_t fillers = 200;
  std::size_t cues_per_class = 12;
  std::size_t min_words = 6;
  std::size_t max_words = 14;

  std::string filler(std::size_t i) const { return "w" + std::to_string(i); }
  std::string cue(std::size_t cls, std::size_t i) const {
    return "c" + std::to_string(cls) + "_" + std::to_string(i);
  }

  std::vector<std::string> token_inventory() const {
    std::vector<std::string> out;
    for (std::size_t c = 0; c < num_classes; ++c)
      for (std::size_t i = 0; i < cues_per_class; ++i) out.push_back(cue(c, i));
    for (std::size_t i = 0; i < fillers; ++i) out.push_back(filler(i));
    return out;
  }

  /// Class a word cues for, or -1.
  int cue_class(const std::string& word) const {
    if (word.size() < 4 || word[0] != 'c') return -1;
    auto us = word.find('_');
    if (us == std::string::npos) return -1;
    return std::stoi(word.substr(1, us - 1));
  }

  /// The noise-free rule: majority class over cue words (first on ties).
  int oracle_label(const std::string& text) const {
    std::vector<int> counts(num_classes, 0);
    for (const auto& w : split_whitespace(text)) {
      int c = cue_class(w);
      if (c >= 0) ++counts[static_cast<std::size_t>(c)];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }

  std::vector<TextExample> generate(std::size_t n, std::uint64_t seed, double noise) const {
    if (n == 0) throw std::invalid_argument("synthetic classification: n must be > 0");
    if (!(noise >= 0.0 && noise < 0.5)) throw std::invalid_argument("synthetic classification: noise must be in [0, 0.5)");
    if (num_classes < 2 || fillers == 0 || cues_per_class == 0 || min_words < 3 || max_words < min_words) {
      throw std::invalid_argument("synthetic classification: bad generator shape");
    }
    Rng rng(seed);
    std::vector<TextExample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const int label = static_cast<int>(rng.below(num_classes));
      const std::size_t len = min_words + rng.below(max_words - min_words + 1);
      const std::size_t n_cues = 1 + rng.below(3);
      // Majority for `label`: all cues when n_cues < 3, else 2 or 3 of 3.
      std::size_t own = n_cues < 3 ? n_cues : 2 + rng.below(2);
      std::vector<std::string> cues;
      for (std::size_t i = 0; i < own; ++i) cues.push_back(cue(static_cast<std::size_t>(label), rng.below(cues_per_class)));
      for (std::size_t i = own; i < n_cues; ++i) {
        std::size_t other = rng.below(num_classes - 1);
        if (other >= static_cast<std::size_t>(label)) ++other;
        cues.push_back(cue(other, rng.below(cues_per_class)));
      }
      std::vector<std::string> words(len);
      for (auto& w : words) w = filler(rng.below(fillers));
      // Distinct positions for the cues.
      std::vector<std::size_t> pos(len);
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      for (std::size_t i = 0; i < cues.size(); ++i) {
        std::swap(pos[i], pos[i + rng.below(len - i)]);
        words[pos[i]] = cues[i];
      }
      int final_label = label;
      if (rng.bernoulli(noise)) {
        std::size_t other = rng.below(num_classes - 1);
        if (other >= static_cast<std::size_t>(label)) ++other;
        final_label = static_cast<int>(other);
      }
      std::string text;
      for (std::size_t i = 0; i < words.size(); ++i) text += (i ? " " : "") + words[i];
      out.push_back({std::move(text), final_label, {}});
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic tagging (BIO)
//
// Entity words belong to one type each; spans of 1-3 entity words of one
// type are planted among fillers with at least one filler between spans.

struct SyntheticTagging {
  std::vector<std::string> types{"PER", "LOC"};
  std::size_t fillers = 100;
  std::size_t words_per_type = 15;
  std::size_t min_words = 6;
  std::size_t max_words = 14;
  std::size_t max_spans = 2;

  std::size_t num_tags() const { return 1 + 2 * types.size(); }
  /// Tag id layout: 0 = O, 2t+1 = B-type, 2t+2 = I-type.
  std::vector<std::string> tag_names() const {
    std::vector<std::string> out{"O"};
    for (const auto& t : types) {
      out.push_back("B-" + t);
      out.push_back("I-" + t);
    }
    return out;
  }
  std::string entity(std::size_t type, std::size_t i) const { return "e" + std::to_string(type) + "_" + std::to_string(i); }
  std::string filler(std::size_t i) const { return "f" + std::to_string(i); }

  std::vector<std::string> token_inventory() const {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < types.size(); ++t)
      for (std::size_t i = 0; i < words_per_type; ++i) out.push_back(entity(t, i));
    for (std::size_t i = 0; i < fillers; ++i) out.push_back(filler(i));
    return out;
  }

  /// Plants exactly the given spans: (start, length, type). Positions not
  /// covered are fillers. Used by generate() and directly by tests.
  TextExample plant(std::size_t len, const std::vector<std::array<std::size_t, 3>>& spans, Rng& rng) const {
    std::vector<std::string> words(len);
    std::vector<int> tags(len, 0);
    for (auto& w : words) w = filler(rng.below(fillers));
    for (const auto& [start, n, type] : spans) {
      if (start + n > len || type >= types.size()) throw std::invalid_argument("synthetic tagging: span out of range");
      for (std::size_t i = 0; i < n; ++i) {
        words[start + i] = entity(type, rng.below(words_per_type));
        tags[start + i] = static_cast<int>(2 * type + (i == 0 ? 1 : 2));
      }
    }
    std::string text;
    for (std::size_t i = 0; i < len; ++i) text += (i ? " " : "") + words[i];
    return {std::move(text), 0, std::move(tags)};
  }

  std::vector<TextExample> generate(std::size_t n, std::uint64_t seed) const {
    if (n == 0) throw std::invalid_argument("synthetic tagging: n must be > 0");
    if (types.empty() || min_words < 2 || max_words < min_words) throw std::invalid_argument("synthetic tagging: bad shape");
    Rng rng(seed);
    std::vector<TextExample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t len = min_words + rng.below(max_words - min_words + 1);
      const std::size_t n_spans = rng.below(max_spans + 1);
      std::vector<std::array<std::size_t, 3>> spans;
      std::size_t cursor = 0;
      for (std::size_t s = 0; s < n_spans; ++s) {
        const std::size_t span_len = 1 + rng.below(3);
        if (cursor + span_len > len) break;
        const std::size_t slack = len - cursor - span_len;
        const std::size_t start = cursor + rng.below(slack + 1);
        spans.push_back({start, span_len, static_cast<std::size_t>(rng.below(types.size()))});
        cursor = start + span_len + 1;  // at least one filler between spans
      }
      out.push_back(plant(len, spans, rng));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Delimited files

struct DelimitedFormat {
  char delimiter = '\t';
  bool has_header = true;
  std::size_t text_column = 0;
  std::size_t label_column = 1;
  /// Label spellings in class-index order. Empty: labels are integers in
  /// [0, num_classes).
  std::vector<std::string> label_names;
  std::size_t num_classes = 2;
};

inline std::vector<std::string> split_delimited(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

/// Reads text/label rows. Errors name the offending line.
inline std::vector<TextExample> read_delimited(const std::string& path, const DelimitedFormat& fmt) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open data file: " + path);
  std::vector<TextExample> out;
  std::string line;
  std::size_t line_no = 0;
  const std::size_t need = std::max(fmt.text_column, fmt.label_column) + 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && fmt.has_header) continue;
    if (line.empty()) continue;
    auto cols = split_delimited(line, fmt.delimiter);
    if (cols.size() < need) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": malformed row, expected at least " +
                        std::to_string(need) + " columns, found " + std::to_string(cols.size()));
    }
    const auto& raw_label = cols[fmt.label_column];
    int label = -1;
    if (!fmt.label_names.empty()) {
      auto it = std::find(fmt.label_names.begin(), fmt.label_names.end(), raw_label);
      if (it != fmt.label_names.end()) label = static_cast<int>(it - fmt.label_names.begin());
    } else {
      try {
        std::size_t used = 0;
        int v = std::stoi(raw_label, &used);
        if (used == raw_label.size() && v >= 0 && static_cast<std::size_t>(v) < fmt.num_classes) label = v;
      } catch (const std::exception&) {
      }
    }
    if (label < 0) throw FormatError(path + ":" + std::to_string(line_no) + ": unknown label \"" + raw_label + "\"");
    out.push_back({cols[fmt.text_column], label, {}});
  }
  return out;
}

/// Reads, tokenizes and truncates a delimited file.
inline std::vector<Example> load_delimited(const std::string& path, const DelimitedFormat& fmt, const Tokenizer& tok,
                                           std::size_t max_len) {
  return tokenize_examples(read_delimited(path, fmt), tok, max_len);
}

// ---------------------------------------------------------------------------
// Batching and subsampling

/// Pads each batch to its own longest example. The final partial batch is
/// kept. Shuffling is a seeded Fisher-Yates over example indices.
inline std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                       std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be >= 1");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.size = end - start;
    for (std::size_t i = start; i < end; ++i) b.length = std::max(b.length, examples[order[i]].ids.size());
    b.token_ids.assign(b.size * b.length, kPadId);
    b.mask.assign(b.size * b.length, 0);
    const bool tagging = !examples[order[start]].tags.empty();
    if (tagging) b.tags.assign(b.size * b.length, kIgnoreLabel);
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = examples[order[i]];
      const std::size_t row = (i - start) * b.length;
      for (std::size_t j = 0; j < e.ids.size(); ++j) {
        b.token_ids[row + j] = e.ids[j];
        b.mask[row + j] = e.ids[j] != kPadId;
        if (tagging) b.tags[row + j] = e.tags.at(j);
      }
      b.labels.push_back(e.label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

struct SubsampleResult {
  std::vector<Example> examples;
  std::map<int, std::size_t> label_counts;
};

/// Uniform sample of `count` examples without replacement, returned in
/// their original order.
inline SubsampleResult subsample(const std::vector<Example>& examples, std::size_t count, std::uint64_t seed) {
  if (count > examples.size()) {
    throw std::invalid_argument("subsample: requested " + std::to_string(count) + " of " +
                                std::to_string(examples.size()) + " examples");
  }
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (count < examples.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(examples.size() - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
  }
  SubsampleResult r;
  r.examples.reserve(count);
  for (auto i : idx) {
    r.examples.push_back(examples[i]);
    ++r.label_counts[examples[i].label];
  }
  return r;
}

inline SubsampleResult subsample_fraction(const std::vector<Example>& examples, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must be in (0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(examples.size())));
  return subsample(examples, count, seed);
}

}  // namespace tavat
