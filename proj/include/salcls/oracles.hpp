#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/text.hpp"

namespace salcls {

// Class-prediction oracle: document text (+ optional hint words) -> label index.
// Implementations must be deterministic for identical inputs within one run
// configuration; generative backends are expected to decode greedily.
class ClassOracle {
 public:
  virtual ~ClassOracle() = default;
  virtual int predict(const std::string& text, const LabelSet& labels,
                      const std::vector<std::string>& hints) const = 0;
  // 0 = safe for unlimited concurrent queries.
  virtual int max_concurrency() const { return 1; }
};

// Saliency oracle: document text + predicted label name -> words/phrases
// drawn from the document.
class SaliencyOracle {
 public:
  virtual ~SaliencyOracle() = default;
  virtual std::vector<std::string> extract(const std::string& text,
                                           const std::string& label_name) const = 0;
  virtual int max_concurrency() const { return 1; }
};

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

enum class PromptRole { classification, classification_with_hints, saliency };

struct PromptTemplate {
  std::string text;
  PromptRole role = PromptRole::classification;

  static PromptTemplate classification(std::string t) {
    PromptTemplate p{std::move(t), PromptRole::classification};
    p.require_placeholders({"{text}", "{options}"});
    return p;
  }
  static PromptTemplate classification_with_hints(std::string t) {
    PromptTemplate p{std::move(t), PromptRole::classification_with_hints};
    p.require_placeholders({"{text}", "{options}", "{hints}"});
    return p;
  }
  static PromptTemplate saliency(std::string t) {
    PromptTemplate p{std::move(t), PromptRole::saliency};
    p.require_placeholders({"{text}", "{label}"});
    return p;
  }

  void require_placeholders(const std::vector<std::string>& required) const {
    for (const auto& ph : required) {
      if (text.find(ph) == std::string::npos)
        throw TemplateMismatch("template is missing placeholder " + ph);
    }
  }
};

// Default prompt texts; swappable via the run config.
inline PromptTemplate default_classification_template() {
  return PromptTemplate::classification(
      "Question: Which category best describes the following text? "
      "Text: {text} Options: {options} Answer:");
}
inline PromptTemplate default_classification_with_hints_template() {
  return PromptTemplate::classification_with_hints(
      "Question: Which category best describes the following text? "
      "Text: {text} Options: {options} Key words: {hints}. Answer:");
}
inline PromptTemplate default_saliency_template() {
  return PromptTemplate::saliency(
      "Text: {text} Question: Which words indicate that the label is {label}? "
      "Answer:");
}

namespace detail {
inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}
}  // namespace detail

inline std::string build_class_prompt(const PromptTemplate& tmpl, const std::string& text,
                                      const LabelSet& labels,
                                      const std::vector<std::string>& hints = {}) {
  if (hints.empty() && tmpl.role != PromptRole::classification)
    throw TemplateMismatch("hint-free query requires a plain classification template");
  if (!hints.empty() && tmpl.role != PromptRole::classification_with_hints)
    throw TemplateMismatch("hinted query requires a classification_with_hints template");

  std::string out = tmpl.text;
  detail::replace_all(out, "{text}", text);
  detail::replace_all(out, "{options}", detail::join(labels.names(), ", "));
  if (!hints.empty()) detail::replace_all(out, "{hints}", detail::join(hints, ", "));
  return out;
}

inline std::string build_saliency_prompt(const PromptTemplate& tmpl, const std::string& text,
                                         const std::string& label_name) {
  if (tmpl.role != PromptRole::saliency)
    throw TemplateMismatch("saliency query requires a saliency template");
  std::string out = tmpl.text;
  detail::replace_all(out, "{text}", text);
  detail::replace_all(out, "{label}", label_name);
  return out;
}

// ---------------------------------------------------------------------------
// Free-text answer mapping: exact -> case-insensitive -> longest-common-prefix.
// Ambiguous or zero-overlap answers are an error, never a silent guess.
// ---------------------------------------------------------------------------

inline int map_answer_to_label(const std::string& raw_answer, const LabelSet& labels) {
  const std::string answer = trim(raw_answer);
  for (int i = 0; i < labels.size(); ++i)
    if (answer == labels.name(i)) return i;

  const std::string lower = to_lower(answer);
  for (int i = 0; i < labels.size(); ++i)
    if (lower == to_lower(labels.name(i))) return i;

  std::size_t best = 0, second = 0;
  int best_idx = -1;
  for (int i = 0; i < labels.size(); ++i) {
    const std::string name = to_lower(labels.name(i));
    std::size_t k = 0;
    while (k < lower.size() && k < name.size() && lower[k] == name[k]) ++k;
    if (k > best) {
      second = best;
      best = k;
      best_idx = i;
    } else if (k == best) {
      second = k;
    }
  }
  if (best_idx < 0 || best == 0 || best == second) throw UnmappableAnswer(raw_answer);
  return best_idx;
}

// ---------------------------------------------------------------------------
// Query wrappers used by the rounds engine
// ---------------------------------------------------------------------------

inline int query_class(const ClassOracle& oracle, const std::string& text,
                       const LabelSet& labels,
                       const std::vector<std::string>& hints = {}) {
  if (labels.size() == 0) throw ConfigError("query_class requires a non-empty label set");
  int idx = oracle.predict(text, labels, hints);
  if (idx < 0 || idx >= labels.size())
    throw InvariantViolation("?", "class oracle returned out-of-range label index " +
                                      std::to_string(idx));
  return idx;
}

// Returns words verifiably present in the document; answers that cannot be
// located in the normalized text are dropped.
inline std::vector<std::string> query_saliency(const SaliencyOracle& oracle,
                                               const std::string& text,
                                               const std::string& label_name,
                                               std::size_t* dropped = nullptr) {
  std::vector<std::string> raw = oracle.extract(text, label_name);
  const std::string hay = to_lower(text);
  std::vector<std::string> out;
  std::size_t drop_count = 0;
  for (auto& w : raw) {
    std::string needle = to_lower(trim(w));
    if (!needle.empty() && hay.find(needle) != std::string::npos)
      out.push_back(trim(w));
    else
      ++drop_count;
  }
  if (dropped) *dropped += drop_count;
  return out;
}

// ---------------------------------------------------------------------------
// Word -> token-mask alignment (the saliency answers are surface words; the
// model wants a binary vector over its own tokenization).
// ---------------------------------------------------------------------------

// A token is salient iff its span overlaps any character occurrence of any
// word. Words that cannot be located anywhere are dropped (tallied). All
// occurrences of a word are marked, not only the first.
inline SaliencyMask align_words_to_mask(const std::vector<std::string>& words,
                                        std::size_t tokenized_length,
                                        const std::vector<CharSpan>& token_spans,
                                        const std::string& text,
                                        std::size_t* dropped_words = nullptr) {
  if (token_spans.size() != tokenized_length)
    throw LengthMismatch("token_spans size " + std::to_string(token_spans.size()) +
                         " != tokenized_length " + std::to_string(tokenized_length));
  const std::string hay = to_lower(text);
  std::vector<std::size_t> salient;
  for (const auto& word : words) {
    const std::string needle = to_lower(trim(word));
    if (needle.empty()) continue;
    bool found = false;
    std::size_t pos = 0;
    while ((pos = hay.find(needle, pos)) != std::string::npos) {
      found = true;
      CharSpan occurrence{pos, pos + needle.size()};
      for (std::size_t t = 0; t < tokenized_length; ++t)
        if (token_spans[t].overlaps(occurrence)) salient.push_back(t);
      ++pos;
    }
    if (!found && dropped_words) ++*dropped_words;
  }
  return SaliencyMask(tokenized_length, std::move(salient));
}

// ---------------------------------------------------------------------------
// In-process model runtime adapters. Wraps any locally hosted text generator
// (prompt in, completion out) behind the oracle interfaces, sharing the
// prompt construction and answer mapping with the remote client. The runtime
// is expected to decode greedily.
// ---------------------------------------------------------------------------

using GenerateFn = std::function<std::string(const std::string& prompt)>;

class InProcessClassOracle final : public ClassOracle {
 public:
  InProcessClassOracle(GenerateFn generate, PromptTemplate plain, PromptTemplate hinted,
                       int max_concurrency = 1)
      : generate_(std::move(generate)), plain_(std::move(plain)),
        hinted_(std::move(hinted)), max_concurrency_(max_concurrency) {}

  int predict(const std::string& text, const LabelSet& labels,
              const std::vector<std::string>& hints) const override {
    const std::string prompt =
        build_class_prompt(hints.empty() ? plain_ : hinted_, text, labels, hints);
    return map_answer_to_label(generate_(prompt), labels);
  }

  int max_concurrency() const override { return max_concurrency_; }

 private:
  GenerateFn generate_;
  PromptTemplate plain_;
  PromptTemplate hinted_;
  int max_concurrency_;
};

class InProcessSaliencyOracle final : public SaliencyOracle {
 public:
  InProcessSaliencyOracle(GenerateFn generate, PromptTemplate tmpl,
                          int max_concurrency = 1)
      : generate_(std::move(generate)), tmpl_(std::move(tmpl)),
        max_concurrency_(max_concurrency) {}

  std::vector<std::string> extract(const std::string& text,
                                   const std::string& label_name) const override {
    return split_whitespace(generate_(build_saliency_prompt(tmpl_, text, label_name)));
  }

  int max_concurrency() const override { return max_concurrency_; }

 private:
  GenerateFn generate_;
  PromptTemplate tmpl_;
  int max_concurrency_;
};

// ---------------------------------------------------------------------------
// Deterministic lexicon-based oracles (test double and offline mode)
// ---------------------------------------------------------------------------

struct LexiconOracleSpec {
  // label name -> lowercase keywords, non-empty per label
  std::map<std::string, std::vector<std::string>> keywords;
  // extra votes per hint word that is a keyword of the candidate label
  double hint_weight = 1.0;

  void validate(const LabelSet& labels) const {
    for (const auto& name : labels.names()) {
      auto it = keywords.find(name);
      if (it == keywords.end() || it->second.empty())
        throw ConfigError("lexicon oracle needs a non-empty keyword list for label '" +
                          name + "'");
      for (const auto& kw : it->second)
        if (kw != to_lower(kw))
          throw ConfigError("lexicon keyword must be lowercase: '" + kw + "'");
    }
  }
};

namespace detail {
// Counts whole-token occurrences of a keyword among the document's tokens.
inline int count_token_occurrences(const std::vector<Token>& tokens,
                                   const std::string& keyword) {
  int n = 0;
  for (const auto& t : tokens)
    if (to_lower(t.text) == keyword) ++n;
  return n;
}
}  // namespace detail

// Keyword-count voting; ties broken toward the lowest label index. Pure
// function of its inputs, safe for unlimited concurrency.
class LexiconClassOracle final : public ClassOracle {
 public:
  explicit LexiconClassOracle(LexiconOracleSpec spec) : spec_(std::move(spec)) {}

  int predict(const std::string& text, const LabelSet& labels,
              const std::vector<std::string>& hints) const override {
    spec_.validate(labels);
    const auto tokens = tokenize(text);
    int best = 0;
    double best_score = -1.0;
    for (int i = 0; i < labels.size(); ++i) {
      const auto& kws = spec_.keywords.at(labels.name(i));
      double score = 0.0;
      for (const auto& kw : kws) score += detail::count_token_occurrences(tokens, kw);
      for (const auto& hint : hints) {
        const std::string h = to_lower(trim(hint));
        if (std::find(kws.begin(), kws.end(), h) != kws.end()) score += spec_.hint_weight;
      }
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    return best;
  }

  int max_concurrency() const override { return 0; }

 private:
  LexiconOracleSpec spec_;
};

// Returns the label's keywords that occur in the document, as surface forms in
// first-occurrence document order.
class LexiconSaliencyOracle final : public SaliencyOracle {
 public:
  explicit LexiconSaliencyOracle(LexiconOracleSpec spec) : spec_(std::move(spec)) {}

  std::vector<std::string> extract(const std::string& text,
                                   const std::string& label_name) const override {
    auto it = spec_.keywords.find(label_name);
    if (it == spec_.keywords.end())
      throw OracleUnavailable("lexicon has no keywords for label '" + label_name + "'");
    const auto tokens = tokenize(text);
    std::vector<std::string> out;
    for (const auto& tok : tokens) {
      const std::string lower = to_lower(tok.text);
      if (std::find(it->second.begin(), it->second.end(), lower) != it->second.end() &&
          std::find(out.begin(), out.end(), tok.text) == out.end())
        out.push_back(tok.text);
    }
    return out;
  }

  int max_concurrency() const override { return 0; }

 private:
  LexiconOracleSpec spec_;
};

}  // namespace salcls
