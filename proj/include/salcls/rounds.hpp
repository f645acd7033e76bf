#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/oracles.hpp"

namespace salcls {

enum class OnEmptySaliency { keep_label_stop, retry_without_hints };

struct RoundConfig {
  int max_rounds = 2;  // enhanced rounds after round 0; grid is {0,1,2,3}
  bool require_mask_equality = true;
  OnEmptySaliency on_empty_saliency = OnEmptySaliency::keep_label_stop;

  void validate() const {
    if (max_rounds < 0 || max_rounds > 3)
      throw ConfigError("max_rounds must be in {0,1,2,3}");
  }
};

namespace detail {
inline SaliencyMask align_to_document(const std::vector<std::string>& words,
                                      const std::string& text) {
  const auto tokens = tokenize(text);
  std::vector<CharSpan> spans;
  spans.reserve(tokens.size());
  for (const auto& t : tokens) spans.push_back(t.span);
  return align_words_to_mask(words, tokens.size(), spans, text);
}
}  // namespace detail

// Round 0: unhinted class query, then saliency on the predicted label.
inline RoundRecord run_initial_round(const Document& doc, const LabelSet& labels,
                                     const ClassOracle& class_oracle,
                                     const SaliencyOracle& saliency_oracle) {
  RoundRecord rec;
  rec.round_index = 0;
  rec.class_label = query_class(class_oracle, doc.text, labels);
  rec.salient_words = query_saliency(saliency_oracle, doc.text, labels.name(rec.class_label));
  rec.salient_mask = detail::align_to_document(rec.salient_words, doc.text);
  return rec;
}

// Enhanced round: the previous round's salient words become hints for the
// class query, then saliency is re-queried on the (possibly new) label.
inline RoundRecord run_enhanced_round(const Document& doc, const LabelSet& labels,
                                      const RoundRecord& prev,
                                      const ClassOracle& class_oracle,
                                      const SaliencyOracle& saliency_oracle) {
  RoundRecord rec;
  rec.round_index = prev.round_index + 1;
  rec.class_label = query_class(class_oracle, doc.text, labels, prev.salient_words);
  rec.salient_words = query_saliency(saliency_oracle, doc.text, labels.name(rec.class_label));
  rec.salient_mask = detail::align_to_document(rec.salient_words, doc.text);
  return rec;
}

inline bool has_converged(const RoundRecord& current, const RoundRecord& previous,
                          const RoundConfig& cfg) {
  if (current.round_index != previous.round_index + 1)
    throw InvariantViolation("?", "has_converged requires consecutive rounds");
  if (current.class_label != previous.class_label) return false;
  if (!cfg.require_mask_equality) return true;
  return current.salient_mask.same_indices(previous.salient_mask);
}

// Runs the full round loop for one document.
inline PseudoExample label_document(const Document& doc, const LabelSet& labels,
                                    const ClassOracle& class_oracle,
                                    const SaliencyOracle& saliency_oracle,
                                    const RoundConfig& cfg) {
  PseudoExample ex;
  ex.doc_id = doc.doc_id;
  ex.history.push_back(run_initial_round(doc, labels, class_oracle, saliency_oracle));
  for (int k = 1; k <= cfg.max_rounds; ++k) {
    const RoundRecord& prev = ex.history.back();
    if (prev.salient_words.empty() &&
        cfg.on_empty_saliency == OnEmptySaliency::keep_label_stop)
      break;  // hinted query is undefined with no hints
    RoundRecord next = run_enhanced_round(doc, labels, prev, class_oracle, saliency_oracle);
    bool done = has_converged(next, prev, cfg);
    ex.history.push_back(std::move(next));
    if (done) {
      ex.converged = true;
      break;
    }
  }
  ex.final_label = ex.history.back().class_label;
  ex.final_mask = ex.history.back().salient_mask;
  ex.check_invariants();
  return ex;
}

struct Progress {
  std::size_t done = 0;
  std::size_t total = 0;
  std::size_t failed = 0;
};
using ProgressSink = std::function<void(const Progress&)>;

struct GenerateOptions {
  // Incremental cache path; completed documents are appended here as they
  // finish so an interrupted run can resume. Empty disables caching.
  std::string cache_path;
  ProgressSink progress;
  // Fraction of per-document failures tolerated before the run aborts.
  double max_failure_fraction = 0.10;
};

struct GenerateResult {
  std::vector<PseudoExample> examples;  // input corpus order, failures omitted
  std::vector<std::pair<std::string, std::string>> failures;  // doc_id, error
};

namespace detail {
inline std::size_t pool_width(const ClassOracle& c, const SaliencyOracle& s) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::size_t width = hw;
  if (c.max_concurrency() > 0)
    width = std::min(width, static_cast<std::size_t>(c.max_concurrency()));
  if (s.max_concurrency() > 0)
    width = std::min(width, static_cast<std::size_t>(s.max_concurrency()));
  return std::max<std::size_t>(1, width);
}
}  // namespace detail

// Labels every document in the corpus. Documents are independent; output
// order equals input order. Per-document oracle failures are recorded and the
// document skipped; the run fails only past the failure threshold.
inline GenerateResult generate_pseudo_labels(const Corpus& corpus,
                                             const ClassOracle& class_oracle,
                                             const SaliencyOracle& saliency_oracle,
                                             const RoundConfig& cfg,
                                             const GenerateOptions& opts = {}) {
  cfg.validate();
  const std::size_t n = corpus.documents.size();

  // Resume: reuse any documents already present in the cache.
  std::unordered_map<std::string, PseudoExample> cached;
  if (!opts.cache_path.empty() && std::filesystem::exists(opts.cache_path)) {
    for (auto& ex : read_pseudo_examples(opts.cache_path, corpus.labels))
      cached.emplace(ex.doc_id, std::move(ex));
  }

  std::vector<std::optional<PseudoExample>> slots(n);
  std::vector<std::pair<std::string, std::string>> failures;

  std::ofstream cache;
  if (!opts.cache_path.empty()) {
    cache.open(opts.cache_path, std::ios::app);
    if (!cache) throw IoFailure("cannot open cache file: " + opts.cache_path);
  }

  std::mutex mu;  // guards cache writes, failures, progress
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      const Document& doc = corpus.documents[i];
      auto hit = cached.find(doc.doc_id);
      if (hit != cached.end()) {
        slots[i] = hit->second;
      } else {
        try {
          PseudoExample ex =
              label_document(doc, corpus.labels, class_oracle, saliency_oracle, cfg);
          {
            std::lock_guard<std::mutex> lock(mu);
            if (cache.is_open()) {
              cache << pseudo_example_to_json(ex, corpus.labels).dump() << '\n';
              cache.flush();
            }
          }
          slots[i] = std::move(ex);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(mu);
          failures.emplace_back(doc.doc_id, e.what());
        }
      }
      const std::size_t d = done.fetch_add(1) + 1;
      if (opts.progress) {
        std::lock_guard<std::mutex> lock(mu);
        opts.progress({d, n, failures.size()});
      }
    }
  };

  const std::size_t width = detail::pool_width(class_oracle, saliency_oracle);
  if (width == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < std::min(width, n); ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  if (n > 0 &&
      static_cast<double>(failures.size()) > opts.max_failure_fraction * static_cast<double>(n))
    throw OracleUnavailable(std::to_string(failures.size()) + " of " + std::to_string(n) +
                            " documents failed pseudo-labeling");

  GenerateResult result;
  result.failures = std::move(failures);
  for (auto& slot : slots)
    if (slot) result.examples.push_back(std::move(*slot));
  return result;
}

struct PseudoStats {
  double converged_frac = 0.0;
  double mean_rounds = 0.0;
  std::size_t failed = 0;
};

inline PseudoStats pseudo_stats(const GenerateResult& result) {
  PseudoStats s;
  s.failed = result.failures.size();
  if (result.examples.empty()) return s;
  std::size_t converged = 0, rounds = 0;
  for (const auto& ex : result.examples) {
    if (ex.converged) ++converged;
    rounds += ex.history.size();
  }
  s.converged_frac = static_cast<double>(converged) / static_cast<double>(result.examples.size());
  s.mean_rounds = static_cast<double>(rounds) / static_cast<double>(result.examples.size());
  return s;
}

}  // namespace salcls
