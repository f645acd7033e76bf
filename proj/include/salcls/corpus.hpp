#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "salcls/errors.hpp"
#include "salcls/text.hpp"

namespace salcls {

using json = nlohmann::json;

// Ordered set of class names. Label index i maps to the same name for the
// whole run.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ConfigError("label set must be non-empty");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], static_cast<int>(i)).second)
        throw ConfigError("duplicate label name: " + names_[i]);
    }
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int index) const { return names_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& names() const { return names_; }

  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int require(const std::string& name) const {
    auto idx = find(name);
    if (!idx) throw UnknownLabel(name);
    return *idx;
  }

  bool operator==(const LabelSet& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

struct Document {
  std::string doc_id;
  std::string text;  // whitespace-normalized
  std::optional<int> gold_label;
  std::vector<CharSpan> gold_rationale;  // sorted, non-overlapping

  bool operator==(const Document&) const = default;
};

enum class Split { train, dev, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

struct Corpus {
  std::vector<Document> documents;
  LabelSet labels;
  Split split = Split::train;
};

// Binary per-token saliency vector, stored sparsely as the sorted set of
// salient positions.
class SaliencyMask {
 public:
  SaliencyMask() = default;
  SaliencyMask(std::size_t length, std::vector<std::size_t> salient_indices)
      : length_(length), indices_(std::move(salient_indices)) {
    std::sort(indices_.begin(), indices_.end());
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
    if (!indices_.empty() && indices_.back() >= length_)
      throw InvariantViolation("?", "salient index " + std::to_string(indices_.back()) +
                                        " >= mask length " + std::to_string(length_));
  }

  std::size_t length() const { return length_; }
  const std::vector<std::size_t>& salient_indices() const { return indices_; }
  bool empty() const { return indices_.empty(); }

  bool is_salient(std::size_t i) const {
    return std::binary_search(indices_.begin(), indices_.end(), i);
  }

  std::vector<int> dense() const {
    std::vector<int> v(length_, 0);
    for (auto i : indices_) v[i] = 1;
    return v;
  }

  bool operator==(const SaliencyMask& other) const {
    return length_ == other.length_ && indices_ == other.indices_;
  }

  // Index-set equality regardless of the stored length.
  bool same_indices(const SaliencyMask& other) const {
    return indices_ == other.indices_;
  }

 private:
  std::size_t length_ = 0;
  std::vector<std::size_t> indices_;
};

struct RoundRecord {
  int round_index = 0;
  int class_label = 0;
  std::vector<std::string> salient_words;
  SaliencyMask salient_mask;

  bool operator==(const RoundRecord&) const = default;
};

struct PseudoExample {
  std::string doc_id;
  int final_label = 0;
  SaliencyMask final_mask;
  std::vector<RoundRecord> history;
  bool converged = false;

  bool operator==(const PseudoExample&) const = default;

  void check_invariants() const {
    if (history.empty())
      throw InvariantViolation(doc_id, "history must have at least one round");
    int prev = -1;
    for (const auto& r : history) {
      if (r.round_index <= prev)
        throw InvariantViolation(doc_id, "round indices must strictly increase");
      prev = r.round_index;
    }
    const RoundRecord& last = history.back();
    if (final_label != last.class_label || !(final_mask == last.salient_mask))
      throw InvariantViolation(doc_id, "final label/mask must equal the last round's");
    if (converged) {
      if (history.size() < 2)
        throw InvariantViolation(doc_id, "converged requires at least two rounds");
      const RoundRecord& prev_r = history[history.size() - 2];
      if (prev_r.class_label != last.class_label ||
          !prev_r.salient_mask.same_indices(last.salient_mask))
        throw InvariantViolation(doc_id, "converged=true but last two rounds differ");
    }
  }
};

// ---------------------------------------------------------------------------
// Corpus JSONL: {"id": str, "text": str, "label": str?, "rationale": [[int,int],...]?}
// ---------------------------------------------------------------------------

inline Document parse_corpus_record(const json& rec, const LabelSet& labels,
                                    std::size_t line_no) {
  if (!rec.is_object()) throw MalformedRecord(line_no, "record is not an object");
  if (!rec.contains("id") || !rec["id"].is_string())
    throw MalformedRecord(line_no, "missing string field 'id'");
  if (!rec.contains("text") || !rec["text"].is_string())
    throw MalformedRecord(line_no, "missing string field 'text'");

  Document doc;
  doc.doc_id = rec["id"].get<std::string>();
  doc.text = normalize_whitespace(rec["text"].get<std::string>());
  if (doc.text.empty())
    throw MalformedRecord(line_no, "text empty after whitespace normalization");

  if (rec.contains("label")) {
    if (!rec["label"].is_string())
      throw MalformedRecord(line_no, "'label' must be a string");
    doc.gold_label = labels.require(rec["label"].get<std::string>());
  }

  if (rec.contains("rationale")) {
    if (!rec["rationale"].is_array())
      throw MalformedRecord(line_no, "'rationale' must be an array of [start,end) pairs");
    for (const auto& pair : rec["rationale"]) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() ||
          !pair[1].is_number_integer())
        throw MalformedRecord(line_no, "rationale span must be [int,int]");
      long long b = pair[0].get<long long>();
      long long e = pair[1].get<long long>();
      if (b < 0 || e <= b || static_cast<std::size_t>(e) > doc.text.size())
        throw InvalidSpan(doc.doc_id, "[" + std::to_string(b) + "," + std::to_string(e) +
                                          ") out of bounds for length " +
                                          std::to_string(doc.text.size()));
      doc.gold_rationale.push_back(
          {static_cast<std::size_t>(b), static_cast<std::size_t>(e)});
    }
    std::sort(doc.gold_rationale.begin(), doc.gold_rationale.end(),
              [](const CharSpan& a, const CharSpan& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < doc.gold_rationale.size(); ++i) {
      if (doc.gold_rationale[i - 1].end > doc.gold_rationale[i].begin)
        throw InvalidSpan(doc.doc_id, "overlapping rationale spans");
    }
  }
  return doc;
}

inline Corpus load_corpus(const std::string& path, const LabelSet& labels,
                          Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open corpus file: " + path);

  Corpus corpus;
  corpus.labels = labels;
  corpus.split = split;
  std::unordered_set<std::string> seen_ids;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw MalformedRecord(line_no, e.what());
    }
    Document doc = parse_corpus_record(rec, labels, line_no);
    if (!seen_ids.insert(doc.doc_id).second)
      throw MalformedRecord(line_no, "duplicate doc id: " + doc.doc_id);
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Pseudo-label JSONL:
// {"id": str, "label": str, "salient_words": [str], "salient_indices": [int],
//  "mask_length": int, "converged": bool,
//  "rounds": [{"round": int, "label": str, "salient_words": [str],
//              "salient_indices": [int]}]}
// ---------------------------------------------------------------------------

inline json pseudo_example_to_json(const PseudoExample& ex, const LabelSet& labels) {
  json rounds = json::array();
  for (const auto& r : ex.history) {
    rounds.push_back({{"round", r.round_index},
                      {"label", labels.name(r.class_label)},
                      {"salient_words", r.salient_words},
                      {"salient_indices", r.salient_mask.salient_indices()}});
  }
  return json{{"id", ex.doc_id},
              {"label", labels.name(ex.final_label)},
              {"salient_words", ex.history.back().salient_words},
              {"salient_indices", ex.final_mask.salient_indices()},
              {"mask_length", ex.final_mask.length()},
              {"converged", ex.converged},
              {"rounds", rounds}};
}

inline PseudoExample pseudo_example_from_json(const json& rec, const LabelSet& labels,
                                              std::size_t line_no) {
  for (const char* key : {"id", "label", "salient_indices", "mask_length",
                          "converged", "rounds"}) {
    if (!rec.contains(key))
      throw MalformedRecord(line_no, std::string("missing field '") + key + "'");
  }
  PseudoExample ex;
  try {
    ex.doc_id = rec["id"].get<std::string>();
    ex.final_label = labels.require(rec["label"].get<std::string>());
    ex.converged = rec["converged"].get<bool>();
    std::size_t mask_length = rec["mask_length"].get<std::size_t>();
    try {
      ex.final_mask =
          SaliencyMask(mask_length, rec["salient_indices"].get<std::vector<std::size_t>>());
    } catch (const InvariantViolation&) {
      throw InvariantViolation(ex.doc_id, "salient index out of mask bounds");
    }
    for (const auto& r : rec["rounds"]) {
      RoundRecord rr;
      rr.round_index = r.at("round").get<int>();
      rr.class_label = labels.require(r.at("label").get<std::string>());
      rr.salient_words = r.at("salient_words").get<std::vector<std::string>>();
      try {
        rr.salient_mask =
            SaliencyMask(mask_length, r.at("salient_indices").get<std::vector<std::size_t>>());
      } catch (const InvariantViolation&) {
        throw InvariantViolation(ex.doc_id, "round salient index out of mask bounds");
      }
      ex.history.push_back(std::move(rr));
    }
  } catch (const json::exception& e) {
    throw MalformedRecord(line_no, e.what());
  }
  ex.check_invariants();
  return ex;
}

inline void write_pseudo_examples(const std::string& path,
                                  const std::vector<PseudoExample>& examples,
                                  const LabelSet& labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoFailure("cannot open for writing: " + path);
  for (const auto& ex : examples) {
    out << pseudo_example_to_json(ex, labels).dump() << '\n';
    if (!out) throw IoFailure("write failed: " + path);
  }
}

inline std::vector<PseudoExample> read_pseudo_examples(const std::string& path,
                                                       const LabelSet& labels) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open pseudo-label file: " + path);
  std::vector<PseudoExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw MalformedRecord(line_no, e.what());
    }
    out.push_back(pseudo_example_from_json(rec, labels, line_no));
  }
  return out;
}

}  // namespace salcls
