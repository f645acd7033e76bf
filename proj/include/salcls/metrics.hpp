#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <vector>

#include "salcls/errors.hpp"

namespace salcls {

// Per-class true positive / false positive / false negative tallies.
struct ConfusionCounts {
  std::vector<long> tp, fp, fn;

  explicit ConfusionCounts(int n_classes = 0)
      : tp(static_cast<std::size_t>(n_classes), 0),
        fp(static_cast<std::size_t>(n_classes), 0),
        fn(static_cast<std::size_t>(n_classes), 0) {}

  int n_classes() const { return static_cast<int>(tp.size()); }

  static ConfusionCounts from_pairs(const std::vector<int>& gold,
                                    const std::vector<int>& pred, int n_classes) {
    if (gold.size() != pred.size())
      throw ShapeMismatch("gold and prediction lists differ in length");
    ConfusionCounts c(n_classes);
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const int g = gold[i], p = pred[i];
      if (g < 0 || g >= n_classes || p < 0 || p >= n_classes)
        throw ShapeMismatch("label index out of range in confusion counts");
      if (g == p) {
        ++c.tp[static_cast<std::size_t>(g)];
      } else {
        ++c.fp[static_cast<std::size_t>(p)];
        ++c.fn[static_cast<std::size_t>(g)];
      }
    }
    return c;
  }
};

// F1_micro = 2*sum(TP) / (2*sum(TP) + sum(FP) + sum(FN)); 0 when all counts
// are zero.
inline double micro_f1(const ConfusionCounts& c) {
  long tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < c.n_classes(); ++i) {
    tp += c.tp[static_cast<std::size_t>(i)];
    fp += c.fp[static_cast<std::size_t>(i)];
    fn += c.fn[static_cast<std::size_t>(i)];
  }
  const long denom = 2 * tp + fp + fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

// Per-class F1 = 2*TP / (2*TP + FP + FN), defined as 0 when the denominator
// is 0.
inline double per_class_f1(const ConfusionCounts& c, int cls) {
  const auto i = static_cast<std::size_t>(cls);
  const long denom = 2 * c.tp[i] + c.fp[i] + c.fn[i];
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp[i]) / static_cast<double>(denom);
}

// F1_macro = mean of the per-class F1 scores.
inline double macro_f1(const ConfusionCounts& c) {
  if (c.n_classes() == 0) return 0.0;
  double sum = 0.0;
  for (int i = 0; i < c.n_classes(); ++i) sum += per_class_f1(c, i);
  return sum / static_cast<double>(c.n_classes());
}

struct SetPRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Token-set precision/recall/F1 between a predicted salient set and a gold
// rationale set.
inline SetPRF set_prf(const std::set<std::size_t>& pred, const std::set<std::size_t>& gold) {
  std::size_t inter = 0;
  for (auto i : pred)
    if (gold.count(i)) ++inter;
  SetPRF r;
  r.precision = pred.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(pred.size());
  r.recall = gold.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(gold.size());
  r.f1 = (r.precision + r.recall) == 0.0
             ? 0.0
             : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

// Agreement with a human rationale: predicted-salient tokens are either the
// top-k by score or everything at or above a threshold.
struct SaliencySelection {
  enum class Mode { top_k, threshold } mode = Mode::threshold;
  std::size_t k = 0;
  double tau = 0.5;

  static SaliencySelection top_k(std::size_t k) { return {Mode::top_k, k, 0.0}; }
  static SaliencySelection threshold(double tau) { return {Mode::threshold, 0, tau}; }
};

inline SetPRF saliency_agreement(const std::vector<double>& scores,
                                 const std::vector<int>& gold_mask,
                                 const SaliencySelection& sel) {
  if (scores.size() != gold_mask.size())
    throw ShapeMismatch("saliency scores and gold mask lengths disagree");
  std::set<std::size_t> pred, gold;
  for (std::size_t i = 0; i < gold_mask.size(); ++i)
    if (gold_mask[i]) gold.insert(i);
  if (sel.mode == SaliencySelection::Mode::threshold) {
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= sel.tau) pred.insert(i);
  } else {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    for (std::size_t i = 0; i < std::min(sel.k, idx.size()); ++i) pred.insert(idx[i]);
  }
  return set_prf(pred, gold);
}

}  // namespace salcls
