#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/metrics.hpp"
#include "salcls/model.hpp"
#include "salcls/train.hpp"

namespace salcls {

enum class AttributionMethod {
  model_saliency_head,
  gradient_saliency,
  input_x_gradient,
  occlusion
};

inline const char* to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::model_saliency_head: return "model_saliency_head";
    case AttributionMethod::gradient_saliency: return "gradient_saliency";
    case AttributionMethod::input_x_gradient: return "input_x_gradient";
    case AttributionMethod::occlusion: return "occlusion";
  }
  return "?";
}

// Per-token attribution scores over the document's real tokens.
struct TokenAttribution {
  std::string doc_id;
  std::vector<double> scores;
  AttributionMethod method = AttributionMethod::model_saliency_head;
};

namespace detail {

struct ForwardGrad {
  Network::Activations acts;
  Mat dx0;          // gradient of the predicted-class logit at the embeddings
  std::size_t real; // real token count (after truncation)
  int predicted;
};

// Backpropagates the argmax-class logit to the input embeddings.
inline ForwardGrad logit_input_gradient(const Network& net, const Document& doc) {
  const ModelConfig& cfg = net.config();
  Tokenization tok = tokenize_for_model(doc.text, cfg);
  ForwardGrad fg;
  fg.acts = net.forward(tok.ids);
  fg.real = std::min(static_cast<std::size_t>(cfg.l_max), tok.ids.size());
  fg.predicted = static_cast<int>(
      std::max_element(fg.acts.class_probs.begin(), fg.acts.class_probs.end()) -
      fg.acts.class_probs.begin());
  Vec dlogits(fg.acts.class_logits.size(), 0.0);
  dlogits[static_cast<std::size_t>(fg.predicted)] = 1.0;
  Vec grad(net.params().size(), 0.0);
  net.backward(fg.acts, dlogits, Mat{}, grad, &fg.dx0);
  return fg;
}

}  // namespace detail

// Native explainer: sigmoid of the saliency-head logits.
inline TokenAttribution saliency_head_attribution(const Network& net, const Document& doc) {
  Prediction p = predict_one(net, doc);
  return {doc.doc_id, p.saliency_scores, AttributionMethod::model_saliency_head};
}

// Score per token: L2 norm of d(predicted-class logit)/d(token embedding).
inline TokenAttribution gradient_saliency(const Network& net, const Document& doc) {
  const auto fg = detail::logit_input_gradient(net, doc);
  TokenAttribution att{doc.doc_id, {}, AttributionMethod::gradient_saliency};
  const std::size_t d = static_cast<std::size_t>(net.config().d_model);
  for (std::size_t i = 0; i < fg.real; ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += fg.dx0.at(i, c) * fg.dx0.at(i, c);
    att.scores.push_back(std::sqrt(sq));
  }
  return att;
}

// Score per token: sum over embedding dims of embedding * gradient; the sign
// is preserved. The embedding here is the token's vocabulary vector (the
// position embedding is excluded from the product).
inline TokenAttribution input_x_gradient(const Network& net, const Document& doc) {
  const auto fg = detail::logit_input_gradient(net, doc);
  TokenAttribution att{doc.doc_id, {}, AttributionMethod::input_x_gradient};
  const ModelConfig& cfg = net.config();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const auto& layout = net.layout();
  for (std::size_t i = 0; i < fg.real; ++i) {
    const auto id = static_cast<std::size_t>(fg.acts.ids[i]);
    const double* emb = &net.params()[layout.tok_emb + id * d];
    double score = 0.0;
    for (std::size_t c = 0; c < d; ++c) score += emb[c] * fg.dx0.at(i, c);
    att.scores.push_back(score);
  }
  return att;
}

// Score per token: predicted-class probability drop when the token is
// replaced by the mask symbol (positions preserved). One forward per token.
inline TokenAttribution occlusion(const Network& net, const Document& doc) {
  const ModelConfig& cfg = net.config();
  Tokenization tok = tokenize_for_model(doc.text, cfg);
  auto base = net.forward(tok.ids);
  const int predicted = static_cast<int>(
      std::max_element(base.class_probs.begin(), base.class_probs.end()) -
      base.class_probs.begin());
  const double base_prob = base.class_probs[static_cast<std::size_t>(predicted)];
  const std::size_t real = std::min(static_cast<std::size_t>(cfg.l_max), tok.ids.size());

  TokenAttribution att{doc.doc_id, {}, AttributionMethod::occlusion};
  for (std::size_t i = 0; i < real; ++i) {
    std::vector<int> ids = tok.ids;
    ids[i] = kMaskId;
    auto occluded = net.forward(ids);
    att.scores.push_back(base_prob - occluded.class_probs[static_cast<std::size_t>(predicted)]);
  }
  return att;
}

inline TokenAttribution attribute(const Network& net, const Document& doc,
                                  AttributionMethod method) {
  switch (method) {
    case AttributionMethod::model_saliency_head: return saliency_head_attribution(net, doc);
    case AttributionMethod::gradient_saliency: return gradient_saliency(net, doc);
    case AttributionMethod::input_x_gradient: return input_x_gradient(net, doc);
    case AttributionMethod::occlusion: return occlusion(net, doc);
  }
  throw ConfigError("unknown attribution method");
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct MetricsReport {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<double> per_class;
  // token-level agreement of the native saliency head with gold rationales,
  // threshold tau = 0.5; negative when no document had a rationale
  double mean_saliency_f1 = -1.0;
  std::size_t rationale_docs = 0;
  std::size_t total_docs = 0;

  json to_json(const LabelSet& labels) const {
    json per = json::object();
    for (int i = 0; i < static_cast<int>(per_class.size()); ++i)
      per[labels.name(i)] = per_class[static_cast<std::size_t>(i)];
    json j{{"micro_f1", micro},
           {"macro_f1", macro},
           {"per_class_f1", per},
           {"total_docs", total_docs},
           {"rationale_docs", rationale_docs}};
    if (rationale_docs > 0) j["mean_saliency_f1"] = mean_saliency_f1;
    return j;
  }
};

// Converts a document's gold rationale character spans into a mask over the
// model tokenization (real tokens only).
inline std::vector<int> rationale_token_mask(const Document& doc,
                                             const std::vector<CharSpan>& token_spans) {
  std::vector<int> mask(token_spans.size(), 0);
  for (std::size_t i = 0; i < token_spans.size(); ++i)
    for (const auto& span : doc.gold_rationale)
      if (token_spans[i].overlaps(span)) {
        mask[i] = 1;
        break;
      }
  return mask;
}

// Agreement of one prediction's saliency scores with the document's gold
// rationale.
inline SetPRF rationale_agreement(const Prediction& pred, const Document& doc,
                                  const SaliencySelection& sel) {
  if (doc.gold_rationale.empty()) throw NoGoldRationale(doc.doc_id);
  const std::vector<int> mask = rationale_token_mask(doc, pred.token_spans);
  return saliency_agreement(pred.saliency_scores, mask, sel);
}

inline MetricsReport evaluate(const Checkpoint& ck, const Corpus& corpus,
                              double tau = 0.5) {
  bool any_gold = false;
  for (const auto& doc : corpus.documents)
    if (doc.gold_label) any_gold = true;
  if (!any_gold) throw NoGoldLabels("evaluation corpus has no gold labels");
  if (!(ck.labels == corpus.labels))
    throw ManifestMismatch("checkpoint label set does not match the corpus labels");

  Network net(ck.model_config, ck.params, ck.seed);
  MetricsReport report;
  report.total_docs = corpus.documents.size();

  std::vector<int> gold, pred;
  double saliency_f1_sum = 0.0;
  for (const auto& doc : corpus.documents) {
    Prediction p = predict_one(net, doc);
    if (doc.gold_label) {
      gold.push_back(*doc.gold_label);
      pred.push_back(p.label);
    }
    if (!doc.gold_rationale.empty()) {
      const std::vector<int> mask = rationale_token_mask(doc, p.token_spans);
      saliency_f1_sum +=
          saliency_agreement(p.saliency_scores, mask, SaliencySelection::threshold(tau)).f1;
      ++report.rationale_docs;
    }
  }

  const ConfusionCounts counts = ConfusionCounts::from_pairs(gold, pred, corpus.labels.size());
  report.micro = micro_f1(counts);
  report.macro = macro_f1(counts);
  for (int i = 0; i < corpus.labels.size(); ++i)
    report.per_class.push_back(per_class_f1(counts, i));
  if (report.rationale_docs > 0)
    report.mean_saliency_f1 = saliency_f1_sum / static_cast<double>(report.rationale_docs);
  return report;
}

}  // namespace salcls
