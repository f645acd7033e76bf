#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/metrics.hpp"
#include "salcls/model.hpp"

namespace salcls {

struct TrainConfig {
  double lambda = 0.7;          // saliency-loss mix, in [0,1]
  double learning_rate = 0.0;   // 0 = preset default
  int epochs = 3;               // grid is {1,2,3}
  double dropout = 0.1;         // grid spans 0.1..0.4
  int batch_size = 16;
  std::uint64_t seed = 7;
  bool filter_unconverged = false;
  bool fixed_positive_weight = false;  // true: w = 1.0; false: auto balance

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0,1]");
    if (epochs < 1 || epochs > 3) throw ConfigError("epochs must be in {1,2,3}");
    if (dropout < 0.1 || dropout > 0.4)
      throw ConfigError("dropout must be within [0.1, 0.4]");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be non-negative");
  }

  double effective_learning_rate(EncoderPreset preset) const {
    if (learning_rate > 0.0) return learning_rate;
    return preset == EncoderPreset::pretrained_adapter ? 2e-5 : 1e-3;
  }

  std::string w_policy() const {
    return fixed_positive_weight ? "fixed_1.0" : "auto_balance";
  }
};

// ---------------------------------------------------------------------------
// Collation
// ---------------------------------------------------------------------------

struct CollatedBatch {
  std::vector<std::vector<int>> token_ids;      // each row length l_max
  std::vector<int> class_targets;
  std::vector<SaliencyMask> saliency_targets;   // each of length l_max
  std::vector<std::vector<int>> pad_masks;      // each row length l_max
  std::size_t size() const { return token_ids.size(); }
};

// Pads/truncates every example to l_max. A stored mask whose length does not
// match the current tokenization is re-aligned from its salient words.
inline CollatedBatch collate(const std::vector<std::pair<const Document*, const PseudoExample*>>& batch,
                             const ModelConfig& cfg) {
  if (batch.empty()) throw EmptyTrainingSet("collate received an empty batch");
  const std::size_t L = static_cast<std::size_t>(cfg.l_max);
  CollatedBatch out;
  for (const auto& [doc, ex] : batch) {
    Tokenization tok = tokenize_for_model(doc->text, cfg);
    SaliencyMask mask = ex->final_mask;
    if (mask.length() != tok.ids.size()) {
      const auto& words = ex->history.back().salient_words;
      mask = align_words_to_mask(words, tok.ids.size(), tok.spans, doc->text);
      if (mask.length() != tok.ids.size())
        throw AlignmentFailure(doc->doc_id, "re-alignment produced a bad mask length");
    }
    std::vector<int> ids(L, kPadId);
    std::vector<int> pad(L, 0);
    const std::size_t real = std::min(L, tok.ids.size());
    for (std::size_t i = 0; i < real; ++i) {
      ids[i] = tok.ids[i];
      pad[i] = 1;
    }
    std::vector<std::size_t> indices;
    for (std::size_t i : mask.salient_indices())
      if (i < real) indices.push_back(i);
    out.token_ids.push_back(std::move(ids));
    out.pad_masks.push_back(std::move(pad));
    out.saliency_targets.emplace_back(L, std::move(indices));
    out.class_targets.push_back(ex->final_label);
  }
  return out;
}

// Positive-term weight for the batch: #non-salient real tokens over #salient
// real tokens, floored at 1. Falls back to 1 when the batch has no positives.
inline double batch_positive_weight(const CollatedBatch& batch) {
  std::size_t salient = 0, real = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < batch.pad_masks[b].size(); ++i)
      if (batch.pad_masks[b][i]) ++real;
    salient += batch.saliency_targets[b].salient_indices().size();
  }
  if (salient == 0) return 1.0;
  return std::max(1.0, static_cast<double>(real - salient) / static_cast<double>(salient));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(Vec& params, const Vec& grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      const double mh = m_[i] / bc1;
      const double vh = v_[i] / bc2;
      params[i] -= lr * mh / (std::sqrt(vh) + kEps);
    }
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  Vec m_, v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: binary blob + manifest sidecar
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model_config;
  LabelSet labels;
  double lambda = 0.7;
  std::string w_policy = "auto_balance";
  std::uint64_t seed = 0;
  Vec params;

  static std::string manifest_path(const std::string& blob_path) {
    return blob_path + ".json";
  }

  void save(const std::string& blob_path) const {
    Network net(model_config, params, seed);
    // temp-file + rename keeps partially written checkpoints invisible
    const std::string tmp = blob_path + ".tmp";
    net.save(tmp);
    std::filesystem::rename(tmp, blob_path);
    json manifest{{"model_config", model_config.to_json()},
                  {"label_set", labels.names()},
                  {"l_max", model_config.l_max},
                  {"lambda", lambda},
                  {"w_policy", w_policy},
                  {"seed", seed}};
    const std::string mtmp = manifest_path(blob_path) + ".tmp";
    std::ofstream out(mtmp, std::ios::trunc);
    if (!out) throw IoFailure("cannot write manifest: " + mtmp);
    out << manifest.dump(2) << '\n';
    out.close();
    std::filesystem::rename(mtmp, manifest_path(blob_path));
  }

  static Checkpoint load(const std::string& blob_path) {
    std::ifstream in(manifest_path(blob_path));
    if (!in) throw IoFailure("cannot read manifest: " + manifest_path(blob_path));
    json manifest;
    try {
      in >> manifest;
    } catch (const json::parse_error& e) {
      throw ManifestMismatch(std::string("bad manifest: ") + e.what());
    }
    Checkpoint ck;
    try {
      ck.model_config = ModelConfig::from_json(manifest.at("model_config"));
      ck.labels = LabelSet(manifest.at("label_set").get<std::vector<std::string>>());
      ck.lambda = manifest.at("lambda").get<double>();
      ck.w_policy = manifest.at("w_policy").get<std::string>();
      ck.seed = manifest.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ManifestMismatch(std::string("bad manifest: ") + e.what());
    }
    ck.params = Network::load_blob(blob_path);
    if (ck.params.size() != ParamLayout(ck.model_config).total)
      throw ManifestMismatch("checkpoint blob does not match its manifest config");
    if (ck.labels.size() != ck.model_config.n_classes)
      throw ManifestMismatch("label set size does not match n_classes");
    return ck;
  }
};

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

struct Prediction {
  std::string doc_id;
  int label = 0;
  Vec class_probs;
  Vec saliency_scores;              // sigmoid(y_hat) for real tokens only
  std::vector<std::string> tokens;  // the real tokens the scores align to
  std::vector<CharSpan> token_spans;
};

inline Prediction predict_one(const Network& net, const Document& doc) {
  const ModelConfig& cfg = net.config();
  Tokenization tok = tokenize_for_model(doc.text, cfg);
  auto acts = net.forward(tok.ids);
  const std::size_t real = std::min(static_cast<std::size_t>(cfg.l_max), tok.ids.size());

  Prediction p;
  p.doc_id = doc.doc_id;
  p.class_probs = acts.class_probs;
  p.label = static_cast<int>(std::max_element(p.class_probs.begin(), p.class_probs.end()) -
                             p.class_probs.begin());
  const Vec logits = net.saliency_logits_for(acts);
  for (std::size_t i = 0; i < real; ++i) {
    p.saliency_scores.push_back(sigmoid(std::clamp(logits[i], -kLogitClamp, kLogitClamp)));
    p.tokens.push_back(tok.tokens[i]);
    p.token_spans.push_back(tok.spans[i]);
  }
  return p;
}

inline std::vector<Prediction> predict(const Checkpoint& ck, const LabelSet& request_labels,
                                       const std::vector<Document>& docs) {
  if (!(ck.labels == request_labels))
    throw ManifestMismatch("checkpoint label set does not match the requested labels");
  Network net(ck.model_config, ck.params, ck.seed);
  std::vector<Prediction> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) out.push_back(predict_one(net, doc));
  return out;
}

// ---------------------------------------------------------------------------
// Per-example joint gradient
// ---------------------------------------------------------------------------

struct ExampleLosses {
  double l_c = 0.0;
  double l_e = 0.0;
};

// Computes both losses for one forward pass and accumulates the gradient of
// (l_c + lambda * l_e) * inv_batch into grad. The saliency path feeds the
// head parameters directly and injects into the last layer's last attention
// head, flowing on into the encoder.
inline ExampleLosses accumulate_example_gradient(const Network& net,
                                                 const Network::Activations& acts,
                                                 int gold, const SaliencyMask& target,
                                                 const std::vector<int>& pad_mask,
                                                 double positive_weight, double lambda,
                                                 double inv_batch, Vec& grad) {
  const auto& layout = net.layout();
  const std::size_t L = static_cast<std::size_t>(net.config().l_max);

  ExampleLosses losses;
  losses.l_c = classification_loss(acts.class_logits, gold);
  Vec dlogits = acts.class_probs;
  dlogits[static_cast<std::size_t>(gold)] -= 1.0;
  for (double& g : dlogits) g *= inv_batch;

  const Mat& att = extract_attention_matrix(acts.out);
  const SaliencyHead head = net.saliency_head();
  const Vec sal = saliency_logits(att, head);
  losses.l_e = saliency_loss(sal, target, pad_mask, positive_weight);

  Mat datt;
  if (lambda > 0.0) {
    const Vec dz = saliency_loss_grad_logits(sal, target, pad_mask, positive_weight);
    const double scale = lambda * inv_batch;
    datt = Mat(L, L);
    for (std::size_t i = 0; i < L; ++i) {
      if (dz[i] == 0.0) continue;
      const double gi = dz[i] * scale;
      grad[layout.sal_b + i] += gi;
      const double* att_row = att.row(i);
      for (std::size_t j = 0; j < L; ++j) {
        grad[layout.sal_w + j] += gi * att_row[j];
        datt.at(i, j) = gi * head.weight[j];
      }
    }
  }
  net.backward(acts, dlogits, datt, grad);
  return losses;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepLog {
  int epoch = 0;
  int step = 0;  // -1 marks the per-epoch mean line
  double l_c = 0.0;
  double l_e = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::string checkpoint_path;  // selected checkpoint (best dev or last epoch)
  std::vector<StepLog> log;
  int selected_epoch = 0;
  double best_dev_micro_f1 = -1.0;  // -1 when no dev selection ran
  std::size_t trained_examples = 0;
};

inline void write_training_log(const std::string& path, const std::vector<StepLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoFailure("cannot write training log: " + path);
  for (const auto& s : log) {
    out << json{{"epoch", s.epoch}, {"step", s.step}, {"l_c", s.l_c},
                {"l_e", s.l_e},     {"total", s.total}}
               .dump()
        << '\n';
  }
}

namespace detail {

inline double dev_micro_f1(const Network& net, const Corpus& dev) {
  std::vector<int> gold, pred;
  for (const auto& doc : dev.documents) {
    if (!doc.gold_label) continue;
    gold.push_back(*doc.gold_label);
    pred.push_back(predict_one(net, doc).label);
  }
  if (gold.empty()) return -1.0;
  return micro_f1(ConfusionCounts::from_pairs(gold, pred, dev.labels.size()));
}

}  // namespace detail

// Minibatch training of the joint objective l = l_c + lambda * l_e.
// Deterministic for a fixed (seed, config, data) triple.
inline TrainResult train(const std::vector<PseudoExample>& pseudo, const Corpus& corpus,
                         const ModelConfig& model_cfg_in, const TrainConfig& train_cfg,
                         const std::string& checkpoint_dir,
                         const Corpus* dev = nullptr) {
  train_cfg.validate();
  ModelConfig model_cfg = model_cfg_in;
  model_cfg.dropout = train_cfg.dropout;
  model_cfg.n_classes = corpus.labels.size();
  model_cfg.validate();

  std::vector<const PseudoExample*> examples;
  for (const auto& ex : pseudo)
    if (!train_cfg.filter_unconverged || ex.converged) examples.push_back(&ex);
  if (examples.empty())
    throw EmptyTrainingSet(train_cfg.filter_unconverged
                               ? "no converged pseudo-examples to train on"
                               : "no pseudo-examples to train on");

  std::unordered_map<std::string, const Document*> by_id;
  for (const auto& doc : corpus.documents) by_id.emplace(doc.doc_id, &doc);
  std::vector<std::pair<const Document*, const PseudoExample*>> items;
  for (const auto* ex : examples) {
    auto it = by_id.find(ex->doc_id);
    if (it == by_id.end())
      throw AlignmentFailure(ex->doc_id, "pseudo-example has no matching corpus document");
    items.emplace_back(it->second, ex);
  }

  std::filesystem::create_directories(checkpoint_dir);

  Network net(model_cfg, train_cfg.seed);
  Adam adam(net.params().size());
  const double lr = train_cfg.effective_learning_rate(model_cfg.preset);
  const double lambda = train_cfg.lambda;

  std::mt19937_64 rng(train_cfg.seed);
  TrainResult result;
  result.trained_examples = items.size();
  std::string best_path;
  double best_dev = -2.0;

  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_lc = 0.0, epoch_le = 0.0;
    int steps = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(train_cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(train_cfg.batch_size));
      std::vector<std::pair<const Document*, const PseudoExample*>> chunk;
      for (std::size_t i = start; i < stop; ++i) chunk.push_back(items[order[i]]);
      CollatedBatch batch = collate(chunk, model_cfg);
      const double B = static_cast<double>(batch.size());
      const double w =
          train_cfg.fixed_positive_weight ? 1.0 : batch_positive_weight(batch);

      Vec grad(net.params().size(), 0.0);
      double batch_lc = 0.0, batch_le = 0.0;

      for (std::size_t b = 0; b < batch.size(); ++b) {
        auto acts = net.forward(batch.token_ids[b], &rng);
        const ExampleLosses losses = accumulate_example_gradient(
            net, acts, batch.class_targets[b], batch.saliency_targets[b],
            batch.pad_masks[b], w, lambda, 1.0 / B, grad);
        batch_lc += losses.l_c;
        batch_le += losses.l_e;
      }

      batch_lc /= B;
      batch_le /= B;
      const LossBreakdown lb = total_loss(batch_lc, batch_le, lambda, w);
      if (!std::isfinite(lb.total))
        throw DivergenceDetected("non-finite loss at epoch " + std::to_string(epoch));

      adam.step(net.params(), grad, lr);

      ++steps;
      epoch_lc += batch_lc;
      epoch_le += batch_le;
      result.log.push_back({epoch, steps, lb.class_loss, lb.saliency_loss, lb.total});
    }

    result.log.push_back({epoch, -1, epoch_lc / steps, epoch_le / steps,
                          (epoch_lc + lambda * epoch_le) / steps});

    Checkpoint ck{model_cfg, corpus.labels, lambda, train_cfg.w_policy(),
                  train_cfg.seed, net.params()};
    const std::string path =
        (std::filesystem::path(checkpoint_dir) / ("epoch-" + std::to_string(epoch) + ".bin"))
            .string();
    ck.save(path);

    if (dev) {
      const double f1 = detail::dev_micro_f1(net, *dev);
      if (f1 >= 0.0 && f1 > best_dev) {
        best_dev = f1;
        best_path = path;
        result.selected_epoch = epoch;
        result.best_dev_micro_f1 = f1;
      }
    }
    if (!dev || best_path.empty()) {
      best_path = path;
      result.selected_epoch = epoch;
    }
  }

  result.checkpoint_path = best_path;
  return result;
}

}  // namespace salcls
