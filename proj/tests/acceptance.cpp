// Acceptance suite: one pass/fail line per criterion, non-zero exit when any
// blocking criterion fails. Runs from any working directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "salcls/explain.hpp"
#include "salcls/metrics.hpp"
#include "salcls/model.hpp"
#include "salcls/rounds.hpp"
#include "salcls/train.hpp"
#include "support/synthetic.hpp"
#include "support/tmpdir.hpp"

using namespace salcls;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

using CriterionFn = std::function<Outcome()>;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// --------------------------------------------------------------------------
// 1. Loss algebra: total == l_c + lambda*l_e (1e-6) on 100 random triples;
//    a lambda=0 run leaves the saliency head bit-identical to initialization.
// --------------------------------------------------------------------------
Outcome criterion_loss_algebra() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> loss_dist(0.0, 10.0), lambda_dist(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double lc = loss_dist(rng), le = loss_dist(rng), lambda = lambda_dist(rng);
    const LossBreakdown lb = total_loss(lc, le, lambda);
    if (std::abs(lb.total - (lc + lambda * le)) > 1e-6)
      return {false, "total != l_c + lambda*l_e at triple " + std::to_string(i)};
  }

  testutil::TmpDir tmp("acc1");
  Corpus corpus = synth::make_corpus({.n_docs = 24, .seed = 91});
  LexiconClassOracle co(synth::lexicon_spec());
  LexiconSaliencyOracle so(synth::lexicon_spec());
  auto pseudo = generate_pseudo_labels(corpus, co, so, RoundConfig{}).examples;

  ModelConfig mcfg = ModelConfig::tiny_preset(2, 32);
  mcfg.vocab_size = 512;
  TrainConfig tcfg;
  tcfg.lambda = 0.0;
  tcfg.epochs = 1;
  tcfg.batch_size = 8;
  tcfg.seed = 5;

  ModelConfig init_cfg = mcfg;
  init_cfg.dropout = tcfg.dropout;
  init_cfg.n_classes = corpus.labels.size();
  Network init(init_cfg, tcfg.seed);

  TrainResult r = train(pseudo, corpus, mcfg, tcfg, tmp.file("ck"));
  Checkpoint ck = Checkpoint::load(r.checkpoint_path);
  const ParamLayout layout(ck.model_config);
  for (std::size_t i = 0; i < static_cast<std::size_t>(ck.model_config.l_max); ++i) {
    if (ck.params[layout.sal_w + i] != init.params()[layout.sal_w + i] ||
        ck.params[layout.sal_b + i] != init.params()[layout.sal_b + i])
      return {false, "lambda=0 run modified the saliency head at index " + std::to_string(i)};
  }
  return {true, "100 triples exact to 1e-6; saliency head bit-identical under lambda=0"};
}

// --------------------------------------------------------------------------
// 2. Hand-value BCE: (y=1, yhat=0, w=1) -> 0.693147; (y=1, yhat=0, w=2) ->
//    1.386294, tolerance 1e-5.
// --------------------------------------------------------------------------
Outcome criterion_bce_hand_values() {
  const std::vector<int> pad = {1};
  const double v1 = saliency_loss({0.0}, SaliencyMask(1, {0}), pad, 1.0);
  const double v2 = saliency_loss({0.0}, SaliencyMask(1, {0}), pad, 2.0);
  if (std::abs(v1 - 0.693147) > 1e-5) return {false, "w=1 case gave " + fmt(v1)};
  if (std::abs(v2 - 1.386294) > 1e-5) return {false, "w=2 case gave " + fmt(v2)};
  return {true, "0.693147 and 1.386294 within 1e-5"};
}

// --------------------------------------------------------------------------
// 3. Gradient check: analytic d l_e/dW, d l_e/db vs central differences
//    (eps=1e-4) on 20 random instances with L_max=8; max rel error < 1e-3.
// --------------------------------------------------------------------------
Outcome criterion_gradient_check() {
  std::mt19937_64 rng(501);
  std::normal_distribution<double> dist(0.0, 1.0);
  const std::size_t L = 8;
  const double eps = 1e-4;
  double max_rel = 0.0;

  for (int iter = 0; iter < 20; ++iter) {
    Mat att(L, L);
    for (auto& v : att.data) v = std::abs(dist(rng));
    SaliencyHead head;
    for (std::size_t i = 0; i < L; ++i) {
      head.weight.push_back(dist(rng));
      head.bias.push_back(dist(rng));
    }
    std::vector<std::size_t> idx;
    std::vector<int> pad(L, 1);
    for (std::size_t i = 0; i < L; ++i)
      if (rng() % 2) idx.push_back(i);
    SaliencyMask target(L, idx);
    const double w = 1.0 + std::abs(dist(rng));

    Vec dw, db;
    saliency_loss_grad_head(att, head, target, pad, w, dw, db);
    auto loss_at = [&](const SaliencyHead& h) {
      return saliency_loss(saliency_logits(att, h), target, pad, w);
    };
    for (std::size_t j = 0; j < L; ++j) {
      for (int which = 0; which < 2; ++which) {
        SaliencyHead hp = head, hm = head;
        auto& vp = which == 0 ? hp.weight[j] : hp.bias[j];
        auto& vm = which == 0 ? hm.weight[j] : hm.bias[j];
        vp += eps;
        vm -= eps;
        const double fd = (loss_at(hp) - loss_at(hm)) / (2 * eps);
        const double an = which == 0 ? dw[j] : db[j];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
      }
    }
  }
  if (max_rel >= 1e-3) return {false, "max relative error " + fmt(max_rel)};
  return {true, "20 instances, max relative error " + fmt(max_rel)};
}

// --------------------------------------------------------------------------
// 4. Attention provenance: perturbing any head other than (last layer, last
//    head) changes the saliency logits by exactly 0.
// --------------------------------------------------------------------------
Outcome criterion_attention_provenance() {
  ModelConfig cfg = ModelConfig::tiny_preset(2, 16);
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 64;
  cfg.dropout = 0.0;
  Network net(cfg, 77);
  std::vector<int> ids;
  for (int i = 0; i < 9; ++i) ids.push_back(2 + i);
  auto acts = net.forward(ids);
  const Vec base = net.saliency_logits_for(acts);

  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      if (l == cfg.n_layers - 1 && h == cfg.n_heads - 1) continue;
      auto tampered = acts;
      for (auto& v : tampered.out.att(l, h).data) v += 3.14;
      const Vec after = net.saliency_logits_for(tampered);
      for (std::size_t i = 0; i < base.size(); ++i)
        if (after[i] != base[i])
          return {false, "perturbing layer " + std::to_string(l) + " head " +
                             std::to_string(h) + " moved logit " + std::to_string(i)};
    }
  }
  return {true, "all non-final heads are inert, change exactly 0"};
}

// --------------------------------------------------------------------------
// 5. F1 oracle equivalence: micro/macro equal brute-force recomputation from
//    raw (gold, pred) lists on 1000 fuzzed instances, exact equality; worked
//    example TP=(2,1) FP=(1,0) FN=(0,1) -> micro 0.75, macro 0.7333.
// --------------------------------------------------------------------------
Outcome criterion_f1_oracle() {
  ConfusionCounts worked(2);
  worked.tp = {2, 1};
  worked.fp = {1, 0};
  worked.fn = {0, 1};
  if (std::abs(micro_f1(worked) - 0.75) > 1e-12)
    return {false, "worked micro gave " + fmt(micro_f1(worked))};
  if (std::abs(macro_f1(worked) - 0.7333) > 1e-4)
    return {false, "worked macro gave " + fmt(macro_f1(worked))};

  std::mt19937_64 rng(777);
  for (int iter = 0; iter < 1000; ++iter) {
    std::uniform_int_distribution<int> n_dist(1, 3), len_dist(0, 15);
    const int n = n_dist(rng);
    const int len = len_dist(rng);
    std::vector<int> gold(static_cast<std::size_t>(len)), pred(static_cast<std::size_t>(len));
    std::uniform_int_distribution<int> cls(0, n - 1);
    for (auto& g : gold) g = cls(rng);
    for (auto& p : pred) p = cls(rng);

    // brute force from raw pairs
    double macro_sum = 0.0;
    long tp_all = 0, fp_all = 0, fn_all = 0;
    for (int c = 0; c < n; ++c) {
      long tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        if (pred[i] == c && gold[i] == c) ++tp;
        if (pred[i] == c && gold[i] != c) ++fp;
        if (pred[i] != c && gold[i] == c) ++fn;
      }
      tp_all += tp;
      fp_all += fp;
      fn_all += fn;
      const long denom = 2 * tp + fp + fn;
      macro_sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    const long denom_micro = 2 * tp_all + fp_all + fn_all;
    const double brute_micro =
        denom_micro == 0 ? 0.0
                         : 2.0 * static_cast<double>(tp_all) / static_cast<double>(denom_micro);
    const double brute_macro = macro_sum / static_cast<double>(n);

    auto counts = ConfusionCounts::from_pairs(gold, pred, n);
    if (micro_f1(counts) != brute_micro)
      return {false, "micro mismatch at instance " + std::to_string(iter)};
    if (macro_f1(counts) != brute_macro)
      return {false, "macro mismatch at instance " + std::to_string(iter)};
  }
  return {true, "1000 fuzzed instances exactly equal; worked example checks out"};
}

// --------------------------------------------------------------------------
// 6. Round-engine properties: idempotent lexicon oracles converge in <= 2
//    records; an oscillating mock with max_rounds=3 gives exactly 4 records,
//    unconverged; identical runs produce byte-identical files.
// --------------------------------------------------------------------------
struct OscillatingOracle final : ClassOracle {
  mutable std::atomic<int> calls{0};
  int predict(const std::string&, const LabelSet& labels,
              const std::vector<std::string>&) const override {
    return calls.fetch_add(1) % labels.size();
  }
};

Outcome criterion_round_engine() {
  testutil::TmpDir tmp("acc6");
  Corpus corpus = synth::make_corpus({.n_docs = 40, .seed = 92});
  LexiconClassOracle co(synth::lexicon_spec());
  LexiconSaliencyOracle so(synth::lexicon_spec());
  RoundConfig cfg;
  cfg.max_rounds = 3;

  auto result = generate_pseudo_labels(corpus, co, so, cfg);
  if (result.examples.size() != 40) return {false, "lost documents"};
  for (const auto& ex : result.examples) {
    if (ex.history.size() > 2)
      return {false, "doc " + ex.doc_id + " took " + std::to_string(ex.history.size()) +
                         " records"};
    if (!ex.converged) return {false, "doc " + ex.doc_id + " did not converge"};
  }

  OscillatingOracle oc;
  struct FixedSaliency final : SaliencyOracle {
    std::vector<std::string> extract(const std::string&, const std::string&) const override {
      return {"the"};
    }
  } fixed;
  Corpus one;
  one.labels = corpus.labels;
  Document d;
  d.doc_id = "osc";
  d.text = "the game of the season";
  one.documents.push_back(d);
  auto osc_result = generate_pseudo_labels(one, oc, fixed, cfg);
  if (osc_result.examples.size() != 1) return {false, "oscillating doc failed"};
  if (osc_result.examples[0].history.size() != 4)
    return {false, "oscillating history length " +
                       std::to_string(osc_result.examples[0].history.size())};
  if (osc_result.examples[0].converged) return {false, "oscillating doc converged"};

  RoundConfig two;
  auto ra = generate_pseudo_labels(corpus, co, so, two);
  auto rb = generate_pseudo_labels(corpus, co, so, two);
  write_pseudo_examples(tmp.file("a.jsonl"), ra.examples, corpus.labels);
  write_pseudo_examples(tmp.file("b.jsonl"), rb.examples, corpus.labels);
  std::ifstream fa(tmp.file("a.jsonl"), std::ios::binary), fb(tmp.file("b.jsonl"), std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(fa)), {});
  const std::string bb((std::istreambuf_iterator<char>(fb)), {});
  if (ba != bb || ba.empty()) return {false, "pseudo-label files are not byte-identical"};
  return {true, "convergence, cap, and byte-identical reruns all hold"};
}

// --------------------------------------------------------------------------
// 7. Synthetic end-to-end: 400 planted-keyword docs, lexicon oracles, tiny
//    encoder (2/2/32, L_max=64), lambda=0.7, 3 epochs. Test micro-F1 >= 0.90
//    and mean saliency token-F1 (tau=0.5) >= 0.70.
// 8. Multi-task direction: the lambda=0.7 model's saliency F1 strictly
//    exceeds the lambda=0 model's; classification micro within 0.05.
// --------------------------------------------------------------------------
struct EndToEnd {
  MetricsReport joint;
  MetricsReport class_only;
};

const EndToEnd& end_to_end() {
  static const EndToEnd result = [] {
    testutil::TmpDir tmp("acc7");
    Corpus train_c = synth::make_corpus({.n_docs = 400, .seed = 13, .id_prefix = "tr"});
    Corpus test_c =
        synth::make_corpus({.n_docs = 100, .seed = 14, .id_prefix = "te"}, Split::test);
    LexiconClassOracle co(synth::lexicon_spec());
    LexiconSaliencyOracle so(synth::lexicon_spec());
    auto pseudo = generate_pseudo_labels(train_c, co, so, RoundConfig{}).examples;

    ModelConfig mcfg = ModelConfig::tiny_preset(2, 64);
    mcfg.vocab_size = 4096;
    TrainConfig tcfg;
    tcfg.lambda = 0.7;
    tcfg.epochs = 3;
    tcfg.batch_size = 4;
    tcfg.dropout = 0.1;
    tcfg.seed = 7;

    EndToEnd e;
    TrainResult rj = train(pseudo, train_c, mcfg, tcfg, tmp.file("joint"));
    e.joint = evaluate(Checkpoint::load(rj.checkpoint_path), test_c);

    TrainConfig t0 = tcfg;
    t0.lambda = 0.0;
    TrainResult r0 = train(pseudo, train_c, mcfg, t0, tmp.file("class_only"));
    e.class_only = evaluate(Checkpoint::load(r0.checkpoint_path), test_c);
    return e;
  }();
  return result;
}

Outcome criterion_synthetic_end_to_end() {
  const EndToEnd& e = end_to_end();
  std::string detail = "micro=" + fmt(e.joint.micro) +
                       " saliency_f1=" + fmt(e.joint.mean_saliency_f1);
  if (e.joint.micro < 0.90) return {false, detail + " (micro below 0.90)"};
  if (e.joint.mean_saliency_f1 < 0.70)
    return {false, detail + " (saliency F1 below 0.70)"};
  return {true, detail};
}

Outcome criterion_multitask_direction() {
  const EndToEnd& e = end_to_end();
  std::string detail = "saliency_f1 " + fmt(e.joint.mean_saliency_f1) + " vs " +
                       fmt(e.class_only.mean_saliency_f1) + "; micro " +
                       fmt(e.joint.micro) + " vs " + fmt(e.class_only.micro);
  if (!(e.joint.mean_saliency_f1 > e.class_only.mean_saliency_f1))
    return {false, detail + " (no strict saliency gain)"};
  if (std::abs(e.joint.micro - e.class_only.micro) > 0.05)
    return {false, detail + " (classification degraded beyond 0.05)"};
  return {true, detail};
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* name;
    CriterionFn fn;
    bool blocking;
  };
  const std::vector<Entry> criteria = {
      {1, "loss algebra + frozen saliency head at lambda=0", criterion_loss_algebra, true},
      {2, "weighted BCE hand values", criterion_bce_hand_values, true},
      {3, "saliency-head gradients vs finite differences", criterion_gradient_check, true},
      {4, "attention provenance (last layer, last head)", criterion_attention_provenance, true},
      {5, "micro/macro F1 vs brute force", criterion_f1_oracle, true},
      {6, "round-engine convergence, cap, determinism", criterion_round_engine, true},
      {7, "synthetic end-to-end thresholds", criterion_synthetic_end_to_end, true},
      {8, "multi-task direction check", criterion_multitask_direction, true},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.fn();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s  criterion %d: %s — %s (%.1fs)\n", out.ok ? "PASS" : "FAIL", c.id,
                c.name, out.detail.c_str(), secs);
    std::fflush(stdout);
    if (!out.ok && c.blocking) ++failures;
  }
  std::printf("SKIP  criterion 9: real-backbone IMDB subsample — needs external pretrained "
              "oracle models and a pretrained encoder; non-blocking stretch\n");

  if (failures > 0) {
    std::printf("ACCEPTANCE: %d blocking criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("ACCEPTANCE: all blocking criteria passed\n");
  return 0;
}
