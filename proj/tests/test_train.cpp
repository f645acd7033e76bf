#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "salcls/rounds.hpp"
#include "salcls/train.hpp"
#include "support/synthetic.hpp"
#include "support/tmpdir.hpp"

using namespace salcls;
using testutil::TmpDir;

namespace {

struct Pipeline {
  Corpus corpus;
  std::vector<PseudoExample> pseudo;
};

Pipeline make_pipeline(std::size_t n_docs, std::uint64_t seed) {
  Pipeline p;
  p.corpus = synth::make_corpus({.n_docs = n_docs, .seed = seed});
  LexiconClassOracle co(synth::lexicon_spec());
  LexiconSaliencyOracle so(synth::lexicon_spec());
  RoundConfig cfg;
  p.pseudo = generate_pseudo_labels(p.corpus, co, so, cfg).examples;
  return p;
}

ModelConfig small_model() {
  ModelConfig cfg = ModelConfig::tiny_preset(2, 32);
  cfg.vocab_size = 512;
  return cfg;
}

TrainConfig quick_train(std::uint64_t seed = 7) {
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 8;
  t.seed = seed;
  return t;
}

// Mirrors the config adjustments train() applies before initialization.
ModelConfig effective_cfg(ModelConfig m, const TrainConfig& t, const Corpus& c) {
  m.dropout = t.dropout;
  m.n_classes = c.labels.size();
  return m;
}

}  // namespace

TEST_CASE("collate pads to l_max with correct pad masks") {
  ModelConfig cfg = small_model();
  cfg.l_max = 8;

  Document d1{"a", "one two three", std::nullopt, {}};
  Document d2{"b", "one two three four five", std::nullopt, {}};
  PseudoExample e1, e2;
  e1.doc_id = "a";
  e1.final_label = 0;
  e1.final_mask = SaliencyMask(3, {1});
  e1.history.push_back({0, 0, {"two"}, e1.final_mask});
  e2.doc_id = "b";
  e2.final_label = 1;
  e2.final_mask = SaliencyMask(5, {0, 4});
  e2.history.push_back({0, 1, {"one", "five"}, e2.final_mask});

  auto batch = collate({{&d1, &e1}, {&d2, &e2}}, cfg);
  REQUIRE(batch.size() == 2);
  int ones1 = 0, ones2 = 0;
  for (int m : batch.pad_masks[0]) ones1 += m;
  for (int m : batch.pad_masks[1]) ones2 += m;
  CHECK(ones1 == 3);
  CHECK(ones2 == 5);
  CHECK(batch.token_ids[0].size() == 8);
  CHECK(batch.saliency_targets[0].length() == 8);
  CHECK(batch.saliency_targets[0].salient_indices() == std::vector<std::size_t>{1});
  CHECK(batch.saliency_targets[1].salient_indices() == std::vector<std::size_t>{0, 4});
  CHECK(batch.class_targets == std::vector<int>{0, 1});

  // saliency target is 0 at pad positions
  for (std::size_t i = 3; i < 8; ++i) CHECK(!batch.saliency_targets[0].is_salient(i));
}

TEST_CASE("collate re-aligns when the stored mask length mismatches") {
  ModelConfig cfg = small_model();
  cfg.l_max = 8;
  Document d{"a", "alpha team beta", std::nullopt, {}};
  PseudoExample e;
  e.doc_id = "a";
  e.final_label = 0;
  e.final_mask = SaliencyMask(7, {6});  // wrong length, wrong index
  e.history.push_back({0, 0, {"team"}, e.final_mask});

  auto batch = collate({{&d, &e}}, cfg);
  CHECK(batch.saliency_targets[0].salient_indices() == std::vector<std::size_t>{1});
}

TEST_CASE("collate truncates masks beyond l_max and rejects empty batches") {
  ModelConfig cfg = small_model();
  cfg.l_max = 2;
  Document d{"a", "one two team", std::nullopt, {}};
  PseudoExample e;
  e.doc_id = "a";
  e.final_label = 0;
  e.final_mask = SaliencyMask(3, {2});
  e.history.push_back({0, 0, {"team"}, e.final_mask});
  auto batch = collate({{&d, &e}}, cfg);
  CHECK(batch.saliency_targets[0].salient_indices().empty());

  CHECK_THROWS_AS(collate({}, cfg), EmptyTrainingSet);
}

TEST_CASE("batch positive weight balances positives, floored at 1") {
  CollatedBatch batch;
  batch.token_ids = {{1, 1, 1, 1}};
  batch.pad_masks = {{1, 1, 1, 1}};
  batch.class_targets = {0};
  batch.saliency_targets = {SaliencyMask(4, {0})};
  CHECK(batch_positive_weight(batch) == doctest::Approx(3.0));  // 3 neg / 1 pos

  batch.saliency_targets = {SaliencyMask(4, {0, 1, 2})};
  CHECK(batch_positive_weight(batch) == doctest::Approx(1.0));  // floor

  batch.saliency_targets = {SaliencyMask(4, {})};
  CHECK(batch_positive_weight(batch) == doctest::Approx(1.0));  // no positives
}

TEST_CASE("TrainConfig validation enforces the grids") {
  TrainConfig t;
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.epochs = 4;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lambda = 1.5;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.dropout = 0.7;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  CHECK_NOTHROW(t.validate());
  CHECK(t.effective_learning_rate(EncoderPreset::tiny) == doctest::Approx(1e-3));
  CHECK(t.effective_learning_rate(EncoderPreset::pretrained_adapter) == doctest::Approx(2e-5));
}

TEST_CASE("training with lambda=0 leaves the saliency head bit-identical") {
  TmpDir tmp("train_l0");
  Pipeline p = make_pipeline(24, 41);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg = quick_train();
  tcfg.lambda = 0.0;

  Network init(effective_cfg(mcfg, tcfg, p.corpus), tcfg.seed);
  TrainResult r = train(p.pseudo, p.corpus, mcfg, tcfg, tmp.file("ck"));
  Checkpoint ck = Checkpoint::load(r.checkpoint_path);

  const ParamLayout layout(ck.model_config);
  const std::size_t L = static_cast<std::size_t>(ck.model_config.l_max);
  for (std::size_t i = 0; i < L; ++i) {
    CHECK(ck.params[layout.sal_w + i] == init.params()[layout.sal_w + i]);
    CHECK(ck.params[layout.sal_b + i] == init.params()[layout.sal_b + i]);
  }
  // the class head, by contrast, moved
  bool class_head_moved = false;
  for (std::size_t i = 0; i < 4; ++i)
    if (ck.params[layout.cls_w + i] != init.params()[layout.cls_w + i])
      class_head_moved = true;
  CHECK(class_head_moved);
}

TEST_CASE("fixed seed makes training bit-reproducible") {
  TmpDir tmp("train_det");
  Pipeline p = make_pipeline(20, 42);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg = quick_train(99);

  TrainResult r1 = train(p.pseudo, p.corpus, mcfg, tcfg, tmp.file("ck1"));
  TrainResult r2 = train(p.pseudo, p.corpus, mcfg, tcfg, tmp.file("ck2"));

  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(std::abs(r1.log[i].total - r2.log[i].total) < 1e-7);
    CHECK(r1.log[i].total == r2.log[i].total);  // bitwise, in fact
  }
  CHECK(Checkpoint::load(r1.checkpoint_path).params ==
        Checkpoint::load(r2.checkpoint_path).params);
}

TEST_CASE("every logged step satisfies total == l_c + lambda*l_e") {
  TmpDir tmp("train_log");
  Pipeline p = make_pipeline(20, 43);
  TrainConfig tcfg = quick_train();
  tcfg.lambda = 0.7;
  TrainResult r = train(p.pseudo, p.corpus, small_model(), tcfg, tmp.file("ck"));
  for (const auto& s : r.log)
    CHECK(std::abs(s.total - (s.l_c + 0.7 * s.l_e)) < 1e-6);
}

TEST_CASE("filter_unconverged trains on exactly the converged subset") {
  TmpDir tmp("train_filter");
  Pipeline p = make_pipeline(16, 44);
  // force some examples unconverged
  std::size_t converged = 0;
  for (std::size_t i = 0; i < p.pseudo.size(); ++i) {
    if (i % 3 == 0) {
      p.pseudo[i].converged = false;
      p.pseudo[i].history.resize(1);
      p.pseudo[i].final_label = p.pseudo[i].history[0].class_label;
      p.pseudo[i].final_mask = p.pseudo[i].history[0].salient_mask;
    }
    if (p.pseudo[i].converged) ++converged;
  }
  TrainConfig tcfg = quick_train();
  tcfg.filter_unconverged = true;
  TrainResult r = train(p.pseudo, p.corpus, small_model(), tcfg, tmp.file("ck"));
  CHECK(r.trained_examples == converged);

  // nothing converged -> empty training set
  for (auto& ex : p.pseudo) ex.converged = false;
  CHECK_THROWS_AS(train(p.pseudo, p.corpus, small_model(), tcfg, tmp.file("ck2")),
                  EmptyTrainingSet);
}

TEST_CASE("empty pseudo list is an error") {
  TmpDir tmp("train_empty");
  Corpus corpus = synth::make_corpus({.n_docs = 4, .seed = 45});
  CHECK_THROWS_AS(train({}, corpus, small_model(), quick_train(), tmp.file("ck")),
                  EmptyTrainingSet);
}

TEST_CASE("mean total loss decreases across epochs on the synthetic pilot") {
  TmpDir tmp("train_curve");
  Pipeline p = make_pipeline(64, 46);
  TrainConfig tcfg = quick_train();
  tcfg.epochs = 3;
  TrainResult r = train(p.pseudo, p.corpus, small_model(), tcfg, tmp.file("ck"));

  std::vector<double> epoch_means;
  for (const auto& s : r.log)
    if (s.step == -1) epoch_means.push_back(s.total);
  REQUIRE(epoch_means.size() == 3);
  CHECK(epoch_means[1] < epoch_means[0]);
  CHECK(epoch_means[2] < epoch_means[1]);
}

TEST_CASE("predict yields normalized probabilities and real-token scores only") {
  TmpDir tmp("train_pred");
  Pipeline p = make_pipeline(20, 47);
  TrainResult r = train(p.pseudo, p.corpus, small_model(), quick_train(), tmp.file("ck"));
  Checkpoint ck = Checkpoint::load(r.checkpoint_path);

  auto preds = predict(ck, p.corpus.labels, p.corpus.documents);
  REQUIRE(preds.size() == p.corpus.documents.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double sum = 0.0;
    for (double v : preds[i].class_probs) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    const std::size_t real =
        std::min(static_cast<std::size_t>(ck.model_config.l_max),
                 tokenize(p.corpus.documents[i].text).size());
    CHECK(preds[i].saliency_scores.size() == real);
    for (double s : preds[i].saliency_scores) {
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }
    CHECK(preds[i].label ==
          static_cast<int>(std::max_element(preds[i].class_probs.begin(),
                                            preds[i].class_probs.end()) -
                           preds[i].class_probs.begin()));
  }

  CHECK_THROWS_AS(predict(ck, LabelSet({"x", "y"}), p.corpus.documents), ManifestMismatch);
}

TEST_CASE("checkpoint manifest round-trips every field") {
  TmpDir tmp("ckpt");
  ModelConfig mcfg = small_model();
  Network net(mcfg, 321);
  Checkpoint ck{mcfg, LabelSet({"sports", "business"}), 0.9, "auto_balance", 321,
                net.params()};
  const std::string path = tmp.file("model.bin");
  ck.save(path);
  Checkpoint back = Checkpoint::load(path);
  CHECK(back.labels == ck.labels);
  CHECK(back.lambda == 0.9);
  CHECK(back.w_policy == "auto_balance");
  CHECK(back.seed == 321);
  CHECK(back.params == ck.params);
  CHECK(back.model_config.l_max == mcfg.l_max);
}
