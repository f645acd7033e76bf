#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/http_oracle.hpp"
#include "salcls/model.hpp"
#include "salcls/oracles.hpp"
#include "salcls/rounds.hpp"
#include "salcls/train.hpp"

namespace salcls {

enum class OracleBackend { lexicon, http };

// One structured config file drives every command; command-line flags
// override individual keys.
struct RunConfig {
  std::uint64_t seed = 7;
  LabelSet labels;

  struct Paths {
    std::string train;
    std::string dev;   // optional
    std::string test;  // optional
    std::string pseudo = "out/pseudo.jsonl";
    std::string checkpoint_dir = "out/checkpoints";
    std::string report_dir = "out/reports";
  } paths;

  OracleBackend backend = OracleBackend::lexicon;
  LexiconOracleSpec lexicon;
  PromptTemplate template_class = default_classification_template();
  PromptTemplate template_class_hints = default_classification_with_hints_template();
  PromptTemplate template_saliency = default_saliency_template();
  HttpOracleConfig http;  // urls/token resolved from the environment

  RoundConfig rounds;
  ModelConfig model;
  TrainConfig train;

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_json(j);
  }

  static RunConfig from_json(const json& j) {
    try {
      return from_json_unchecked(j);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad config structure: ") + e.what());
    }
  }

  static RunConfig from_json_unchecked(const json& j) {
    RunConfig c;
    if (!j.contains("labels") || !j["labels"].is_array() || j["labels"].empty())
      throw ConfigError("config needs a non-empty 'labels' array");
    c.labels = LabelSet(j["labels"].get<std::vector<std::string>>());
    c.seed = j.value("seed", std::uint64_t{7});

    if (j.contains("paths")) {
      const auto& p = j["paths"];
      c.paths.train = p.value("train", "");
      c.paths.dev = p.value("dev", "");
      c.paths.test = p.value("test", "");
      c.paths.pseudo = p.value("pseudo", c.paths.pseudo);
      c.paths.checkpoint_dir = p.value("checkpoint_dir", c.paths.checkpoint_dir);
      c.paths.report_dir = p.value("report_dir", c.paths.report_dir);
    }

    if (j.contains("oracle")) {
      const auto& o = j["oracle"];
      const std::string backend = o.value("backend", "lexicon");
      if (backend == "lexicon")
        c.backend = OracleBackend::lexicon;
      else if (backend == "http")
        c.backend = OracleBackend::http;
      else
        throw ConfigError("oracle.backend must be 'lexicon' or 'http'");

      if (o.contains("lexicon")) {
        const auto& lx = o["lexicon"];
        if (lx.contains("keywords"))
          for (auto it = lx["keywords"].begin(); it != lx["keywords"].end(); ++it)
            c.lexicon.keywords[it.key()] = it.value().get<std::vector<std::string>>();
        c.lexicon.hint_weight = lx.value("hint_weight", 1.0);
      }
      if (o.contains("templates")) {
        const auto& t = o["templates"];
        if (t.contains("classification"))
          c.template_class =
              PromptTemplate::classification(t["classification"].get<std::string>());
        if (t.contains("classification_with_hints"))
          c.template_class_hints = PromptTemplate::classification_with_hints(
              t["classification_with_hints"].get<std::string>());
        if (t.contains("saliency"))
          c.template_saliency = PromptTemplate::saliency(t["saliency"].get<std::string>());
      }
      if (o.contains("http")) {
        const auto& h = o["http"];
        c.http.timeout_ms = h.value("timeout_ms", c.http.timeout_ms);
        c.http.retries = h.value("retries", c.http.retries);
        c.http.backoff_ms = h.value("backoff_ms", c.http.backoff_ms);
        c.http.concurrency = h.value("concurrency", c.http.concurrency);
      }
    }

    if (j.contains("rounds")) {
      const auto& r = j["rounds"];
      c.rounds.max_rounds = r.value("max_rounds", c.rounds.max_rounds);
      c.rounds.require_mask_equality =
          r.value("require_mask_equality", c.rounds.require_mask_equality);
      const std::string oes = r.value("on_empty_saliency", "keep_label_stop");
      if (oes == "keep_label_stop")
        c.rounds.on_empty_saliency = OnEmptySaliency::keep_label_stop;
      else if (oes == "retry_without_hints")
        c.rounds.on_empty_saliency = OnEmptySaliency::retry_without_hints;
      else
        throw ConfigError("rounds.on_empty_saliency must be keep_label_stop or retry_without_hints");
      c.rounds.validate();
    }

    if (j.contains("model")) {
      const auto& m = j["model"];
      const std::string preset = m.value("preset", "tiny");
      const int l_max = m.value("l_max", 128);
      if (preset == "tiny")
        c.model = ModelConfig::tiny_preset(c.labels.size(), l_max);
      else if (preset == "small")
        c.model = ModelConfig::small_preset(c.labels.size(), l_max);
      else if (preset == "pretrained-adapter")
        throw ConfigError("the pretrained-adapter preset needs an external encoder runtime");
      else
        throw ConfigError("model.preset must be tiny, small, or pretrained-adapter");
      c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    } else {
      c.model = ModelConfig::tiny_preset(c.labels.size());
    }

    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.lambda = t.value("lambda", c.train.lambda);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.dropout = t.value("dropout", c.train.dropout);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.filter_unconverged = t.value("filter_unconverged", c.train.filter_unconverged);
      const std::string w = t.value("positive_weight", "auto");
      if (w == "auto")
        c.train.fixed_positive_weight = false;
      else if (w == "fixed")
        c.train.fixed_positive_weight = true;
      else
        throw ConfigError("train.positive_weight must be 'auto' or 'fixed'");
      c.train.validate();
    }
    c.train.seed = c.seed;
    c.model.dropout = c.train.dropout;
    return c;
  }

  void apply_out_dir(const std::string& out_dir) {
    namespace fs = std::filesystem;
    paths.pseudo = (fs::path(out_dir) / "pseudo.jsonl").string();
    paths.checkpoint_dir = (fs::path(out_dir) / "checkpoints").string();
    paths.report_dir = (fs::path(out_dir) / "reports").string();
  }

  void require_readable(const std::string& path, const std::string& what) const {
    if (path.empty()) throw ConfigError("config is missing the " + what + " path");
    if (!std::filesystem::exists(path))
      throw ConfigError(what + " path does not exist: " + path);
  }

  std::unique_ptr<ClassOracle> make_class_oracle() const {
    if (backend == OracleBackend::lexicon) {
      lexicon.validate(labels);
      return std::make_unique<LexiconClassOracle>(lexicon);
    }
    HttpOracleConfig cfg = http;
    cfg.url = env_or_empty(kEnvClassUrl);
    cfg.auth_token = env_or_empty(kEnvToken);
    if (cfg.url.empty())
      throw ConfigError(std::string("http oracle backend needs ") + kEnvClassUrl);
    return std::make_unique<HttpClassOracle>(cfg, template_class, template_class_hints);
  }

  std::unique_ptr<SaliencyOracle> make_saliency_oracle() const {
    if (backend == OracleBackend::lexicon) {
      lexicon.validate(labels);
      return std::make_unique<LexiconSaliencyOracle>(lexicon);
    }
    HttpOracleConfig cfg = http;
    cfg.url = env_or_empty(kEnvSaliencyUrl);
    cfg.auth_token = env_or_empty(kEnvToken);
    if (cfg.url.empty())
      throw ConfigError(std::string("http oracle backend needs ") + kEnvSaliencyUrl);
    return std::make_unique<HttpSaliencyOracle>(cfg, template_saliency);
  }
};

}  // namespace salcls
