// salcls: weakly-supervised text classification with saliency supervision.
//
// Subcommands:
//   pseudo-gen     two-oracle iterative pseudo-label generation
//   train          multi-task training on pseudo-labels
//   eval           classification + rationale-agreement metrics
//   ablate-rounds  sweep the round budget and tabulate metrics
//
// Exit codes: 0 ok, 2 config invalid, 3 oracle failure, 4 empty/degenerate
// data, 5 artifact mismatch.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "salcls/config.hpp"
#include "salcls/corpus.hpp"
#include "salcls/explain.hpp"
#include "salcls/metrics.hpp"
#include "salcls/rounds.hpp"
#include "salcls/train.hpp"

namespace fs = std::filesystem;
using salcls::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitOracle = 3;
constexpr int kExitEmptyData = 4;
constexpr int kExitMismatch = 5;

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<int> rounds;
  std::optional<std::string> out_dir;
};

salcls::RunConfig load_config(const GlobalFlags& flags) {
  salcls::RunConfig cfg = salcls::RunConfig::load(flags.config_path);
  if (flags.seed) {
    cfg.seed = *flags.seed;
    cfg.train.seed = *flags.seed;
  }
  if (flags.lambda) {
    cfg.train.lambda = *flags.lambda;
    cfg.train.validate();
  }
  if (flags.rounds) {
    cfg.rounds.max_rounds = *flags.rounds;
    cfg.rounds.validate();
  }
  if (flags.out_dir) cfg.apply_out_dir(*flags.out_dir);
  return cfg;
}

// Timestamps never go into the deterministic artifacts; they live here.
void write_run_meta(const std::string& dir, const std::string& command,
                    const salcls::RunConfig& cfg) {
  fs::create_directories(dir);
  const auto now = std::chrono::system_clock::now();
  json meta{{"command", command},
            {"seed", cfg.seed},
            {"unix_time", std::chrono::duration_cast<std::chrono::seconds>(
                              now.time_since_epoch())
                              .count()},
            {"w_policy", cfg.train.w_policy()},
            {"lambda", cfg.train.lambda},
            {"max_rounds", cfg.rounds.max_rounds}};
  std::ofstream out((fs::path(dir) / ("run_meta_" + command + ".json")).string());
  out << meta.dump(2) << '\n';
}

int run_pseudo_gen(const GlobalFlags& flags) {
  salcls::RunConfig cfg = load_config(flags);
  cfg.require_readable(cfg.paths.train, "train corpus");
  auto class_oracle = cfg.make_class_oracle();
  auto saliency_oracle = cfg.make_saliency_oracle();

  salcls::Corpus corpus =
      salcls::load_corpus(cfg.paths.train, cfg.labels, salcls::Split::train);
  if (corpus.documents.empty()) {
    std::cerr << "error: train corpus has no documents\n";
    return kExitEmptyData;
  }

  fs::create_directories(fs::path(cfg.paths.pseudo).parent_path().empty()
                             ? "."
                             : fs::path(cfg.paths.pseudo).parent_path().string());

  salcls::GenerateOptions opts;
  opts.cache_path = cfg.paths.pseudo + ".partial";
  opts.progress = [](const salcls::Progress& p) {
    std::cerr << json{{"done", p.done}, {"total", p.total}, {"failed", p.failed}}.dump()
              << '\n';
  };

  salcls::GenerateResult result = salcls::generate_pseudo_labels(
      corpus, *class_oracle, *saliency_oracle, cfg.rounds, opts);
  salcls::write_pseudo_examples(cfg.paths.pseudo, result.examples, cfg.labels);
  std::error_code ec;
  fs::remove(opts.cache_path, ec);

  const salcls::PseudoStats stats = salcls::pseudo_stats(result);
  const json stats_json{{"converged_frac", stats.converged_frac},
                        {"mean_rounds", stats.mean_rounds},
                        {"failed", stats.failed}};
  std::ofstream stats_out(cfg.paths.pseudo + ".stats.json");
  stats_out << stats_json.dump(2) << '\n';
  std::cout << stats_json.dump() << '\n';
  write_run_meta(cfg.paths.report_dir, "pseudo-gen", cfg);
  return kExitOk;
}

int run_train(const GlobalFlags& flags) {
  salcls::RunConfig cfg = load_config(flags);
  cfg.require_readable(cfg.paths.train, "train corpus");
  cfg.require_readable(cfg.paths.pseudo, "pseudo-label file");

  salcls::Corpus corpus =
      salcls::load_corpus(cfg.paths.train, cfg.labels, salcls::Split::train);
  std::vector<salcls::PseudoExample> pseudo =
      salcls::read_pseudo_examples(cfg.paths.pseudo, cfg.labels);

  std::optional<salcls::Corpus> dev;
  if (!cfg.paths.dev.empty()) {
    cfg.require_readable(cfg.paths.dev, "dev corpus");
    dev = salcls::load_corpus(cfg.paths.dev, cfg.labels, salcls::Split::dev);
  }

  salcls::TrainResult result =
      salcls::train(pseudo, corpus, cfg.model, cfg.train, cfg.paths.checkpoint_dir,
                    dev ? &*dev : nullptr);
  salcls::write_training_log(
      (fs::path(cfg.paths.checkpoint_dir) / "train_log.jsonl").string(), result.log);

  json selected{{"checkpoint", result.checkpoint_path},
                {"selected_epoch", result.selected_epoch}};
  if (result.best_dev_micro_f1 >= 0.0) selected["dev_micro_f1"] = result.best_dev_micro_f1;
  std::ofstream sel_out((fs::path(cfg.paths.checkpoint_dir) / "selected.json").string());
  sel_out << selected.dump(2) << '\n';
  std::cout << selected.dump() << '\n';
  write_run_meta(cfg.paths.report_dir, "train", cfg);
  return kExitOk;
}

std::string default_checkpoint(const salcls::RunConfig& cfg) {
  const std::string sel = (fs::path(cfg.paths.checkpoint_dir) / "selected.json").string();
  std::ifstream in(sel);
  if (!in) throw salcls::ConfigError("no --checkpoint given and no " + sel);
  json j;
  in >> j;
  return j.at("checkpoint").get<std::string>();
}

int run_eval(const GlobalFlags& flags, const std::string& checkpoint_arg, bool explain) {
  salcls::RunConfig cfg = load_config(flags);
  cfg.require_readable(cfg.paths.test, "test corpus");
  const std::string ck_path =
      checkpoint_arg.empty() ? default_checkpoint(cfg) : checkpoint_arg;
  cfg.require_readable(ck_path, "checkpoint");

  salcls::Checkpoint ck = salcls::Checkpoint::load(ck_path);
  salcls::Corpus test = salcls::load_corpus(cfg.paths.test, cfg.labels, salcls::Split::test);
  salcls::MetricsReport report = salcls::evaluate(ck, test);

  fs::create_directories(cfg.paths.report_dir);
  const json report_json = report.to_json(cfg.labels);
  std::ofstream out((fs::path(cfg.paths.report_dir) / "report.json").string());
  out << report_json.dump(2) << '\n';

  // human-readable table
  std::printf("%-16s %8s\n", "metric", "value");
  std::printf("%-16s %8.4f\n", "micro_f1", report.micro);
  std::printf("%-16s %8.4f\n", "macro_f1", report.macro);
  for (int i = 0; i < cfg.labels.size(); ++i)
    std::printf("f1[%-12s] %8.4f\n", cfg.labels.name(i).c_str(),
                report.per_class[static_cast<std::size_t>(i)]);
  if (report.rationale_docs > 0)
    std::printf("%-16s %8.4f  (%zu docs)\n", "saliency_f1", report.mean_saliency_f1,
                report.rationale_docs);

  if (explain) {
    salcls::Network net(ck.model_config, ck.params, ck.seed);
    std::ofstream attr_out((fs::path(cfg.paths.report_dir) / "attributions.jsonl").string());
    for (const auto& doc : test.documents) {
      for (auto method : {salcls::AttributionMethod::model_saliency_head,
                          salcls::AttributionMethod::gradient_saliency,
                          salcls::AttributionMethod::input_x_gradient,
                          salcls::AttributionMethod::occlusion}) {
        salcls::TokenAttribution att = salcls::attribute(net, doc, method);
        attr_out << json{{"id", att.doc_id},
                         {"method", salcls::to_string(att.method)},
                         {"scores", att.scores}}
                        .dump()
                 << '\n';
      }
    }
  }
  write_run_meta(cfg.paths.report_dir, "eval", cfg);
  return kExitOk;
}

int run_ablate_rounds(const GlobalFlags& flags, std::vector<int> round_budgets) {
  salcls::RunConfig base = load_config(flags);
  base.require_readable(base.paths.train, "train corpus");
  base.require_readable(base.paths.dev, "dev corpus");
  base.require_readable(base.paths.test, "test corpus");
  if (round_budgets.empty()) throw salcls::ConfigError("--rounds list is empty");
  std::sort(round_budgets.begin(), round_budgets.end());
  round_budgets.erase(std::unique(round_budgets.begin(), round_budgets.end()),
                      round_budgets.end());

  salcls::Corpus train_corpus =
      salcls::load_corpus(base.paths.train, base.labels, salcls::Split::train);
  salcls::Corpus dev = salcls::load_corpus(base.paths.dev, base.labels, salcls::Split::dev);
  salcls::Corpus test = salcls::load_corpus(base.paths.test, base.labels, salcls::Split::test);
  auto class_oracle = base.make_class_oracle();
  auto saliency_oracle = base.make_saliency_oracle();

  fs::create_directories(base.paths.report_dir);
  std::vector<std::string> rows;
  for (int r : round_budgets) {
    salcls::RoundConfig rcfg = base.rounds;
    rcfg.max_rounds = r;
    rcfg.validate();
    const fs::path run_dir = fs::path(base.paths.report_dir) / ("ablate-rounds-" + std::to_string(r));
    fs::create_directories(run_dir);

    salcls::GenerateResult gen = salcls::generate_pseudo_labels(
        train_corpus, *class_oracle, *saliency_oracle, rcfg, {});
    const std::string pseudo_path = (run_dir / "pseudo.jsonl").string();
    salcls::write_pseudo_examples(pseudo_path, gen.examples, base.labels);

    salcls::TrainResult tr = salcls::train(gen.examples, train_corpus, base.model,
                                           base.train, (run_dir / "checkpoints").string(),
                                           &dev);
    salcls::Checkpoint ck = salcls::Checkpoint::load(tr.checkpoint_path);
    salcls::MetricsReport dev_report = salcls::evaluate(ck, dev);
    salcls::MetricsReport test_report = salcls::evaluate(ck, test);

    char row[256];
    std::snprintf(row, sizeof(row), "%d,%.6f,%.6f,%.6f,%.6f", r, dev_report.micro,
                  dev_report.macro, test_report.micro, test_report.macro);
    rows.emplace_back(row);
  }

  const std::string csv_path =
      (fs::path(base.paths.report_dir) / "ablation.csv").string();
  std::ofstream csv(csv_path);
  csv << "rounds,dev_micro_f1,dev_macro_f1,test_micro_f1,test_macro_f1\n";
  std::cout << "rounds,dev_micro_f1,dev_macro_f1,test_micro_f1,test_macro_f1\n";
  for (const auto& row : rows) {
    csv << row << '\n';
    std::cout << row << '\n';
  }
  write_run_meta(base.paths.report_dir, "ablate-rounds", base);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weakly-supervised text classification with saliency supervision"};
  app.require_subcommand(1);

  GlobalFlags flags;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "run config JSON")->required();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { flags.seed = v; }, "override the run seed");
    cmd->add_option_function<double>(
        "--lambda", [&](double v) { flags.lambda = v; }, "override train.lambda");
    cmd->add_option_function<std::string>(
        "--out-dir", [&](const std::string& v) { flags.out_dir = v; },
        "relocate all outputs under this directory");
  };

  CLI::App* gen = app.add_subcommand("pseudo-gen", "generate pseudo labels");
  add_common(gen);
  gen->add_option_function<int>(
      "--rounds", [&](int v) { flags.rounds = v; }, "override rounds.max_rounds");

  CLI::App* train_cmd = app.add_subcommand("train", "train the multi-task model");
  add_common(train_cmd);

  std::string checkpoint_arg;
  bool explain = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_arg, "checkpoint blob path");
  eval_cmd->add_flag("--explain", explain, "also emit per-document attributions");

  std::vector<int> ablate_rounds;
  CLI::App* ablate_cmd =
      app.add_subcommand("ablate-rounds", "sweep the round budget");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--rounds", ablate_rounds, "round budgets to sweep")
      ->delimiter(',')
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_pseudo_gen(flags);
    if (train_cmd->parsed()) return run_train(flags);
    if (eval_cmd->parsed()) return run_eval(flags, checkpoint_arg, explain);
    if (ablate_cmd->parsed()) return run_ablate_rounds(flags, ablate_rounds);
  } catch (const salcls::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const salcls::TemplateMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const salcls::OracleUnavailable& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOracle;
  } catch (const salcls::UnmappableAnswer& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOracle;
  } catch (const salcls::ManifestMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const salcls::EmptyTrainingSet& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEmptyData;
  } catch (const salcls::NoGoldLabels& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEmptyData;
  } catch (const salcls::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEmptyData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
