// SPDX-License-Identifier: Apache-2.0
// lca-scope: data generation, instrumented training, validation and reports.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "lca_scope/analysis.hpp"
#include "lca_scope/error.hpp"
#include "lca_scope/experiment.hpp"
#include "lca_scope/trace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lca_scope;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  return kExitData;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

struct GenDataArgs {
  data::CorpusSpec spec;
  std::string task = "copy";
  std::size_t test_examples = 200;
  std::string out;
};

struct TrainArgs {
  std::string config;
  std::string lca;
  std::string lca_data;
  std::string out;
  std::size_t steps = 0;
  double lr = 0.0;
  std::size_t threads = 0;
  bool no_timestamp = false;
};

struct ValidateArgs {
  std::string exact;
  std::string approx;
  std::string out;
};

struct ReportArgs {
  std::string trace;
  std::string out;
  bool normalize = false;
  std::size_t segments = 10;
  std::string corpus;
  std::string side = "encoder";
  std::size_t buckets = 25;
};

struct ExportArgs {
  std::string trace;
  std::string format = "csv";
  std::string out;
};

struct ReproArgs {
  std::string config;
  std::string out = "runs/repro";
  std::size_t steps = 0;
  std::size_t examples = 0;
  std::size_t timing_repeats = 1;
  bool no_timestamp = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  data::CorpusSpec spec = a.spec;
  spec.task = data::parse_task(a.task);
  if (spec.vocab < 4) {
    throw UsageError("--vocab must be >= 4 (ids 0, 1, 2 are reserved for pad, bos, eos)");
  }
  experiment::write_dataset(a.out, spec, a.test_examples);
  std::cout << json{{"train", (fs::path(a.out) / "train.tsv").string()},
                    {"test", (fs::path(a.out) / "test.tsv").string()},
                    {"spec", spec},
                    {"test_examples", a.test_examples}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_train(const TrainArgs& a) {
  auto config = experiment::load_config(a.config);
  if (!a.lca.empty()) config.lca.mode = experiment::parse_lca_choice(a.lca);
  if (!a.lca_data.empty()) config.lca.dataset = data::parse_split(a.lca_data);
  if (a.steps > 0) config.optimizer.steps = a.steps;
  if (a.lr > 0.0) config.optimizer.lr = a.lr;
  if (a.threads > 0) config.lca.threads = a.threads;
  config.optimizer.validate();
  const fs::path out =
      a.out.empty() ? config.output_dir / (experiment::to_string(config.lca.mode) + ".lca") : fs::path(a.out);
  const auto corpora = experiment::load_corpora(config);
  const auto summary = experiment::run_training(config, corpora, {out, !a.no_timestamp});
  json j{{"run", summary.run_path.string()},
         {"steps", config.optimizer.steps},
         {"final_train_loss", summary.metadata.train_loss.empty() ? 0.0 : summary.metadata.train_loss.back()}};
  if (config.lca.mode != experiment::LcaChoice::kNone) j["trace"] = out.string();
  if (summary.fidelity) j["fidelity"] = summary.fidelity->to_json();
  if (!a.no_timestamp) j["wall_clock_seconds"] = summary.metadata.wall_clock_seconds;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_validate(const ValidateArgs& a) {
  const auto report = analysis::validate_approximation(fs::path(a.exact), fs::path(a.approx));
  const std::string text = report.to_json().dump(2) + "\n";
  if (!a.out.empty()) {
    fs::path out(a.out);
    if (out.extension() != ".json") out += ".json";
    write_text(out, text);
  }
  std::cout << json{{"tau", report.tau}, {"exact", report.exact.order}, {"approx", report.approx.order}}.dump() << '\n';
  return 0;
}

int emit_report(const analysis::Report& report, const std::string& out) {
  analysis::write_report(report, out);
  json j{{"mode", report.mode}, {"json", out + ".json"}, {"csv", out + ".csv"}, {"svg", out + ".svg"}};
  if (report.tau) j["tau"] = *report.tau;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_report_cumulative(const ReportArgs& a) {
  return emit_report(analysis::report_cumulative(lca::series_from_trace(a.trace), a.normalize), a.out);
}

int cmd_report_interval(const ReportArgs& a) {
  return emit_report(analysis::report_interval(lca::series_from_trace(a.trace), a.segments), a.out);
}

int cmd_report_buckets(const ReportArgs& a) {
  const auto side = model::parse_embedding_side(a.side);
  const auto corpus = data::read_corpus(a.corpus);
  const auto data_side = side == model::EmbeddingSide::kEncoder ? data::Side::kSource : data::Side::kTarget;
  const auto buckets = data::frequency_buckets(corpus, a.buckets, data_side);
  return emit_report(analysis::report_buckets(a.trace, buckets, side), a.out);
}

int cmd_export(const ExportArgs& a) {
  if (a.format == "csv") {
    trace::export_csv(a.trace, a.out);
  } else if (a.format == "json") {
    trace::export_json(a.trace, a.out);
  } else {
    throw UsageError("unknown export format '" + a.format + "' (expected csv|json)");
  }
  std::cout << json{{"format", a.format}, {"out", a.out}}.dump() << '\n';
  return 0;
}

int cmd_repro(const ReproArgs& a) {
  auto config = a.config.empty() ? experiment::desk_preset() : experiment::load_config(a.config);
  if (config.data.train_path) {
    throw UsageError("repro generates its own data; use a config with a data.synthetic section");
  }
  if (a.steps > 0) config.optimizer.steps = a.steps;
  if (a.examples > 0) config.data.synthetic.n_examples = a.examples;
  experiment::ReproOptions options;
  options.out_dir = a.out;
  options.timestamps = !a.no_timestamp;
  options.timing_repeats = a.timing_repeats;
  options.log = [](const std::string& msg) { std::cerr << "[repro] " << msg << '\n'; };
  const auto result = experiment::run_repro(config, options);
  std::cout << result.summary.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lca-scope: loss change allocation for a micro seq2seq transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lca-scope 0.1.0");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic Zipf corpus (train.tsv, test.tsv + sidecars)");
  gen_cmd->add_option("--vocab", gen.spec.vocab, "Vocabulary size including 3 reserved ids")->capture_default_str();
  gen_cmd->add_option("--examples", gen.spec.n_examples, "Training examples")->capture_default_str();
  gen_cmd->add_option("--test-examples", gen.test_examples, "Test examples")->capture_default_str();
  gen_cmd->add_option("--zipf", gen.spec.zipf_exponent, "Zipf exponent")->capture_default_str();
  gen_cmd->add_option("--task", gen.task, "copy|reverse")->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "Generation seed")->capture_default_str();
  gen_cmd->add_option("--min-len", gen.spec.min_len, "Minimum sequence length")->capture_default_str();
  gen_cmd->add_option("--max-len", gen.spec.max_len, "Maximum sequence length")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train with optional LCA instrumentation");
  train_cmd->add_option("--config", train.config, "Experiment config JSON")->required();
  train_cmd->add_option("--lca", train.lca, "exact|sampled|none (overrides config)");
  train_cmd->add_option("--lca-data", train.lca_data, "train|test (overrides config)");
  train_cmd->add_option("--out", train.out, "Trace path (run metadata goes to <out>.run.json)");
  train_cmd->add_option("--steps", train.steps, "Override optimizer.steps");
  train_cmd->add_option("--lr", train.lr, "Override optimizer.lr");
  train_cmd->add_option("--threads", train.threads, "Workers for exact gradients");
  train_cmd->add_flag("--no-timestamp", train.no_timestamp, "Omit timestamps and wall-clock fields");

  ValidateArgs val;
  auto* val_cmd = app.add_subcommand("validate", "Kendall tau between exact and sampled group rankings");
  val_cmd->add_option("--exact", val.exact, "Exact-mode trace")->required();
  val_cmd->add_option("--approx", val.approx, "Sampled-mode trace")->required();
  val_cmd->add_option("--out", val.out, "Report JSON path");

  ReportArgs rep;
  auto* rep_cmd = app.add_subcommand("report", "Tables and SVG charts from a trace");
  rep_cmd->require_subcommand(1);
  auto add_common = [&](CLI::App* c) {
    c->add_option("--trace", rep.trace, "Trace file")->required();
    c->add_option("--out", rep.out, "Output prefix (.json, .csv, .svg)")->required();
  };
  auto* cum_cmd = rep_cmd->add_subcommand("cumulative", "Final cumulative LCA and occupation ratios per group");
  add_common(cum_cmd);
  cum_cmd->add_flag("--normalize", rep.normalize, "Plot ratios instead of totals");
  auto* int_cmd = rep_cmd->add_subcommand("interval", "Interval LCA per group over equal segments");
  add_common(int_cmd);
  int_cmd->add_option("--segments", rep.segments, "Number of segments")->capture_default_str();
  auto* bkt_cmd = rep_cmd->add_subcommand("buckets", "Embedding-row LCA by frequency bucket");
  add_common(bkt_cmd);
  bkt_cmd->add_option("--corpus", rep.corpus, "Corpus the frequencies come from")->required();
  bkt_cmd->add_option("--side", rep.side, "encoder|decoder|softmax")->capture_default_str();
  bkt_cmd->add_option("--buckets", rep.buckets, "Number of buckets")->capture_default_str();

  ExportArgs exp;
  auto* exp_cmd = app.add_subcommand("export", "Export a trace as CSV or JSON");
  exp_cmd->add_option("--trace", exp.trace, "Trace file")->required();
  exp_cmd->add_option("--format", exp.format, "csv|json")->capture_default_str();
  exp_cmd->add_option("--out", exp.out, "Output file")->required();

  ReproArgs repro;
  auto* repro_cmd = app.add_subcommand("repro", "gen-data, exact and sampled training, validate, reports");
  repro_cmd->add_option("--config", repro.config, "Base config (default: built-in desk preset)");
  repro_cmd->add_option("--out", repro.out, "Output directory")->capture_default_str();
  repro_cmd->add_option("--steps", repro.steps, "Override optimizer.steps");
  repro_cmd->add_option("--examples", repro.examples, "Override the training corpus size");
  repro_cmd->add_option("--timing-repeats", repro.timing_repeats, "Repeats for the overhead timing")
      ->capture_default_str();
  repro_cmd->add_flag("--no-timestamp", repro.no_timestamp, "Omit timestamps and wall-clock fields");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train);
    if (*val_cmd) return cmd_validate(val);
    if (*cum_cmd) return cmd_report_cumulative(rep);
    if (*int_cmd) return cmd_report_interval(rep);
    if (*bkt_cmd) return cmd_report_buckets(rep);
    if (*exp_cmd) return cmd_export(exp);
    if (*repro_cmd) return cmd_repro(repro);
  } catch (const std::exception& e) {
    std::cerr << "lca-scope: error: " << e.what() << '\n';
    return exit_code(e);
  }
  return kExitUsage;
}
