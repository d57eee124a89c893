// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>

#include "lca_scope/error.hpp"
#include "lca_scope/trace.hpp"

namespace lca_scope::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(LcaChoice choice) {
  switch (choice) {
    case LcaChoice::kNone:
      return "none";
    case LcaChoice::kExact:
      return "exact";
    case LcaChoice::kSampled:
      return "sampled";
  }
  return "none";
}

LcaChoice parse_lca_choice(const std::string& text) {
  if (text == "none") return LcaChoice::kNone;
  if (text == "exact") return LcaChoice::kExact;
  if (text == "sampled") return LcaChoice::kSampled;
  throw UsageError("unknown lca mode '" + text + "' (expected exact|sampled|none)");
}

json ExperimentConfig::to_json() const {
  json m = model;
  if (!model_vocab_given) {
    m.erase("src_vocab");
    m.erase("tgt_vocab");
  }
  json d = json::object();
  if (data.train_path) d["train"] = data.train_path->string();
  if (data.test_path) d["test"] = data.test_path->string();
  if (!data.train_path) {
    d["synthetic"] = data.synthetic;
    d["test_examples"] = data.test_examples;
  }
  return json{{"model", m},
              {"optimizer", optimizer},
              {"data", d},
              {"lca",
               {{"mode", to_string(lca.mode)},
                {"dataset", data::to_string(lca.dataset)},
                {"batch_size", lca.batch_size},
                {"window", lca.window},
                {"retain_rows", lca.retain_rows},
                {"chunk_size", lca.chunk_size},
                {"threads", lca.threads}}},
              {"seeds", seeds},
              {"output_dir", output_dir.string()}};
}

ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw UsageError("experiment config must be a JSON object");
  try {
    ExperimentConfig c;
    if (j.contains("model")) {
      c.model = j["model"].get<model::ModelConfig>();
      c.model_vocab_given = j["model"].contains("src_vocab") || j["model"].contains("tgt_vocab");
    }
    if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<trainer::OptimizerConfig>();
    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    if (j.contains("data")) {
      const auto& d = j["data"];
      if (d.contains("train") != d.contains("test")) {
        throw UsageError("experiment config: data needs both 'train' and 'test' paths, or neither");
      }
      if (d.contains("train")) {
        c.data.train_path = resolve(d["train"].get<std::string>());
        c.data.test_path = resolve(d["test"].get<std::string>());
      }
      if (d.contains("synthetic")) c.data.synthetic = d["synthetic"].get<data::CorpusSpec>();
      c.data.test_examples = d.value("test_examples", c.data.test_examples);
    }
    if (j.contains("lca")) {
      const auto& l = j["lca"];
      c.lca.mode = parse_lca_choice(l.value("mode", to_string(c.lca.mode)));
      c.lca.dataset = data::parse_split(l.value("dataset", data::to_string(c.lca.dataset)));
      c.lca.batch_size = l.value("batch_size", c.lca.batch_size);
      c.lca.window = l.value("window", c.lca.window);
      c.lca.retain_rows = l.value("retain_rows", c.lca.retain_rows);
      c.lca.chunk_size = l.value("chunk_size", c.lca.chunk_size);
      c.lca.threads = l.value("threads", c.lca.threads);
    }
    if (!j.contains("seeds")) throw UsageError("experiment config: a 'seeds' section is required");
    c.seeds = j["seeds"].get<trainer::Seeds>();
    if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>());
    c.optimizer.validate();
    if (c.lca.window == 0) throw UsageError("experiment config: lca.window must be >= 1");
    if (c.lca.batch_size == 0) throw UsageError("experiment config: lca.batch_size must be >= 1");
    if (c.lca.chunk_size == 0) throw UsageError("experiment config: lca.chunk_size must be >= 1");
    return c;
  } catch (const json::exception& e) {
    throw UsageError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  auto c = config_from_json(j, path.parent_path());
  if (c.data.train_path && !fs::exists(*c.data.train_path)) {
    throw IoError("config '" + path.string() + "' references missing corpus '" + c.data.train_path->string() + "'");
  }
  if (c.data.test_path && !fs::exists(*c.data.test_path)) {
    throw IoError("config '" + path.string() + "' references missing corpus '" + c.data.test_path->string() + "'");
  }
  return c;
}

ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.model.num_layers = 2;
  c.model.d_model = 8;
  c.model.num_heads = 2;
  c.model.ffn_dim = 16;
  c.model.src_vocab = 24;
  c.model.tgt_vocab = 24;
  c.model.max_len = 8;
  c.model.seed = 1;
  c.model_vocab_given = true;
  c.optimizer.kind = trainer::OptimizerKind::kSgd;
  c.optimizer.lr = 0.05;
  c.optimizer.steps = 3000;
  c.optimizer.batch_size = 32;
  c.data.synthetic.vocab = 24;
  c.data.synthetic.n_examples = 10000;
  c.data.synthetic.min_len = 1;
  c.data.synthetic.max_len = 4;
  c.data.synthetic.zipf_exponent = 1.0;
  c.data.synthetic.task = data::Task::kCopy;
  c.data.synthetic.seed = 1;
  c.data.test_examples = 1000;
  c.lca.mode = LcaChoice::kSampled;
  c.lca.dataset = data::Split::kTrain;
  c.lca.batch_size = 32;
  c.seeds = trainer::Seeds{1, 2};
  c.output_dir = "runs/desk";
  return c;
}

Corpora load_corpora(const ExperimentConfig& config) {
  Corpora out;
  if (config.data.train_path) {
    out.train = data::read_corpus(*config.data.train_path);
    out.test = data::read_corpus(*config.data.test_path);
  } else {
    data::CorpusSpec spec = config.data.synthetic;
    spec.split = data::Split::kTrain;
    out.train = data::gen_corpus(spec);
    spec.split = data::Split::kTest;
    spec.n_examples = config.data.test_examples;
    out.test = data::gen_corpus(spec);
  }
  out.train.split = data::Split::kTrain;
  out.test.split = data::Split::kTest;
  if (out.train.examples.empty()) throw DegenerateInputError("training corpus is empty");
  return out;
}

void write_dataset(const fs::path& dir, const data::CorpusSpec& spec, std::size_t test_examples) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  data::CorpusSpec s = spec;
  s.split = data::Split::kTrain;
  data::write_corpus(dir / "train.tsv", data::gen_corpus(s));
  s.split = data::Split::kTest;
  s.n_examples = test_examples;
  data::write_corpus(dir / "test.tsv", data::gen_corpus(s));
}

model::ModelConfig resolve_model(const ExperimentConfig& config, const Corpora& corpora) {
  model::ModelConfig m = config.model;
  const std::size_t sv = std::max(corpora.train.src_vocab, corpora.test.src_vocab);
  const std::size_t tv = std::max(corpora.train.tgt_vocab, corpora.test.tgt_vocab);
  if (!config.model_vocab_given) {
    m.src_vocab = sv;
    m.tgt_vocab = tv;
  } else if (m.src_vocab < sv || m.tgt_vocab < tv) {
    throw DimensionError("model vocabularies (" + std::to_string(m.src_vocab) + ", " + std::to_string(m.tgt_vocab) +
                         ") are smaller than the corpus vocabularies (" + std::to_string(sv) + ", " +
                         std::to_string(tv) + ")");
  }
  std::size_t longest = 0;
  for (const auto* c : {&corpora.train, &corpora.test}) {
    for (const auto& ex : c->examples) longest = std::max({longest, ex.source.size(), ex.target.size() + 1});
  }
  if (longest > m.max_len) {
    throw DimensionError("model max_len " + std::to_string(m.max_len) + " is shorter than the longest sequence (" +
                         std::to_string(longest) + " positions)");
  }
  m.validate();
  return m;
}

fs::path run_metadata_path(const fs::path& trace_path) { return fs::path(trace_path.string() + ".run.json"); }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunSummary run_training(const ExperimentConfig& config, const Corpora& corpora, const RunOptions& options) {
  const model::ModelConfig mc = resolve_model(config, corpora);
  const model::ParameterLayout layout(mc);

  std::optional<trace::TraceWriter> writer;
  std::optional<lca::LcaRecorder> recorder;
  std::vector<trainer::TrainingHook*> hooks;
  const data::Corpus& lca_data = config.lca.dataset == data::Split::kTrain ? corpora.train : corpora.test;
  if (config.lca.mode != LcaChoice::kNone) {
    lca::RecorderOptions ro;
    ro.mode.source = config.lca.mode == LcaChoice::kExact ? lca::GradientSource::kExact : lca::GradientSource::kSampled;
    ro.mode.dataset = config.lca.dataset;
    ro.mode.batch_size = config.lca.batch_size;
    ro.window = config.lca.window;
    ro.retain_rows = config.lca.retain_rows;
    ro.seed = config.seeds.lca;
    ro.threads = config.lca.threads;
    ro.chunk_size = config.lca.chunk_size;

    auto header = lca::LcaRecorder::make_header(layout, ro);
    header.total_steps = config.optimizer.steps;
    header.seeds = json{{"init", mc.seed}, {"shuffle", config.seeds.shuffle}, {"lca", config.seeds.lca}};
    header.optimizer_config = config.optimizer;
    header.optimizer_digest = trace::digest(header.optimizer_config);
    if (options.timestamps) header.created = utc_timestamp();
    writer.emplace(options.trace_path, std::move(header));
    recorder.emplace(layout, lca_data, ro, &*writer);
    hooks.push_back(&*recorder);
  }

  auto result = trainer::train(mc, config.optimizer, corpora.train, hooks, config.seeds);

  RunSummary summary{result.metadata, std::nullopt, std::nullopt, {}, run_metadata_path(options.trace_path),
                     std::move(result.params)};
  json run{{"config", config.to_json()}, {"model", mc}, {"lca_mode", to_string(config.lca.mode)}};
  json meta = result.metadata.to_json();
  if (!options.timestamps) {
    meta.erase("wall_clock_seconds");
    meta.erase("hook_seconds");
  } else {
    run["created"] = utc_timestamp();
  }
  run["run"] = meta;
  if (recorder) {
    summary.trace_path = options.trace_path;
    summary.fidelity = recorder->fidelity();
    summary.diagnostics = recorder->diagnostics();
    run["trace"] = options.trace_path.filename().string();
    run["fidelity"] = summary.fidelity->to_json();
    run["lca_steps"] = {{"total", summary.diagnostics->total},
                        {"loss_before", summary.diagnostics->loss_before},
                        {"loss_after", summary.diagnostics->loss_after}};
  }
  if (options.trace_path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(options.trace_path.parent_path(), ec);
  }
  std::ofstream f(summary.run_path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write run metadata '" + summary.run_path.string() + "'");
  f << run.dump(1) << '\n';
  return summary;
}

}  // namespace lca_scope::experiment

namespace lca_scope::experiment {

ReproResult run_repro(const ExperimentConfig& config, const ReproOptions& options) {
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  const fs::path dir = options.out_dir;
  const fs::path data_dir = dir / "data";
  log("writing dataset to " + data_dir.string());
  write_dataset(data_dir, config.data.synthetic, config.data.test_examples);

  ExperimentConfig base = config;
  base.data.train_path = data_dir / "train.tsv";
  base.data.test_path = data_dir / "test.tsv";
  base.output_dir = dir;
  const Corpora corpora = load_corpora(base);
  {
    std::ofstream f(dir / "config.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + (dir / "config.json").string() + "'");
    f << base.to_json().dump(2) << '\n';
  }

  auto run = [&](LcaChoice mode, const fs::path& trace) {
    ExperimentConfig c = base;
    c.lca.mode = mode;
    return run_training(c, corpora, RunOptions{trace, options.timestamps});
  };

  ReproResult out;
  const std::size_t repeats = std::max<std::size_t>(1, options.timing_repeats);
  out.baseline_seconds = INFINITY;
  for (std::size_t r = 0; r < repeats; ++r) {
    log("uninstrumented training, repeat " + std::to_string(r + 1));
    const auto s = run(LcaChoice::kNone, dir / "baseline");
    out.baseline_seconds = std::min(out.baseline_seconds, s.metadata.wall_clock_seconds);
  }
  out.sampled_seconds = INFINITY;
  for (std::size_t r = 0; r < repeats; ++r) {
    log("sampled-mode training, repeat " + std::to_string(r + 1));
    const auto s = run(LcaChoice::kSampled, dir / "sampled.lca");
    out.sampled_seconds = std::min(out.sampled_seconds, s.metadata.wall_clock_seconds);
  }
  log("exact-mode training");
  const auto exact = run(LcaChoice::kExact, dir / "exact.lca");
  out.exact_seconds = exact.metadata.wall_clock_seconds;
  out.exact_fidelity = exact.fidelity;
  out.overhead = out.sampled_seconds / out.baseline_seconds;

  log("validating");
  out.validation = analysis::validate_approximation(dir / "exact.lca", dir / "sampled.lca");
  {
    std::ofstream f(dir / "validate.json", std::ios::binary | std::ios::trunc);
    f << out.validation.to_json().dump(2) << '\n';
  }
  for (const char* mode : {"exact", "sampled"}) {
    const auto series = lca::series_from_trace(dir / (std::string(mode) + ".lca"));
    analysis::write_report(analysis::report_cumulative(series, false), dir / (std::string("cumulative_") + mode));
    const std::size_t segments = std::min(options.segments, series.size());
    if (segments > 0) {
      analysis::write_report(analysis::report_interval(series, segments), dir / (std::string("interval_") + mode));
    }
  }
  if (base.lca.retain_rows) {
    const std::size_t n = std::min(options.buckets, corpora.train.src_vocab);
    const auto buckets = data::frequency_buckets(corpora.train, n, data::Side::kSource);
    out.buckets = analysis::report_buckets(dir / "exact.lca", buckets, model::EmbeddingSide::kEncoder);
    analysis::write_report(*out.buckets, dir / "buckets_exact_encoder");
  }

  out.summary = json{{"tau", out.validation.tau},
                     {"exact_ranking", out.validation.exact.order},
                     {"sampled_ranking", out.validation.approx.order}};
  if (out.exact_fidelity) out.summary["exact_fidelity"] = out.exact_fidelity->to_json();
  if (out.buckets && out.buckets->tau) out.summary["bucket_tau"] = *out.buckets->tau;
  if (options.timestamps) {
    out.summary["seconds"] = {{"exact", out.exact_seconds},
                              {"sampled", out.sampled_seconds},
                              {"baseline", out.baseline_seconds},
                              {"sampled_over_baseline", out.overhead}};
    out.summary["created"] = utc_timestamp();
  }
  std::ofstream f(dir / "summary.json", std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + (dir / "summary.json").string() + "'");
  f << out.summary.dump(2) << '\n';
  return out;
}

}  // namespace lca_scope::experiment
