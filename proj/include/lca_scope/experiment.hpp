// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "json.hpp"
#include "lca_scope/analysis.hpp"
#include "lca_scope/data.hpp"
#include "lca_scope/lca.hpp"
#include "lca_scope/model.hpp"
#include "lca_scope/trainer.hpp"

namespace lca_scope::experiment {

struct DataConfig {
  /// Corpus files written by gen-data; both or neither.
  std::optional<std::filesystem::path> train_path;
  std::optional<std::filesystem::path> test_path;
  /// Used when no paths are given.
  data::CorpusSpec synthetic;
  std::size_t test_examples = 1000;
};

enum class LcaChoice { kNone, kExact, kSampled };
std::string to_string(LcaChoice choice);
LcaChoice parse_lca_choice(const std::string& text);

struct LcaConfig {
  LcaChoice mode = LcaChoice::kSampled;
  data::Split dataset = data::Split::kTrain;
  std::size_t batch_size = 32;
  std::size_t window = 15;
  bool retain_rows = true;
  std::size_t chunk_size = 256;
  /// 0 selects default_threads().
  std::size_t threads = 0;
};

struct ExperimentConfig {
  model::ModelConfig model;
  /// False when the config left the vocabulary sizes to the corpus.
  bool model_vocab_given = false;
  trainer::OptimizerConfig optimizer;
  DataConfig data;
  LcaConfig lca;
  trainer::Seeds seeds;
  std::filesystem::path output_dir = "runs";

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Relative paths resolve against base_dir. Requires a "seeds" section.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// Throws IoError naming the path when it is missing.
ExperimentConfig load_config(const std::filesystem::path& path);

/// The desk-scale replication setup: 10K Zipf copy examples, two-layer d=8
/// model, SGD, T=3000.
ExperimentConfig desk_preset();

struct Corpora {
  data::Corpus train;
  data::Corpus test;
};

Corpora load_corpora(const ExperimentConfig& config);

/// Writes <dir>/train.tsv and <dir>/test.tsv with sidecars.
void write_dataset(const std::filesystem::path& dir, const data::CorpusSpec& spec, std::size_t test_examples);

/// Model config with vocabulary sizes taken from the corpora when the config
/// left them out; checks sizes and max_len otherwise.
model::ModelConfig resolve_model(const ExperimentConfig& config, const Corpora& corpora);

struct RunOptions {
  /// Trace output; the run metadata goes to <trace_path>.run.json.
  std::filesystem::path trace_path;
  /// Adds creation time and wall-clock fields to the outputs.
  bool timestamps = true;
};

struct RunSummary {
  trainer::RunMetadata metadata;
  std::optional<lca::Fidelity> fidelity;
  std::optional<lca::StepDiagnostics> diagnostics;
  std::filesystem::path trace_path;
  std::filesystem::path run_path;
  model::ParameterSet params;
};

std::filesystem::path run_metadata_path(const std::filesystem::path& trace_path);

RunSummary run_training(const ExperimentConfig& config, const Corpora& corpora, const RunOptions& options);

std::string utc_timestamp();

struct ReproOptions {
  std::filesystem::path out_dir;
  bool timestamps = true;
  /// Uninstrumented and sampled runs are repeated this many times and the
  /// fastest wall-clock of each is kept for the overhead ratio.
  std::size_t timing_repeats = 1;
  std::size_t segments = 10;
  std::size_t buckets = 25;
  std::function<void(const std::string&)> log;
};

struct ReproResult {
  analysis::ValidationReport validation;
  double exact_seconds = 0.0;
  double sampled_seconds = 0.0;
  double baseline_seconds = 0.0;
  /// sampled_seconds / baseline_seconds.
  double overhead = 0.0;
  std::optional<lca::Fidelity> exact_fidelity;
  std::optional<analysis::Report> buckets;
  nlohmann::json summary;
};

/// gen-data, exact and sampled instrumented training with identical training
/// seeds, an uninstrumented baseline, validation and reports, all under
/// options.out_dir. The config's data section supplies the synthetic spec.
ReproResult run_repro(const ExperimentConfig& config, const ReproOptions& options);

}  // namespace lca_scope::experiment
