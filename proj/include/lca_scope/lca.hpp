// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lca_scope/autodiff.hpp"
#include "lca_scope/data.hpp"
#include "lca_scope/grouping.hpp"
#include "lca_scope/kahan.hpp"
#include "lca_scope/model.hpp"
#include "lca_scope/rng.hpp"
#include "lca_scope/trace.hpp"
#include "lca_scope/trainer.hpp"

namespace lca_scope::lca {

enum class GradientSource { kExact, kSampled };

struct LcaMode {
  GradientSource source = GradientSource::kSampled;
  data::Split dataset = data::Split::kTrain;
  /// Sampled mode only.
  std::size_t batch_size = 32;

  void validate() const;
  [[nodiscard]] std::string describe() const;
  friend bool operator==(const LcaMode&, const LcaMode&) = default;
};

void to_json(nlohmann::json& j, const LcaMode& m);
void from_json(const nlohmann::json& j, LcaMode& m);
std::string to_string(GradientSource source);
GradientSource parse_gradient_source(const std::string& text);

/// Worker cap for exact gradients: LCA_SCOPE_THREADS if set, otherwise the
/// hardware concurrency.
std::size_t default_threads();

/// L(theta; D) as the token-weighted mean over every example of a corpus,
/// evaluated in chunks of similar-length examples. The result does not
/// depend on chunk size or thread count beyond rounding, and is bit-stable
/// for a fixed chunk size whatever the thread count.
class DatasetObjective {
 public:
  explicit DatasetObjective(const data::Corpus& corpus, std::size_t chunk_size = 256, std::size_t threads = 0);

  struct Result {
    double loss = 0.0;
    std::size_t tokens = 0;
    ad::Gradient grad;
  };

  [[nodiscard]] Result gradient(const model::ParameterLayout& layout, std::span<const double> theta) const;
  [[nodiscard]] double loss(const model::ParameterLayout& layout, std::span<const double> theta) const;
  [[nodiscard]] std::size_t num_chunks() const { return chunks_.size(); }
  [[nodiscard]] std::size_t total_tokens() const { return total_tokens_; }

 private:
  std::vector<data::Batch> chunks_;
  std::size_t total_tokens_ = 0;
  std::size_t threads_ = 1;
};

struct GradientEval {
  ad::Gradient grad;
  double loss = 0.0;
  std::size_t tokens = 0;
  /// The resampled batch in Sampled mode.
  std::optional<data::Batch> batch;
};

/// Exact: gradient of the full-dataset loss. Sampled: gradient on one batch
/// drawn uniformly with replacement from the dataset using rng.
GradientEval eval_gradient(const model::ParameterSet& params, const LcaMode& mode, const data::Corpus& dataset,
                           Rng& rng);

/// A[i] = grad[i] * delta[i].
std::vector<double> moment_lca(std::span<const double> grad, std::span<const double> delta);

struct SmoothedWindows {
  std::vector<std::vector<double>> values;  // [window][scalar]
  std::vector<std::size_t> steps;           // steps per window
  bool last_partial = false;
};

/// Mean over consecutive windows of W steps; a trailing partial window is
/// averaged over its own length and flagged.
SmoothedWindows smooth(std::span<const std::vector<double>> stream, std::size_t window);

/// Streaming version of smooth() for one window.
class WindowAccumulator {
 public:
  explicit WindowAccumulator(std::size_t num_scalars = 0) : sums_(num_scalars) {}
  void add(std::span<const double> moment);
  [[nodiscard]] std::size_t steps() const { return steps_; }
  [[nodiscard]] std::vector<double> mean() const;
  void reset();

 private:
  std::vector<KahanSum> sums_;
  std::size_t steps_ = 0;
};

enum class Aggregation { kSum, kMean };

std::vector<double> group_aggregate(std::span<const double> values, const GroupingSpec& grouping,
                                    Aggregation agg = Aggregation::kSum);

/// Stored per-group window values (per-step averages) of one trace, in memory.
struct WindowSeries {
  std::vector<std::string> names;
  std::size_t window = 15;
  std::vector<std::uint64_t> index;
  std::vector<std::uint32_t> steps;
  std::vector<std::vector<double>> values;  // [window][group]

  [[nodiscard]] std::size_t size() const { return index.size(); }
  [[nodiscard]] std::size_t total_steps() const;
};

WindowSeries series_from_records(const trace::TraceHeader& header, std::span<const trace::TraceRecord> records);
WindowSeries series_from_trace(const std::filesystem::path& path);

/// Re-groups the retained embedding rows of a trace. row_group maps a global
/// row id to a group id (or -1 to drop the row). Throws DegenerateInputError
/// when the trace has no per-row data.
WindowSeries row_series_from_trace(const std::filesystem::path& path, std::span<const int> row_group,
                                   std::vector<std::string> names);

struct IntervalLca {
  std::size_t t1 = 0;
  std::size_t t2 = 0;
  std::vector<std::string> names;
  std::vector<double> values;
};

/// Sum over steps [t1, t2): each window contributes its stored value times
/// the number of its steps inside the interval.
IntervalLca interval_lca(const WindowSeries& series, std::size_t t1, std::size_t t2);
IntervalLca interval_lca(const std::filesystem::path& trace_path, std::size_t t1, std::size_t t2);

/// Running per-group totals after each window, [window][group].
std::vector<std::vector<double>> cumulative(const WindowSeries& series);

std::vector<double> occupation_ratio(std::span<const double> totals);

struct RecorderOptions {
  LcaMode mode;
  std::size_t window = 15;
  bool retain_rows = true;
  std::uint64_t seed = 2;
  /// 0 selects default_threads().
  std::size_t threads = 0;
  std::size_t chunk_size = 256;
};

/// Per-step values, indexed by update t.
struct StepDiagnostics {
  /// Compensated sum of the moment vector.
  std::vector<double> total;
  /// grad . delta as one compensated dot product.
  std::vector<double> dot;
  /// Loss at theta_t on the gradient source.
  std::vector<double> loss_before;
  /// Exact mode: L(theta_{t+1}; D).
  std::vector<double> loss_after;
};

struct Fidelity {
  std::string mode;
  std::size_t steps = 0;
  /// Exact mode: median over steps of |sum A - dL| / |dL|.
  std::optional<double> median_step_residual;
  /// Total of all stored window values times their step counts.
  double interval_total = 0.0;
  /// Exact mode: L(theta_T) - L(theta_0) on D. Sampled mode: summed
  /// per-window boundary loss changes on the window batches.
  double observed_change = 0.0;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Training hook computing moment LCA at every update, smoothing it into
/// windows and committing one record per window in ascending order.
class LcaRecorder : public trainer::TrainingHook {
 public:
  LcaRecorder(const model::ParameterLayout& layout, const data::Corpus& dataset, RecorderOptions options,
              trace::TraceWriter* writer = nullptr);

  void on_step(const model::ParameterLayout& layout, const trainer::StepView& view) override;
  void on_finish(const model::ParameterSet& final_params) override;

  [[nodiscard]] const std::vector<trace::TraceRecord>& records() const { return records_; }
  [[nodiscard]] const StepDiagnostics& diagnostics() const { return diag_; }
  [[nodiscard]] const GroupingSpec& grouping() const { return grouping_; }
  [[nodiscard]] Fidelity fidelity() const;

  /// Embedding tables whose rows are retained, with global row offsets.
  static std::vector<trace::RowBlock> row_blocks(const model::ParameterLayout& layout);
  /// Header fields derived from the layout and options.
  static trace::TraceHeader make_header(const model::ParameterLayout& layout, const RecorderOptions& options);

 private:
  void commit(trace::TraceRecord record);
  trace::TraceRecord close_window(std::size_t window_index);

  const model::ParameterLayout* layout_;
  const data::Corpus* dataset_;
  RecorderOptions options_;
  trace::TraceWriter* writer_;
  GroupingSpec grouping_;
  std::vector<trace::RowBlock> blocks_;
  std::optional<DatasetObjective> objective_;
  Rng rng_;
  WindowAccumulator acc_;
  std::size_t window_index_ = 0;
  double window_loss_start_ = 0.0;
  std::optional<data::Batch> window_batch_;
  std::optional<trace::TraceRecord> pending_;
  std::optional<double> final_loss_;
  std::vector<trace::TraceRecord> records_;
  StepDiagnostics diag_;
};

}  // namespace lca_scope::lca
