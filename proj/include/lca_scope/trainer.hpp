// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "lca_scope/data.hpp"
#include "lca_scope/model.hpp"

namespace lca_scope::trainer {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.05;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  /// Linear warmup length; 0 disables.
  std::size_t warmup_steps = 0;

  void validate() const;
  [[nodiscard]] double learning_rate(std::size_t step) const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

/// Independent seeds for the named rng streams. Parameter init uses
/// ModelConfig::seed.
struct Seeds {
  std::uint64_t shuffle = 1;
  std::uint64_t lca = 2;
};

void to_json(nlohmann::json& j, const Seeds& s);
void from_json(const nlohmann::json& j, Seeds& s);

struct OptimizerState {
  std::vector<double> first_moment;   // SGD momentum buffer or Adam m
  std::vector<double> second_moment;  // Adam v
  std::size_t step = 0;
};

OptimizerState make_optimizer_state(const OptimizerConfig& config, std::size_t num_params);

/// theta_{t+1} - theta_t, bit-identical to the subtraction of the stored
/// parameter vectors.
struct StepDelta {
  std::size_t step = 0;
  std::vector<double> delta;
  double loss = 0.0;
};

/// Applies one optimizer update to theta in place from a precomputed gradient.
StepDelta apply_gradient(std::vector<double>& theta, std::span<const double> grad, double loss,
                         const OptimizerConfig& config, OptimizerState& state);

/// Forward, backward and update on one batch. Throws NumericError naming the
/// first non-finite gradient entry.
StepDelta train_step(model::ParameterSet& params, const data::Batch& batch, const OptimizerConfig& config,
                     OptimizerState& state);

/// What a hook sees for update t. All views are read-only and only valid
/// during the call.
struct StepView {
  std::size_t step = 0;
  std::span<const double> before;
  std::span<const double> after;
  const StepDelta* delta = nullptr;
  const data::Batch* batch = nullptr;
};

class TrainingHook {
 public:
  virtual ~TrainingHook() = default;
  virtual void on_step(const model::ParameterLayout& layout, const StepView& view) = 0;
  virtual void on_finish(const model::ParameterSet& final_params) { (void)final_params; }
};

struct RunMetadata {
  model::ModelConfig model;
  OptimizerConfig optimizer;
  Seeds seeds;
  std::vector<double> train_loss;
  double wall_clock_seconds = 0.0;
  double hook_seconds = 0.0;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct TrainResult {
  model::ParameterSet params;
  RunMetadata metadata;
};

/// Runs optimizer.steps updates on batches streamed from the corpus. Hooks
/// are invoked once per update in ascending step order.
TrainResult train(const model::ModelConfig& model_config, const OptimizerConfig& optimizer, const data::Corpus& corpus,
                  std::span<TrainingHook* const> hooks, const Seeds& seeds);

}  // namespace lca_scope::trainer
