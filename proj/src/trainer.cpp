// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "lca_scope/error.hpp"

namespace lca_scope::trainer {

using nlohmann::json;

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("optimizer: lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw UsageError("optimizer: momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw UsageError("optimizer: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw UsageError("optimizer: eps must be > 0");
  if (batch_size == 0) throw UsageError("optimizer: batch_size must be >= 1");
}

double OptimizerConfig::learning_rate(std::size_t step) const {
  if (warmup_steps == 0 || step + 1 >= warmup_steps) return lr;
  return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

void to_json(json& j, const OptimizerConfig& c) {
  j = json{{"kind", c.kind == OptimizerKind::kSgd ? "sgd" : "adam"},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"steps", c.steps},
           {"batch_size", c.batch_size},
           {"warmup_steps", c.warmup_steps}};
}

void from_json(const json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  const auto kind = j.value("kind", std::string("sgd"));
  if (kind == "sgd") {
    c.kind = OptimizerKind::kSgd;
  } else if (kind == "adam") {
    c.kind = OptimizerKind::kAdam;
  } else {
    throw UsageError("optimizer: unknown kind '" + kind + "' (expected sgd|adam)");
  }
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
}

void to_json(json& j, const Seeds& s) { j = json{{"shuffle", s.shuffle}, {"lca", s.lca}}; }

void from_json(const json& j, Seeds& s) {
  Seeds d;
  s.shuffle = j.value("shuffle", d.shuffle);
  s.lca = j.value("lca", d.lca);
}

OptimizerState make_optimizer_state(const OptimizerConfig& config, std::size_t num_params) {
  OptimizerState state;
  if (config.kind == OptimizerKind::kAdam || config.momentum > 0.0) state.first_moment.assign(num_params, 0.0);
  if (config.kind == OptimizerKind::kAdam) state.second_moment.assign(num_params, 0.0);
  return state;
}

StepDelta apply_gradient(std::vector<double>& theta, std::span<const double> grad, double loss,
                         const OptimizerConfig& config, OptimizerState& state) {
  if (grad.size() != theta.size()) throw DimensionError("apply_gradient: gradient length mismatch");
  const std::size_t k = theta.size();
  const double lr = config.learning_rate(state.step);
  StepDelta out;
  out.step = state.step;
  out.loss = loss;
  out.delta.resize(k);

  if (config.kind == OptimizerKind::kSgd) {
    if (config.momentum > 0.0) {
      if (state.first_moment.size() != k) state.first_moment.assign(k, 0.0);
      for (std::size_t i = 0; i < k; ++i) {
        state.first_moment[i] = config.momentum * state.first_moment[i] + grad[i];
        const double next = theta[i] - lr * state.first_moment[i];
        out.delta[i] = next - theta[i];
        theta[i] = next;
      }
    } else {
      for (std::size_t i = 0; i < k; ++i) {
        const double next = theta[i] - lr * grad[i];
        out.delta[i] = next - theta[i];
        theta[i] = next;
      }
    }
  } else {
    if (state.first_moment.size() != k) state.first_moment.assign(k, 0.0);
    if (state.second_moment.size() != k) state.second_moment.assign(k, 0.0);
    const double t = static_cast<double>(state.step + 1);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < k; ++i) {
      auto& m = state.first_moment[i];
      auto& v = state.second_moment[i];
      m = config.beta1 * m + (1.0 - config.beta1) * grad[i];
      v = config.beta2 * v + (1.0 - config.beta2) * grad[i] * grad[i];
      const double mhat = m / c1;
      const double vhat = v / c2;
      const double next = theta[i] - lr * mhat / (std::sqrt(vhat) + config.eps);
      out.delta[i] = next - theta[i];
      theta[i] = next;
    }
  }
  ++state.step;
  return out;
}

StepDelta train_step(model::ParameterSet& params, const data::Batch& batch, const OptimizerConfig& config,
                     OptimizerState& state) {
  auto lg = model::loss_and_grad(params, batch);
  if (!std::isfinite(lg.loss)) {
    throw NumericError("step " + std::to_string(state.step) + ": non-finite training loss");
  }
  for (std::size_t i = 0; i < lg.grad.size(); ++i) {
    if (!std::isfinite(lg.grad[i])) {
      std::ostringstream msg;
      for (const auto& t : params.layout().tensors()) {
        if (i >= t.offset && i < t.offset + t.size) {
          msg << "step " << state.step << ": non-finite gradient " << lg.grad[i] << " at " << t.name << "["
              << (i - t.offset) << "] (flat index " << i << "), batch loss " << lg.loss;
          break;
        }
      }
      throw NumericError(msg.str());
    }
  }
  return apply_gradient(params.mutable_values(), lg.grad, lg.loss, config, state);
}

json RunMetadata::to_json() const {
  return json{{"model", model},
              {"optimizer", optimizer},
              {"seeds", seeds},
              {"train_loss", train_loss},
              {"wall_clock_seconds", wall_clock_seconds},
              {"hook_seconds", hook_seconds}};
}

TrainResult train(const model::ModelConfig& model_config, const OptimizerConfig& optimizer, const data::Corpus& corpus,
                  std::span<TrainingHook* const> hooks, const Seeds& seeds) {
  optimizer.validate();
  const auto started = std::chrono::steady_clock::now();
  model::ParameterSet params = model::build_model(model_config);
  OptimizerState state = make_optimizer_state(optimizer, params.size());
  data::BatchStream stream(corpus, optimizer.batch_size, seeds.shuffle, true);

  RunMetadata meta;
  meta.model = model_config;
  meta.optimizer = optimizer;
  meta.seeds = seeds;
  meta.train_loss.reserve(optimizer.steps);

  std::vector<double> before;
  double hook_seconds = 0.0;
  for (std::size_t t = 0; t < optimizer.steps; ++t) {
    const data::Batch batch = stream.next();
    if (!hooks.empty()) before.assign(params.values().begin(), params.values().end());
    const StepDelta delta = train_step(params, batch, optimizer, state);
    meta.train_loss.push_back(delta.loss);
    if (!hooks.empty()) {
      const auto h0 = std::chrono::steady_clock::now();
      StepView view{t, before, params.values(), &delta, &batch};
      for (auto* hook : hooks) hook->on_step(params.layout(), view);
      hook_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - h0).count();
    }
  }
  const auto h0 = std::chrono::steady_clock::now();
  for (auto* hook : hooks) hook->on_finish(params);
  hook_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - h0).count();

  meta.hook_seconds = hook_seconds;
  meta.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return TrainResult{std::move(params), std::move(meta)};
}

}  // namespace lca_scope::trainer
