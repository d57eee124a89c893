// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lca_scope/analysis.hpp"
#include "lca_scope/error.hpp"
#include "lca_scope/lca.hpp"
#include "lca_scope/trace.hpp"
#include "oracles.hpp"

namespace lca_scope::fixtures {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string dump(const json& j) { return j.dump(1) + "\n"; }

Fixture golden_trace(const fs::path& scratch, const std::string& name, experiment::LcaChoice mode,
                     std::size_t steps) {
  const auto config = tiny_config(mode, steps);
  const auto corpora = experiment::load_corpora(config);
  const fs::path trace = scratch / (name + ".lca");
  experiment::run_training(config, corpora, experiment::RunOptions{trace, false});
  trace::export_csv(trace, scratch / (name + ".csv"));
  Fixture f{name, "[DERIVED: library run under fixed seeds, regression golden]",
            "lca::LcaRecorder on tiny_config, exported with trace::export_csv", {}};
  f.files.push_back({name + ".lca", slurp(trace)});
  f.files.push_back({name + ".csv", slurp(scratch / (name + ".csv"))});
  f.files.push_back({name + ".run.json", slurp(experiment::run_metadata_path(trace))});
  return f;
}

Fixture kendall_pairs() {
  Rng rng(20240601, "fixture-kendall");
  json cases = json::array();
  for (std::size_t c = 0; c < 60; ++c) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<std::string> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = "g" + std::to_string(i);
    std::vector<std::string> b = a;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(b[i], b[rng.below(i + 1)]);
    std::vector<std::size_t> perm;
    for (const auto& s : b) perm.push_back(std::stoul(s.substr(1)));
    cases.push_back({{"n", n}, {"permutation", perm}, {"tau", oracle::kendall_tau_pairs(a, b)}});
  }
  Fixture f{"kendall_pairs", "[DERIVED: O(n^2) pair enumeration]", "oracle::kendall_tau_pairs", {}};
  f.files.push_back({"kendall_pairs.json", dump(json{{"cases", cases}})});
  return f;
}

Fixture fd_gradient() {
  const auto config = fd_model_config();
  const auto params = model::build_model(config);
  const auto batch = fd_batch();
  const auto& layout = params.layout();
  const auto f = [&](std::span<const double> theta) { return model::forward_loss(layout, theta, batch).value; };
  const auto grad = oracle::central_differences(f, params.values(), 1e-4);
  json j{{"model", config}, {"eps", 1e-4}, {"step", "1e-4 * max(1, |theta_i|)"}, {"loss", f(params.values())},
         {"gradient", grad}};
  Fixture fx{"fd_model_grad", "[DERIVED: central finite differences]", "oracle::central_differences", {}};
  fx.files.push_back({"fd_model_grad.json", dump(j)});
  return fx;
}

Fixture oracle_values() {
  json gelu = json::array();
  for (double x : {1.0, -0.5, 2.25, -3.0}) {
    gelu.push_back({{"x", x}, {"value", static_cast<double>(oracle::gelu_quadrature(x))}});
  }
  const std::vector<double> sm_in{0.3, -1.2, 2.5, 0.0, 0.7};
  std::vector<double> sm;
  for (long double v : oracle::softmax(sm_in)) sm.push_back(static_cast<double>(v));
  const std::vector<double> logits{0.1, -0.4, 1.3, 0.2, -2.0, 1.5, 0.5, -0.5, 0.25, 0.0};
  const std::vector<std::int32_t> targets{2, 0};
  const double ce = static_cast<double>(oracle::cross_entropy(logits, 5, targets, -1));
  const auto q = oracle::quadratic_sgd_step(std::vector<double>{1.0, 2.0}, 0.1);
  json j{{"gelu", gelu},
         {"softmax", {{"input", sm_in}, {"output", sm}}},
         {"cross_entropy", {{"logits", logits}, {"vocab", 5}, {"targets", targets}, {"value", ce}}},
         {"zipf_rank1_share", {{"n", 97}, {"s", 1.0}, {"value", static_cast<double>(oracle::inverse_harmonic(97, 1.0))}}},
         {"quadratic_step",
          {{"theta", {1.0, 2.0}},
           {"lr", 0.1},
           {"moment", q.moment},
           {"moment_sum", static_cast<double>(q.moment_sum)},
           {"true_change", static_cast<double>(q.true_change)},
           {"residual", static_cast<double>(q.residual)}}}};
  Fixture f{"oracle_values",
            "[DERIVED: long-double Simpson quadrature, long-double softmax and log-softmax, harmonic number, exact "
            "quadratic loss]",
            "oracle::gelu_quadrature, oracle::softmax, oracle::cross_entropy, oracle::inverse_harmonic, "
            "oracle::quadratic_sgd_step",
            {}};
  f.files.push_back({"oracle_values.json", dump(j)});
  return f;
}

Fixture pilot_copy() {
  data::CorpusSpec spec;
  spec.vocab = 64;
  spec.n_examples = 1000;
  spec.min_len = 1;
  spec.max_len = 4;
  const auto corpus = data::gen_corpus(spec);
  model::ModelConfig mc;
  mc.d_model = 8;
  mc.ffn_dim = 16;
  mc.src_vocab = mc.tgt_vocab = 64;
  mc.max_len = 6;
  trainer::OptimizerConfig oc;
  oc.lr = 0.05;
  oc.steps = 2000;
  const lca::DatasetObjective objective(corpus, 256, 1);
  const model::ParameterLayout layout(mc);
  const double initial = objective.loss(layout, model::build_model(mc).values());
  const auto result = trainer::train(mc, oc, corpus, {}, trainer::Seeds{});
  const double final_loss = objective.loss(layout, result.params.values());
  json j{{"corpus", spec}, {"model", mc}, {"optimizer", oc}, {"seeds", trainer::Seeds{}},
         {"initial_loss", initial}, {"final_loss", final_loss}, {"ratio", final_loss / initial}};
  Fixture f{"pilot_copy_v64", "[DERIVED: end-to-end training run]", "trainer::train + lca::DatasetObjective::loss",
            {}};
  f.files.push_back({"pilot_copy_v64.json", dump(j)});
  return f;
}

}  // namespace

experiment::ExperimentConfig tiny_config(experiment::LcaChoice mode, std::size_t steps) {
  auto c = experiment::desk_preset();
  c.model.d_model = 4;
  c.model.ffn_dim = 8;
  c.model.src_vocab = c.model.tgt_vocab = 12;
  c.model.max_len = 5;
  c.data.synthetic.vocab = 12;
  c.data.synthetic.n_examples = 200;
  c.data.synthetic.min_len = 1;
  c.data.synthetic.max_len = 3;
  c.data.test_examples = 50;
  c.optimizer.steps = steps;
  c.optimizer.batch_size = 16;
  c.optimizer.lr = 0.1;
  c.lca.mode = mode;
  c.lca.batch_size = 16;
  c.lca.threads = 1;
  c.output_dir = "tiny";
  return c;
}

model::ModelConfig fd_model_config() {
  model::ModelConfig c;
  c.num_layers = 1;
  c.d_model = 4;
  c.num_heads = 2;
  c.ffn_dim = 6;
  c.src_vocab = 7;
  c.tgt_vocab = 8;
  c.max_len = 5;
  c.seed = 11;
  c.output_bias = true;
  return c;
}

data::Batch fd_batch() {
  const std::vector<data::Example> examples{{{3, 4, 5}, {6, 3, 7}}, {{6}, {4, 5}}, {{5, 5, 3, 4}, {3}}};
  return data::make_batch(examples);
}

std::vector<Fixture> generate_all(const fs::path& scratch) {
  fs::create_directories(scratch);
  std::vector<Fixture> out;
  out.push_back(golden_trace(scratch, "tiny_exact", experiment::LcaChoice::kExact, 60));
  out.push_back(golden_trace(scratch, "tiny_sampled", experiment::LcaChoice::kSampled, 50));
  out.push_back(kendall_pairs());
  out.push_back(fd_gradient());
  out.push_back(oracle_values());
  out.push_back(pilot_copy());
  return out;
}

json manifest(const std::vector<Fixture>& fixtures) {
  json list = json::array();
  for (const auto& f : fixtures) {
    json files = json::array();
    for (const auto& file : f.files) files.push_back(file.name);
    list.push_back({{"name", f.name}, {"provenance", f.provenance}, {"oracle", f.oracle}, {"files", files},
                    {"regen", kRegenCommand}});
  }
  return json{{"fixtures", list}};
}

}  // namespace lca_scope::fixtures
