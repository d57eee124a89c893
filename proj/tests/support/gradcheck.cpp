// SPDX-License-Identifier: Apache-2.0
#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lca_scope/data.hpp"
#include "lca_scope/rng.hpp"
#include "oracles.hpp"

namespace lca_scope::gradcheck {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Entries bounded away from zero so relu's kink is never straddled.
Tensor off_kink_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    const double mag = rng.uniform(0.1, 1.5);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

ad::Var contract(ad::Tape& tape, ad::Var y) {
  Rng rng(7, "gradcheck-weights");
  Tensor w(y.shape());
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(y, tape.constant(std::move(w))));
}

double eval(const OpCase& c, std::span<const double> theta, ad::Gradient* grad) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  std::size_t offset = 0;
  for (const auto& in : c.inputs) {
    Tensor t(in.shape(), std::vector<double>(theta.begin() + static_cast<std::ptrdiff_t>(offset),
                                             theta.begin() + static_cast<std::ptrdiff_t>(offset + in.size())));
    vars.push_back(tape.parameter(std::move(t), offset));
    offset += in.size();
  }
  ad::Var y = c.build(tape, vars);
  ad::Var loss = y.value().size() == 1 && y.shape().empty() ? y : contract(tape, y);
  if (grad != nullptr) *grad = tape.backward(loss, offset);
  return loss.value().item();
}

}  // namespace

double max_rel_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, oracle::relative_error(a[i], b[i], kFloor));
  return worst;
}

std::vector<OpCase> op_cases(std::uint64_t seed) {
  Rng rng(seed, "gradcheck-inputs");
  std::vector<OpCase> cases;
  using ad::Var;
  using Vars = std::span<const Var>;

  cases.push_back({"matmul", {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                   [](ad::Tape&, Vars v) { return ad::matmul(v[0], v[1]); }});
  cases.push_back({"matmul_batched", {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 3}, rng)},
                   [](ad::Tape&, Vars v) { return ad::matmul(v[0], v[1]); }});
  cases.push_back({"matmul_shared_rhs", {random_tensor({2, 3, 4}, rng), random_tensor({4, 2}, rng)},
                   [](ad::Tape&, Vars v) { return ad::matmul(v[0], v[1]); }});
  cases.push_back({"add", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
                   [](ad::Tape&, Vars v) { return ad::add(v[0], v[1]); }});
  cases.push_back({"add_scalar", {random_tensor({2, 3}, rng), random_tensor({}, rng)},
                   [](ad::Tape&, Vars v) { return ad::add(v[0], v[1]); }});
  cases.push_back({"mul", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
                   [](ad::Tape&, Vars v) { return ad::mul(v[0], v[1]); }});
  cases.push_back({"mul_scalar", {random_tensor({}, rng), random_tensor({4}, rng)},
                   [](ad::Tape&, Vars v) { return ad::mul(v[0], v[1]); }});
  cases.push_back({"relu", {off_kink_tensor({3, 4}, rng)}, [](ad::Tape&, Vars v) { return ad::relu(v[0]); }});
  cases.push_back({"gelu", {random_tensor({3, 4}, rng, -3.0, 3.0)}, [](ad::Tape&, Vars v) { return ad::gelu(v[0]); }});
  cases.push_back({"softmax_last", {random_tensor({3, 5}, rng, -3.0, 3.0)},
                   [](ad::Tape&, Vars v) { return ad::softmax(v[0], -1); }});
  cases.push_back({"softmax_axis0", {random_tensor({4, 3}, rng, -3.0, 3.0)},
                   [](ad::Tape&, Vars v) { return ad::softmax(v[0], 0); }});
  cases.push_back({"layer_norm", {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)},
                   [](ad::Tape&, Vars v) { return ad::layer_norm(v[0], v[1], v[2]); }});
  cases.push_back({"embedding_lookup", {random_tensor({5, 3}, rng)}, [](ad::Tape&, Vars v) {
                     static const std::vector<std::int32_t> ids{4, 1, 1, 0};
                     return ad::embedding_lookup(v[0], ids);
                   }});
  cases.push_back({"cross_entropy", {random_tensor({4, 6}, rng, -2.0, 2.0)}, [](ad::Tape&, Vars v) {
                     static const std::vector<std::int32_t> targets{2, 0, 5, 0};
                     return ad::cross_entropy(v[0], targets, 0);
                   }});
  cases.push_back({"reshape", {random_tensor({2, 6}, rng)},
                   [](ad::Tape&, Vars v) { return ad::reshape(v[0], {3, 4}); }});
  cases.push_back({"transpose", {random_tensor({2, 3, 4}, rng)},
                   [](ad::Tape&, Vars v) { return ad::transpose(v[0], {2, 0, 1}); }});
  cases.push_back({"scale", {random_tensor({3}, rng)}, [](ad::Tape&, Vars v) { return ad::scale(v[0], -2.5); }});
  cases.push_back({"sum", {random_tensor({2, 2}, rng)}, [](ad::Tape&, Vars v) { return ad::sum(v[0]); }});
  return cases;
}

Result check(const OpCase& c) {
  std::vector<double> theta;
  for (const auto& in : c.inputs) theta.insert(theta.end(), in.data().begin(), in.data().end());
  ad::Gradient grad;
  eval(c, theta, &grad);
  const auto fd = oracle::central_differences([&](std::span<const double> x) { return eval(c, x, nullptr); }, theta,
                                              kEps);
  return {c.name, theta.size(), max_rel_error(grad, fd)};
}

Result check_model(std::uint64_t seed) {
  // Desk-scale width with the default gelu activation; relu's kink makes
  // central differences meaningless wherever a pre-activation sits within h
  // of zero.
  model::ModelConfig config;
  config.num_layers = 2;
  config.d_model = 8;
  config.num_heads = 2;
  config.ffn_dim = 16;
  config.src_vocab = 24;
  config.tgt_vocab = 24;
  config.max_len = 8;
  config.seed = seed;
  config.output_bias = true;
  const auto params = model::build_model(config);
  data::CorpusSpec spec;
  spec.vocab = 24;
  spec.n_examples = 32;
  spec.min_len = 1;
  spec.max_len = 4;
  spec.seed = seed;
  const auto corpus = data::gen_corpus(spec);
  const auto batch = data::make_batch(corpus.examples);
  const auto& layout = params.layout();
  const auto lg = model::loss_and_grad(layout, params.values(), batch);
  const auto fd = oracle::central_differences(
      [&](std::span<const double> x) { return model::forward_loss(layout, x, batch).value; }, params.values(), kEps);
  return {"model_seed_" + std::to_string(seed), params.size(), max_rel_error(lg.grad, fd)};
}

}  // namespace lca_scope::gradcheck
