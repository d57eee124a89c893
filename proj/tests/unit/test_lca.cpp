// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "lca_scope/error.hpp"
#include "lca_scope/lca.hpp"
#include "lca_scope/trainer.hpp"
#include "oracles.hpp"

using namespace lca_scope;
using lca::GradientSource;
using lca::LcaMode;

namespace {

const std::filesystem::path kFixtures = LCA_SCOPE_FIXTURE_DIR;

data::Corpus corpus(std::size_t n, std::size_t min_len, std::size_t max_len, std::uint64_t seed = 1) {
  data::CorpusSpec spec;
  spec.vocab = 12;
  spec.n_examples = n;
  spec.min_len = min_len;
  spec.max_len = max_len;
  spec.seed = seed;
  return data::gen_corpus(spec);
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.num_layers = 1;
  c.d_model = 4;
  c.num_heads = 2;
  c.ffn_dim = 8;
  c.src_vocab = c.tgt_vocab = 12;
  c.max_len = 5;
  return c;
}

LcaMode exact_mode() { return LcaMode{GradientSource::kExact, data::Split::kTrain, 1}; }
LcaMode sampled_mode(std::size_t bs) { return LcaMode{GradientSource::kSampled, data::Split::kTrain, bs}; }

double rel(double a, double b) { return oracle::relative_error(a, b, 1e-300); }

double max_rel(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, oracle::relative_error(a[i], b[i], floor));
  return m;
}

lca::WindowSeries make_series(std::vector<std::vector<double>> values, std::size_t window,
                              std::vector<std::uint32_t> steps = {}) {
  lca::WindowSeries s;
  s.window = window;
  for (std::size_t g = 0; g < values.front().size(); ++g) s.names.push_back("g" + std::to_string(g));
  for (std::size_t k = 0; k < values.size(); ++k) {
    s.index.push_back(k);
    s.steps.push_back(steps.empty() ? static_cast<std::uint32_t>(window) : steps[k]);
  }
  s.values = std::move(values);
  return s;
}

}  // namespace

TEST(EvalGradient, ExactOnOneExampleEqualsSampled) {
  const auto c = corpus(1, 2, 3);
  const auto params = model::build_model(small_model());
  Rng rng(3, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  const auto sampled = lca::eval_gradient(params, sampled_mode(1), c, rng);
  ASSERT_EQ(exact.grad.size(), sampled.grad.size());
  for (std::size_t i = 0; i < exact.grad.size(); ++i) EXPECT_EQ(exact.grad[i], sampled.grad[i]);
  EXPECT_EQ(exact.loss, sampled.loss);
  ASSERT_TRUE(sampled.batch.has_value());
  EXPECT_FALSE(exact.batch.has_value());
}

TEST(EvalGradient, ExactIsTokenWeightedMeanOfAnyBatching) {
  const auto c = corpus(37, 1, 4);
  const auto params = model::build_model(small_model());
  Rng rng(1, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  for (std::size_t bs : {1, 5, 16, 37}) {
    const auto batches = data::make_batches(c, bs, 9, true);
    std::vector<KahanSum> acc(exact.grad.size());
    std::size_t tokens = 0;
    for (const auto& b : batches) {
      const auto r = model::loss_and_grad(params, b);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(r.tokens) * r.grad[i];
      tokens += r.tokens;
    }
    EXPECT_EQ(tokens, exact.tokens);
    std::vector<double> mean(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = acc[i].value() / static_cast<double>(tokens);
    EXPECT_LT(max_rel(exact.grad, mean, 1e-300), 1e-12) << "batch size " << bs;
  }
}

TEST(EvalGradient, EqualLengthExamplesMakeItTheExampleMean) {
  const auto c = corpus(24, 3, 3);
  const auto params = model::build_model(small_model());
  Rng rng(1, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  const auto batches = data::make_batches(c, 7, 2, false);
  std::vector<KahanSum> acc(exact.grad.size());
  for (const auto& b : batches) {
    const auto r = model::loss_and_grad(params, b);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(b.size) * r.grad[i];
  }
  std::vector<double> mean(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = acc[i].value() / 24.0;
  EXPECT_LT(max_rel(exact.grad, mean, 1e-300), 1e-12);
}

TEST(EvalGradient, ChunkSizeAndThreadsDoNotMatter) {
  const auto c = corpus(50, 1, 4);
  const auto params = model::build_model(small_model());
  const lca::DatasetObjective reference(c, 256, 1);
  const auto ref = reference.gradient(params.layout(), params.values());
  for (std::size_t chunk : {1, 3, 17}) {
    const lca::DatasetObjective obj(c, chunk, 1);
    const auto r = obj.gradient(params.layout(), params.values());
    EXPECT_LT(max_rel(ref.grad, r.grad, 1e-300), 1e-12);
    EXPECT_NEAR(r.loss, ref.loss, 1e-12 * ref.loss);
    const lca::DatasetObjective threaded(c, chunk, 4);
    const auto t = threaded.gradient(params.layout(), params.values());
    EXPECT_EQ(t.grad, r.grad) << "chunk " << chunk;
    EXPECT_EQ(t.loss, r.loss);
  }
}

TEST(EvalGradient, SampledIsUnbiasedPerGroup) {
  // Equal-length examples, so a batch's token mean is its example mean and
  // the expected sampled gradient is the exact one.
  const auto c = corpus(40, 3, 3, 5);
  const auto params = model::build_model(small_model());
  const auto grouping = model::module_grouping(params.layout());
  Rng rng(11, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  const auto target = lca::group_aggregate(exact.grad, grouping);

  const std::size_t n = 500;
  const std::size_t groups = grouping.num_groups();
  std::vector<double> sum(groups, 0.0);
  std::vector<double> sum_sq(groups, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto g = lca::group_aggregate(lca::eval_gradient(params, sampled_mode(4), c, rng).grad, grouping);
    for (std::size_t k = 0; k < groups; ++k) {
      sum[k] += g[k];
      sum_sq[k] += g[k] * g[k];
    }
  }
  for (std::size_t k = 0; k < groups; ++k) {
    const double mean = sum[k] / n;
    const double var = (sum_sq[k] - n * mean * mean) / (n - 1);
    const double se = std::sqrt(std::max(var, 0.0) / n);
    EXPECT_LE(std::abs(mean - target[k]), 3.0 * se + 1e-15) << grouping.names[k];
  }
}

TEST(EvalGradient, SampledSpreadShrinksWithBatchSize) {
  const auto c = corpus(16, 3, 3, 7);
  const auto params = model::build_model(small_model());
  Rng rng(5, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  auto mse = [&](std::size_t bs) {
    double total = 0.0;
    for (int r = 0; r < 200; ++r) {
      const auto g = lca::eval_gradient(params, sampled_mode(bs), c, rng).grad;
      for (std::size_t i = 0; i < g.size(); ++i) total += (g[i] - exact.grad[i]) * (g[i] - exact.grad[i]);
    }
    return total / 200.0;
  };
  const double one = mse(1);
  const double full = mse(16);
  // Sampling with replacement: spread falls as 1/B.
  EXPECT_GT(one / full, 16.0 / 2.0);
  EXPECT_LT(one / full, 16.0 * 2.0);
}

TEST(EvalGradient, SampledEqualsExactWhenEveryDrawIsTheSame) {
  data::Corpus c = corpus(1, 3, 3);
  for (int i = 0; i < 9; ++i) c.examples.push_back(c.examples.front());
  const auto params = model::build_model(small_model());
  Rng rng(5, "lca");
  const auto exact = lca::eval_gradient(params, exact_mode(), c, rng);
  const auto sampled = lca::eval_gradient(params, sampled_mode(c.size()), c, rng);
  EXPECT_LT(max_rel(exact.grad, sampled.grad, 1e-300), 1e-12);
}

TEST(EvalGradient, Errors) {
  const auto params = model::build_model(small_model());
  Rng rng(1, "lca");
  data::Corpus empty;
  EXPECT_THROW(lca::eval_gradient(params, exact_mode(), empty, rng), DegenerateInputError);
  EXPECT_THROW(lca::eval_gradient(params, sampled_mode(4), empty, rng), DegenerateInputError);
  EXPECT_THROW(lca::eval_gradient(params, sampled_mode(0), corpus(3, 1, 2), rng), UsageError);
  EXPECT_THROW(lca::DatasetObjective(corpus(3, 1, 2), 0), UsageError);
}

TEST(LcaMode, Strings) {
  EXPECT_EQ(sampled_mode(8).describe(), "sampled(train, batch_size=8)");
  EXPECT_EQ(exact_mode().describe(), "exact(train)");
  EXPECT_THROW(lca::parse_gradient_source("both"), UsageError);
  nlohmann::json j = sampled_mode(8);
  EXPECT_EQ(j.get<LcaMode>(), sampled_mode(8));
}

TEST(MomentLca, ZeroGradient) {
  const auto a = lca::moment_lca(std::vector<double>(5, 0.0), std::vector<double>{1, -2, 3, 0.5, 9});
  for (double v : a) EXPECT_EQ(v, 0.0);
}

TEST(MomentLca, ElementwiseProduct) {
  const auto a = lca::moment_lca(std::vector<double>{2.0, -1.0}, std::vector<double>{0.5, 0.5});
  EXPECT_EQ(a, (std::vector<double>{1.0, -0.5}));
  EXPECT_EQ(kahan_sum(a), 0.5);
}

TEST(MomentLca, QuadraticSgdStep) {
  // L = 0.5 ||theta||^2 at (1, 2), one SGD step at lr 0.1.
  const std::vector<double> theta{1.0, 2.0};
  std::vector<double> next = theta;
  trainer::OptimizerConfig cfg;
  cfg.lr = 0.1;
  auto state = trainer::make_optimizer_state(cfg, 2);
  const auto d = trainer::apply_gradient(next, theta, 0.0, cfg, state);
  const auto a = lca::moment_lca(theta, d.delta);
  EXPECT_NEAR(a[0], -0.1, 1e-15);
  EXPECT_NEAR(a[1], -0.4, 1e-15);
  EXPECT_NEAR(kahan_sum(a), -0.5, 1e-15);
  const double before = 0.5 * (theta[0] * theta[0] + theta[1] * theta[1]);
  const double after = 0.5 * (next[0] * next[0] + next[1] * next[1]);
  EXPECT_NEAR(after - before, -0.475, 1e-14);
  EXPECT_NEAR((after - before) - kahan_sum(a), 0.025, 1e-14);
  EXPECT_NEAR(0.5 * 0.1 * 0.1 * 5.0, 0.025, 1e-16);

  const auto o = oracle::quadratic_sgd_step(theta, 0.1);
  EXPECT_NEAR(static_cast<double>(o.residual), 0.025, 1e-15);
  std::ifstream in(kFixtures / "oracle_values.json");
  const auto frozen = nlohmann::json::parse(in)["quadratic_step"];
  EXPECT_NEAR(kahan_sum(a), frozen["moment_sum"].get<double>(), 1e-15);
  EXPECT_NEAR(a[0], frozen["moment"][0].get<double>(), 1e-15);
  EXPECT_NEAR(a[1], frozen["moment"][1].get<double>(), 1e-15);
  EXPECT_NEAR((after - before) - kahan_sum(a), frozen["residual"].get<double>(), 1e-14);
}

TEST(MomentLca, LengthMismatch) {
  EXPECT_THROW(lca::moment_lca(std::vector<double>(3), std::vector<double>(2)), DimensionError);
}

TEST(Smooth, ConstantStream) {
  std::vector<std::vector<double>> stream(45, std::vector<double>{0.3, -7.0});
  const auto s = lca::smooth(stream, 15);
  ASSERT_EQ(s.values.size(), 3u);
  EXPECT_FALSE(s.last_partial);
  for (const auto& w : s.values) {
    EXPECT_NEAR(w[0], 0.3, 1e-16);
    EXPECT_EQ(w[1], -7.0);
  }
}

TEST(Smooth, MeanOfOneToFifteen) {
  std::vector<std::vector<double>> stream;
  for (int i = 1; i <= 15; ++i) stream.push_back({static_cast<double>(i)});
  const auto s = lca::smooth(stream, 15);
  ASSERT_EQ(s.values.size(), 1u);
  EXPECT_EQ(s.values[0][0], 8.0);
  EXPECT_EQ(s.steps[0], 15u);
}

TEST(Smooth, WindowOneIsIdentity) {
  std::vector<std::vector<double>> stream{{1.5, -2.0}, {0.1, 3.0}, {1e-300, -0.0}};
  const auto s = lca::smooth(stream, 1);
  ASSERT_EQ(s.values.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(s.values[k], stream[k]);
  EXPECT_FALSE(s.last_partial);
}

TEST(Smooth, PartialWindowUsesItsOwnLength) {
  std::vector<std::vector<double>> stream;
  for (int i = 1; i <= 7; ++i) stream.push_back({static_cast<double>(i)});
  const auto s = lca::smooth(stream, 5);
  ASSERT_EQ(s.values.size(), 2u);
  EXPECT_EQ(s.values[0][0], 3.0);
  EXPECT_EQ(s.values[1][0], 6.5);
  EXPECT_EQ(s.steps[1], 2u);
  EXPECT_TRUE(s.last_partial);
}

TEST(Smooth, Errors) {
  std::vector<std::vector<double>> stream{{1.0}, {1.0, 2.0}};
  EXPECT_THROW(lca::smooth(stream, 0), UsageError);
  EXPECT_THROW(lca::smooth(stream, 2), DimensionError);
  EXPECT_TRUE(lca::smooth({}, 3).values.empty());
}

TEST(GroupAggregate, SingleGroupSum) {
  GroupingSpec g{{"all"}, {0, 0, 0, 0}};
  EXPECT_EQ(lca::group_aggregate(std::vector<double>{1, 2, 3, -0.5}, g)[0], 5.5);
}

TEST(GroupAggregate, MeanOfIdenticalValues) {
  GroupingSpec g{{"a", "b"}, {0, 1, 0, 1, 1}};
  const auto m = lca::group_aggregate(std::vector<double>{0.7, 2, 0.7, 2, 2}, g, lca::Aggregation::kMean);
  EXPECT_NEAR(m[0], 0.7, 1e-16);
  EXPECT_EQ(m[1], 2.0);
}

TEST(GroupAggregate, PartitionIdentity) {
  Rng rng(21, "partition");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(2000);
    const std::size_t groups = 1 + rng.below(12);
    GroupingSpec g;
    for (std::size_t i = 0; i < groups; ++i) g.names.push_back("g" + std::to_string(i));
    std::vector<double> v(k);
    for (std::size_t i = 0; i < k; ++i) {
      g.group_of.push_back(static_cast<std::uint32_t>(rng.below(groups)));
      v[i] = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(8)) - 4.0);
    }
    const auto agg = lca::group_aggregate(v, g);
    EXPECT_LE(rel(kahan_sum(agg), kahan_sum(v)), 1e-12);
  }
}

TEST(GroupAggregate, NonPartitionRejected) {
  GroupingSpec short_map{{"a"}, {0, 0}};
  EXPECT_THROW(lca::group_aggregate(std::vector<double>(3, 1.0), short_map), DimensionError);
  GroupingSpec bad_id{{"a"}, {0, 1, 0}};
  EXPECT_THROW(lca::group_aggregate(std::vector<double>(3, 1.0), bad_id), DimensionError);
  GroupingSpec dup{{"a", "a"}, {0, 1, 0}};
  EXPECT_THROW(lca::group_aggregate(std::vector<double>(3, 1.0), dup), DimensionError);
}

TEST(IntervalLca, OneWindowIsValuesTimesW) {
  const auto s = make_series({{1.0, -2.0}, {0.25, 3.0}, {4.0, 0.5}}, 15);
  const auto r = lca::interval_lca(s, 15, 30);
  EXPECT_EQ(r.values, (std::vector<double>{0.25 * 15, 3.0 * 15}));
  EXPECT_EQ(r.t1, 15u);
  EXPECT_EQ(r.t2, 30u);
}

TEST(IntervalLca, PartialOverlapWeightsBySteps) {
  const auto s = make_series({{1.0}, {10.0}}, 4);
  EXPECT_EQ(lca::interval_lca(s, 2, 5).values[0], 2 * 1.0 + 1 * 10.0);
}

TEST(IntervalLca, Additivity) {
  Rng rng(4, "additivity");
  std::vector<std::vector<double>> values(40, std::vector<double>(6));
  for (auto& w : values) {
    for (auto& v : w) v = rng.normal() * 1e-3;
  }
  const auto s = make_series(values, 15);
  const std::size_t t = s.total_steps();
  for (std::size_t mid : {t / 2, std::size_t{7}, std::size_t{15}, t - 1}) {
    const auto whole = lca::interval_lca(s, 0, t);
    const auto left = lca::interval_lca(s, 0, mid);
    const auto right = lca::interval_lca(s, mid, t);
    for (std::size_t g = 0; g < 6; ++g) EXPECT_LE(rel(whole.values[g], left.values[g] + right.values[g]), 1e-12);
  }
  // Window-aligned halves of an exactly representable series add up bit for bit.
  const auto e = make_series({{0.5, -1.0}, {0.25, 2.0}, {1.0, 0.125}, {-0.75, 0.0}}, 15);
  const auto whole = lca::interval_lca(e, 0, 60);
  const auto l = lca::interval_lca(e, 0, 30);
  const auto r = lca::interval_lca(e, 30, 60);
  for (std::size_t g = 0; g < 2; ++g) EXPECT_EQ(whole.values[g], l.values[g] + r.values[g]);
}

TEST(IntervalLca, OutOfRange) {
  const auto s = make_series({{1.0}, {2.0}}, 15);
  EXPECT_THROW(lca::interval_lca(s, 5, 5), UsageError);
  EXPECT_THROW(lca::interval_lca(s, 6, 5), UsageError);
  EXPECT_THROW(lca::interval_lca(s, 0, 31), UsageError);
  EXPECT_NO_THROW(lca::interval_lca(s, 0, 30));
}

TEST(Cumulative, FirstPointIsFirstWindowSum) {
  const auto s = make_series({{0.1, -2.0}, {0.3, 1.0}}, 15);
  const auto c = lca::cumulative(s);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], (std::vector<double>{0.1 * 15, -30.0}));
}

TEST(Cumulative, MonotoneForNegativeGroup) {
  Rng rng(8, "monotone");
  std::vector<std::vector<double>> values(30, std::vector<double>(1));
  for (auto& w : values) w[0] = -std::abs(rng.normal()) - 1e-9;
  const auto c = lca::cumulative(make_series(values, 15));
  for (std::size_t k = 1; k < c.size(); ++k) EXPECT_LT(c[k][0], c[k - 1][0]);
}

TEST(Cumulative, FinalPointMatchesInterval) {
  Rng rng(9, "cumulative");
  std::vector<std::vector<double>> values(23, std::vector<double>(4));
  for (auto& w : values) {
    for (auto& v : w) v = rng.normal();
  }
  std::vector<std::uint32_t> steps(23, 15);
  steps.back() = 4;
  const auto s = make_series(values, 15, steps);
  const auto c = lca::cumulative(s);
  const auto whole = lca::interval_lca(s, 0, s.total_steps());
  EXPECT_EQ(c.back(), whole.values);
}

TEST(OccupationRatio, Cases) {
  EXPECT_EQ(lca::occupation_ratio(std::vector<double>{-3.5}), std::vector<double>{1.0});
  const auto eq = lca::occupation_ratio(std::vector<double>(4, -0.2));
  for (double r : eq) EXPECT_DOUBLE_EQ(r, 0.25);
  const std::vector<double> v{-1.0, -0.3, 0.2, -4.0};
  const auto a = lca::occupation_ratio(v);
  std::vector<double> scaled(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = v[i] * 37.5;
  const auto b = lca::occupation_ratio(scaled);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  EXPECT_NEAR(kahan_sum(a), 1.0, 1e-12);
}

TEST(OccupationRatio, ZeroTotal) {
  EXPECT_THROW(lca::occupation_ratio(std::vector<double>{1.0, -1.0}), DegenerateInputError);
  EXPECT_THROW(lca::occupation_ratio(std::vector<double>{}), DegenerateInputError);
  EXPECT_THROW(lca::occupation_ratio(std::vector<double>{NAN, 1.0}), DegenerateInputError);
}

namespace {

// Captures per-step moment vectors next to a recorder.
struct MomentTap : trainer::TrainingHook {
  const data::Corpus* corpus;
  std::vector<double> dots;
  std::vector<double> totals;
  void on_step(const model::ParameterLayout& layout, const trainer::StepView& v) override {
    const lca::DatasetObjective obj(*corpus, 256, 1);
    const auto g = obj.gradient(layout, v.before).grad;
    const auto a = lca::moment_lca(g, v.delta->delta);
    totals.push_back(kahan_sum(a));
    dots.push_back(kahan_dot(g, v.delta->delta));
  }
};

}  // namespace

TEST(Decomposition, MomentSumIsTheDotProduct) {
  const auto c = corpus(40, 1, 3);
  const auto config = small_model();
  trainer::OptimizerConfig opt;
  opt.steps = 30;
  opt.batch_size = 8;
  MomentTap tap;
  tap.corpus = &c;
  std::vector<trainer::TrainingHook*> hooks{&tap};
  trainer::train(config, opt, c, hooks, trainer::Seeds{});
  ASSERT_EQ(tap.totals.size(), 30u);
  for (std::size_t t = 0; t < 30; ++t) EXPECT_LE(rel(tap.totals[t], tap.dots[t]), 1e-12) << "step " << t;
}

TEST(Decomposition, TelescopingOverWindows) {
  const auto c = corpus(40, 1, 3);
  const auto config = small_model();
  trainer::OptimizerConfig opt;
  opt.steps = 45;
  opt.batch_size = 8;
  const model::ParameterLayout layout(config);
  lca::RecorderOptions ro;
  ro.mode = exact_mode();
  ro.threads = 1;
  lca::LcaRecorder rec(layout, c, ro);
  std::vector<trainer::TrainingHook*> hooks{&rec};
  trainer::train(config, opt, c, hooks, trainer::Seeds{});
  ASSERT_EQ(rec.records().size(), 3u);
  KahanSum windows;
  for (const auto& r : rec.records()) {
    EXPECT_EQ(r.steps, 15u);
    for (double v : r.values) windows += v * 15.0;
  }
  const double steps = kahan_sum(rec.diagnostics().total);
  EXPECT_LE(rel(windows.value(), steps), 1e-12);
  EXPECT_LE(rel(rec.fidelity().interval_total, steps), 1e-12);
}

TEST(Recorder, WindowsAndBoundaryLosses) {
  const auto c = corpus(40, 1, 3);
  const auto config = small_model();
  trainer::OptimizerConfig opt;
  opt.steps = 40;
  opt.batch_size = 8;
  const model::ParameterLayout layout(config);
  lca::RecorderOptions ro;
  ro.mode = exact_mode();
  ro.threads = 1;
  lca::LcaRecorder rec(layout, c, ro);
  std::vector<trainer::TrainingHook*> hooks{&rec};
  const auto result = trainer::train(config, opt, c, hooks, trainer::Seeds{});
  const auto& records = rec.records();
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[2].steps, 10u);
  const auto& d = rec.diagnostics();
  ASSERT_EQ(d.loss_before.size(), 40u);
  ASSERT_EQ(d.loss_after.size(), 40u);
  for (std::size_t t = 0; t + 1 < 40; ++t) EXPECT_EQ(d.loss_after[t], d.loss_before[t + 1]);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(records[k].window_index, k);
    EXPECT_EQ(records[k].values.size(), layout.group_names().size());
    EXPECT_EQ(records[k].loss_start, d.loss_before[k * 15]);
    EXPECT_EQ(records[k].loss_end, d.loss_after[std::min<std::size_t>(k * 15 + 14, 39)]);
  }
  const lca::DatasetObjective obj(c, 256, 1);
  EXPECT_EQ(d.loss_after.back(), obj.loss(layout, result.params.values()));
  const auto f = rec.fidelity();
  EXPECT_NEAR(f.observed_change, d.loss_after.back() - d.loss_before.front(), 1e-15);
  EXPECT_TRUE(f.median_step_residual.has_value());
}

TEST(Recorder, SampledModeRecordsEveryWindow) {
  const auto c = corpus(40, 1, 3);
  const auto config = small_model();
  trainer::OptimizerConfig opt;
  opt.steps = 31;
  opt.batch_size = 8;
  const model::ParameterLayout layout(config);
  lca::RecorderOptions ro;
  ro.mode = sampled_mode(8);
  lca::LcaRecorder rec(layout, c, ro);
  std::vector<trainer::TrainingHook*> hooks{&rec};
  trainer::train(config, opt, c, hooks, trainer::Seeds{});
  ASSERT_EQ(rec.records().size(), 3u);
  EXPECT_EQ(rec.records()[2].steps, 1u);
  EXPECT_FALSE(rec.fidelity().median_step_residual.has_value());
  for (const auto& r : rec.records()) {
    ASSERT_TRUE(r.rows.has_value());
    for (const auto& row : *r.rows) EXPECT_NE(row.value, 0.0);
  }
}

TEST(Recorder, RowValuesSumToEmbeddingGroups) {
  const auto c = corpus(40, 1, 3);
  auto config = small_model();
  config.output_bias = true;
  trainer::OptimizerConfig opt;
  opt.steps = 15;
  opt.batch_size = 8;
  const model::ParameterLayout layout(config);
  lca::RecorderOptions ro;
  ro.mode = exact_mode();
  ro.threads = 1;
  lca::LcaRecorder rec(layout, c, ro);
  std::vector<trainer::TrainingHook*> hooks{&rec};
  trainer::train(config, opt, c, hooks, trainer::Seeds{});
  const auto blocks = lca::LcaRecorder::row_blocks(layout);
  const auto& r = rec.records().front();
  for (const auto& b : blocks) {
    KahanSum s;
    for (const auto& row : *r.rows) {
      if (row.row >= b.row_offset && row.row < b.row_offset + b.rows) s += row.value;
    }
    const auto g = std::find(layout.group_names().begin(), layout.group_names().end(), b.group) -
                   layout.group_names().begin();
    EXPECT_LE(oracle::relative_error(s.value(), r.values[static_cast<std::size_t>(g)], 1e-15), 1e-12) << b.group;
  }
}

TEST(Recorder, Errors) {
  const auto c = corpus(10, 1, 3);
  const model::ParameterLayout layout(small_model());
  lca::RecorderOptions ro;
  ro.window = 0;
  EXPECT_THROW(lca::LcaRecorder(layout, c, ro), UsageError);
  ro.window = 15;
  data::Corpus empty;
  EXPECT_THROW(lca::LcaRecorder(layout, empty, ro), DegenerateInputError);
  ro.mode = sampled_mode(0);
  EXPECT_THROW(lca::LcaRecorder(layout, c, ro), UsageError);
}

TEST(Recorder, GoldenTraceStructure) {
  for (const char* name : {"tiny_exact", "tiny_sampled"}) {
    const auto path = kFixtures / (std::string(name) + ".lca");
    const auto s = lca::series_from_trace(path);
    std::ifstream in(kFixtures / (std::string(name) + ".run.json"));
    const auto run = nlohmann::json::parse(in);
    const std::size_t steps = run["config"]["optimizer"]["steps"].get<std::size_t>();
    EXPECT_EQ(s.total_steps(), steps) << name;
    EXPECT_EQ(s.size(), (steps + 14) / 15) << name;
    for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(s.index[k], k);
    const auto c = lca::cumulative(s);
    EXPECT_EQ(c.back(), lca::interval_lca(s, 0, steps).values) << name;
    const double total = kahan_sum(c.back());
    EXPECT_LE(rel(total, run["fidelity"]["interval_total"].get<double>()), 1e-12) << name;
  }
}

TEST(Fidelity, ResidualShrinksWithLearningRate) {
  // Small exact-mode SGD run: the first-order residual is O(lr^2) against an
  // O(lr) loss change, so halving lr roughly halves the median residual.
  const auto c = corpus(60, 1, 3, 3);
  const auto config = small_model();
  auto median = [&](double lr) {
    trainer::OptimizerConfig opt;
    opt.steps = 60;
    opt.batch_size = 8;
    opt.lr = lr;
    const model::ParameterLayout layout(config);
    lca::RecorderOptions ro;
    ro.mode = exact_mode();
    ro.threads = 1;
    lca::LcaRecorder rec(layout, c, ro);
    std::vector<trainer::TrainingHook*> hooks{&rec};
    trainer::train(config, opt, c, hooks, trainer::Seeds{});
    return *rec.fidelity().median_step_residual;
  };
  const double ratio = median(0.02) / median(0.01);
  EXPECT_GE(ratio, 1.5);
  EXPECT_LE(ratio, 3.0);
}
