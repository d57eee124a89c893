// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/lca.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "lca_scope/error.hpp"

namespace lca_scope::lca {

using nlohmann::json;

void LcaMode::validate() const {
  if (source == GradientSource::kSampled && batch_size == 0) throw UsageError("lca: sampled batch_size must be >= 1");
}

std::string to_string(GradientSource source) { return source == GradientSource::kExact ? "exact" : "sampled"; }

GradientSource parse_gradient_source(const std::string& text) {
  if (text == "exact") return GradientSource::kExact;
  if (text == "sampled") return GradientSource::kSampled;
  throw UsageError("unknown lca mode '" + text + "' (expected exact|sampled)");
}

std::string LcaMode::describe() const {
  std::string s = to_string(source) + "(" + data::to_string(dataset);
  if (source == GradientSource::kSampled) s += ", batch_size=" + std::to_string(batch_size);
  return s + ")";
}

void to_json(json& j, const LcaMode& m) {
  j = json{{"source", to_string(m.source)}, {"dataset", data::to_string(m.dataset)}};
  if (m.source == GradientSource::kSampled) {
    j["batch_size"] = m.batch_size;
    j["window_sampling"] = "independent batch per step; window mean";
  }
}

void from_json(const json& j, LcaMode& m) {
  m.source = parse_gradient_source(j.value("source", std::string("sampled")));
  m.dataset = data::parse_split(j.value("dataset", std::string("train")));
  m.batch_size = j.value("batch_size", std::size_t{32});
}

std::size_t default_threads() {
  if (const char* env = std::getenv("LCA_SCOPE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

DatasetObjective::DatasetObjective(const data::Corpus& corpus, std::size_t chunk_size, std::size_t threads) {
  if (corpus.examples.empty()) throw DegenerateInputError("lca: empty dataset");
  if (chunk_size == 0) throw UsageError("lca: chunk_size must be >= 1");
  threads_ = threads == 0 ? default_threads() : threads;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = corpus.examples[a];
    const auto& y = corpus.examples[b];
    if (x.source.size() != y.source.size()) return x.source.size() < y.source.size();
    return x.target.size() < y.target.size();
  });
  for (std::size_t i = 0; i < order.size(); i += chunk_size) {
    const std::size_t n = std::min(chunk_size, order.size() - i);
    chunks_.push_back(data::make_batch(corpus, std::span<const std::size_t>(order.data() + i, n)));
    total_tokens_ += chunks_.back().target_tokens();
  }
}

namespace {

// Runs fn(c) for every chunk on up to `threads` workers.
template <typename Fn>
void for_each_chunk(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t c = 0; c < n; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < n && !failed; c = next++) {
        try {
          fn(c);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

DatasetObjective::Result DatasetObjective::gradient(const model::ParameterLayout& layout,
                                                    std::span<const double> theta) const {
  const std::size_t n = chunks_.size();
  std::vector<model::LossAndGrad> parts(n);
  for_each_chunk(n, threads_, [&](std::size_t c) { parts[c] = model::loss_and_grad(layout, theta, chunks_[c]); });

  const double total = static_cast<double>(total_tokens_);
  Result out;
  out.tokens = total_tokens_;
  out.grad.assign(theta.size(), 0.0);
  KahanSum loss;
  for (std::size_t c = 0; c < n; ++c) loss += static_cast<double>(parts[c].tokens) * parts[c].loss;
  out.loss = loss.value() / total;
  if (n == 1) {
    out.grad = std::move(parts[0].grad);
    return out;
  }
  std::vector<double> weight(n);
  for (std::size_t c = 0; c < n; ++c) weight[c] = static_cast<double>(parts[c].tokens);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    KahanSum acc;
    for (std::size_t c = 0; c < n; ++c) acc += weight[c] * parts[c].grad[i];
    out.grad[i] = acc.value() / total;
  }
  return out;
}

double DatasetObjective::loss(const model::ParameterLayout& layout, std::span<const double> theta) const {
  const std::size_t n = chunks_.size();
  std::vector<double> parts(n);
  for_each_chunk(n, threads_, [&](std::size_t c) {
    parts[c] = model::forward_loss(layout, theta, chunks_[c]).value * static_cast<double>(chunks_[c].target_tokens());
  });
  KahanSum acc;
  for (double p : parts) acc += p;
  return acc.value() / static_cast<double>(total_tokens_);
}

GradientEval eval_gradient(const model::ParameterSet& params, const LcaMode& mode, const data::Corpus& dataset,
                           Rng& rng) {
  mode.validate();
  if (dataset.examples.empty()) throw DegenerateInputError("lca: empty dataset");
  GradientEval out;
  if (mode.source == GradientSource::kExact) {
    DatasetObjective objective(dataset);
    auto r = objective.gradient(params.layout(), params.values());
    out.grad = std::move(r.grad);
    out.loss = r.loss;
    out.tokens = r.tokens;
  } else {
    data::Batch batch = data::sample_batch(dataset, mode.batch_size, rng);
    auto r = model::loss_and_grad(params, batch);
    out.grad = std::move(r.grad);
    out.loss = r.loss;
    out.tokens = r.tokens;
    out.batch = std::move(batch);
  }
  return out;
}

std::vector<double> moment_lca(std::span<const double> grad, std::span<const double> delta) {
  if (grad.size() != delta.size()) {
    throw DimensionError("moment_lca: gradient has " + std::to_string(grad.size()) + " entries, delta has " +
                         std::to_string(delta.size()));
  }
  std::vector<double> out(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) out[i] = grad[i] * delta[i];
  return out;
}

void WindowAccumulator::add(std::span<const double> moment) {
  if (sums_.empty() && steps_ == 0) sums_.resize(moment.size());
  if (moment.size() != sums_.size()) throw DimensionError("window accumulator: length mismatch");
  for (std::size_t i = 0; i < moment.size(); ++i) sums_[i] += moment[i];
  ++steps_;
}

std::vector<double> WindowAccumulator::mean() const {
  std::vector<double> out(sums_.size(), 0.0);
  if (steps_ == 0) return out;
  const double n = static_cast<double>(steps_);
  for (std::size_t i = 0; i < sums_.size(); ++i) out[i] = sums_[i].value() / n;
  return out;
}

void WindowAccumulator::reset() {
  std::fill(sums_.begin(), sums_.end(), KahanSum{});
  steps_ = 0;
}

SmoothedWindows smooth(std::span<const std::vector<double>> stream, std::size_t window) {
  if (window == 0) throw UsageError("smooth: window must be >= 1");
  SmoothedWindows out;
  WindowAccumulator acc(stream.empty() ? 0 : stream.front().size());
  for (const auto& step : stream) {
    acc.add(step);
    if (acc.steps() == window) {
      out.values.push_back(acc.mean());
      out.steps.push_back(window);
      acc.reset();
    }
  }
  if (acc.steps() > 0) {
    out.values.push_back(acc.mean());
    out.steps.push_back(acc.steps());
    out.last_partial = true;
  }
  return out;
}

std::vector<double> group_aggregate(std::span<const double> values, const GroupingSpec& grouping, Aggregation agg) {
  grouping.validate(values.size());
  std::vector<KahanSum> sums(grouping.num_groups());
  for (std::size_t i = 0; i < values.size(); ++i) sums[grouping.group_of[i]] += values[i];
  std::vector<double> out(sums.size());
  const auto sizes = agg == Aggregation::kMean ? grouping.sizes() : std::vector<std::size_t>{};
  for (std::size_t g = 0; g < sums.size(); ++g) {
    out[g] = sums[g].value();
    if (agg == Aggregation::kMean) out[g] = sizes[g] == 0 ? 0.0 : out[g] / static_cast<double>(sizes[g]);
  }
  return out;
}

std::size_t WindowSeries::total_steps() const {
  std::size_t t = 0;
  for (auto s : steps) t += s;
  return t;
}

WindowSeries series_from_records(const trace::TraceHeader& header, std::span<const trace::TraceRecord> records) {
  WindowSeries s;
  s.names = header.group_names;
  s.window = header.window;
  for (const auto& r : records) {
    s.index.push_back(r.window_index);
    s.steps.push_back(r.steps);
    s.values.push_back(r.values);
  }
  return s;
}

WindowSeries series_from_trace(const std::filesystem::path& path) {
  trace::TraceReader reader(path);
  WindowSeries s;
  s.names = reader.header().group_names;
  s.window = reader.header().window;
  while (auto r = reader.next()) {
    s.index.push_back(r->window_index);
    s.steps.push_back(r->steps);
    s.values.push_back(std::move(r->values));
  }
  return s;
}

WindowSeries row_series_from_trace(const std::filesystem::path& path, std::span<const int> row_group,
                                   std::vector<std::string> names) {
  trace::TraceReader reader(path);
  if (!reader.header().has_rows()) {
    throw DegenerateInputError("trace " + path.string() + " has no per-row embedding values (recorded without row retention)");
  }
  WindowSeries s;
  s.names = std::move(names);
  s.window = reader.header().window;
  while (auto r = reader.next()) {
    if (!r->rows) throw DegenerateInputError("trace record " + std::to_string(r->window_index) + " has no row block");
    std::vector<KahanSum> sums(s.names.size());
    for (const auto& rv : *r->rows) {
      if (rv.row >= row_group.size()) throw DimensionError("trace row id " + std::to_string(rv.row) + " out of range");
      const int g = row_group[rv.row];
      if (g < 0) continue;
      if (static_cast<std::size_t>(g) >= sums.size()) throw DimensionError("row group id out of range");
      sums[static_cast<std::size_t>(g)] += rv.value;
    }
    std::vector<double> values(sums.size());
    for (std::size_t g = 0; g < sums.size(); ++g) values[g] = sums[g].value();
    s.index.push_back(r->window_index);
    s.steps.push_back(r->steps);
    s.values.push_back(std::move(values));
  }
  return s;
}

IntervalLca interval_lca(const WindowSeries& series, std::size_t t1, std::size_t t2) {
  const std::size_t total = series.total_steps();
  if (t1 >= t2 || t2 > total) {
    throw UsageError("interval [" + std::to_string(t1) + ", " + std::to_string(t2) + ") outside [0, " +
                     std::to_string(total) + "]");
  }
  std::vector<KahanSum> sums(series.names.size());
  for (std::size_t k = 0; k < series.size(); ++k) {
    const std::size_t start = series.index[k] * series.window;
    const std::size_t end = start + series.steps[k];
    const std::size_t lo = std::max(start, t1);
    const std::size_t hi = std::min(end, t2);
    if (lo >= hi) continue;
    const double overlap = static_cast<double>(hi - lo);
    for (std::size_t g = 0; g < sums.size(); ++g) sums[g] += series.values[k][g] * overlap;
  }
  IntervalLca out{t1, t2, series.names, std::vector<double>(sums.size())};
  for (std::size_t g = 0; g < sums.size(); ++g) out.values[g] = sums[g].value();
  return out;
}

IntervalLca interval_lca(const std::filesystem::path& trace_path, std::size_t t1, std::size_t t2) {
  return interval_lca(series_from_trace(trace_path), t1, t2);
}

std::vector<std::vector<double>> cumulative(const WindowSeries& series) {
  std::vector<KahanSum> sums(series.names.size());
  std::vector<std::vector<double>> out;
  out.reserve(series.size());
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double steps = static_cast<double>(series.steps[k]);
    std::vector<double> row(sums.size());
    for (std::size_t g = 0; g < sums.size(); ++g) {
      sums[g] += series.values[k][g] * steps;
      row[g] = sums[g].value();
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<double> occupation_ratio(std::span<const double> totals) {
  const double total = kahan_sum(totals);
  if (totals.empty() || total == 0.0 || !std::isfinite(total)) {
    throw DegenerateInputError("occupation_ratio: total LCA is zero or non-finite");
  }
  std::vector<double> out(totals.size());
  for (std::size_t g = 0; g < totals.size(); ++g) out[g] = totals[g] / total;
  return out;
}

json Fidelity::to_json() const {
  json j{{"mode", mode}, {"steps", steps}, {"interval_total", interval_total}, {"observed_change", observed_change}};
  j["median_step_residual"] = median_step_residual ? json(*median_step_residual) : json(nullptr);
  return j;
}

std::vector<trace::RowBlock> LcaRecorder::row_blocks(const model::ParameterLayout& layout) {
  std::vector<trace::RowBlock> blocks;
  std::uint32_t offset = 0;
  for (auto side : {model::EmbeddingSide::kEncoder, model::EmbeddingSide::kDecoder, model::EmbeddingSide::kSoftmax}) {
    const auto& t = layout.find(model::embedding_tensor(side));
    const auto rows = static_cast<std::uint32_t>(t.shape[0]);
    blocks.push_back(trace::RowBlock{t.name, t.group, offset, rows});
    offset += rows;
  }
  return blocks;
}

trace::TraceHeader LcaRecorder::make_header(const model::ParameterLayout& layout, const RecorderOptions& options) {
  trace::TraceHeader h;
  const auto grouping = model::module_grouping(layout);
  h.num_scalars = layout.num_scalars();
  h.group_names = grouping.names;
  for (auto s : grouping.sizes()) h.group_sizes.push_back(s);
  h.window = static_cast<std::uint32_t>(options.window);
  h.lca_mode = options.mode;
  h.model_config = layout.config();
  h.model_digest = trace::digest(h.model_config);
  if (options.retain_rows) h.row_blocks = row_blocks(layout);
  return h;
}

LcaRecorder::LcaRecorder(const model::ParameterLayout& layout, const data::Corpus& dataset, RecorderOptions options,
                         trace::TraceWriter* writer)
    : layout_(&layout),
      dataset_(&dataset),
      options_(options),
      writer_(writer),
      grouping_(model::module_grouping(layout)),
      rng_(options.seed, "lca"),
      acc_(layout.num_scalars()) {
  options_.mode.validate();
  if (options_.window == 0) throw UsageError("lca: window must be >= 1");
  if (dataset.examples.empty()) throw DegenerateInputError("lca: empty dataset");
  if (options_.retain_rows) blocks_ = row_blocks(layout);
  if (options_.mode.source == GradientSource::kExact) {
    objective_.emplace(dataset, options_.chunk_size, options_.threads);
  }
  if (writer_ && writer_->header().group_names != grouping_.names) {
    throw DimensionError("trace header groups do not match the model grouping");
  }
}

void LcaRecorder::commit(trace::TraceRecord record) {
  if (writer_) writer_->append(record);
  records_.push_back(std::move(record));
}

trace::TraceRecord LcaRecorder::close_window(std::size_t window_index) {
  const auto mean = acc_.mean();
  trace::TraceRecord r;
  r.window_index = window_index;
  r.steps = static_cast<std::uint32_t>(acc_.steps());
  r.loss_start = window_loss_start_;
  r.values = group_aggregate(mean, grouping_, Aggregation::kSum);
  if (!blocks_.empty()) {
    std::vector<trace::RowValue> rows;
    for (const auto& b : blocks_) {
      const auto& t = layout_->find(b.tensor);
      const std::size_t d = t.shape[1];
      const model::TensorInfo* bias = nullptr;
      if (b.group == "de_softmax" && layout_->config().output_bias) bias = &layout_->find("de_softmax.bias");
      for (std::uint32_t row = 0; row < b.rows; ++row) {
        KahanSum s;
        for (std::size_t j = 0; j < d; ++j) s += mean[t.offset + row * d + j];
        if (bias) s += mean[bias->offset + row];
        const double v = s.value();
        if (v != 0.0) rows.push_back(trace::RowValue{b.row_offset + row, v});
      }
    }
    r.rows = std::move(rows);
  }
  acc_.reset();
  return r;
}

void LcaRecorder::on_step(const model::ParameterLayout& layout, const trainer::StepView& view) {
  const std::size_t t = view.step;
  const std::size_t w = options_.window;
  const auto& delta = view.delta->delta;
  ad::Gradient grad;
  double loss = 0.0;
  if (objective_) {
    auto r = objective_->gradient(layout, view.before);
    grad = std::move(r.grad);
    loss = r.loss;
    if (t > 0 && diag_.loss_after.size() == t - 1) diag_.loss_after.push_back(loss);
    if (pending_) {
      pending_->loss_end = loss;
      commit(std::move(*pending_));
      pending_.reset();
    }
    if (t % w == 0) window_loss_start_ = loss;
  } else {
    data::Batch batch = data::sample_batch(*dataset_, options_.mode.batch_size, rng_);
    auto r = model::loss_and_grad(layout, view.before, batch);
    grad = std::move(r.grad);
    loss = r.loss;
    if (t % w == 0) {
      window_loss_start_ = loss;
      window_batch_ = std::move(batch);
    }
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw NumericError("lca: non-finite gradient at step " + std::to_string(t));
  }

  const auto moment = moment_lca(grad, delta);
  diag_.total.push_back(kahan_sum(moment));
  diag_.dot.push_back(kahan_dot(grad, delta));
  diag_.loss_before.push_back(loss);
  acc_.add(moment);

  if (acc_.steps() == w) {
    auto record = close_window(window_index_++);
    if (objective_) {
      pending_ = std::move(record);
    } else {
      record.loss_end = model::forward_loss(layout, view.after, *window_batch_).value;
      commit(std::move(record));
    }
  }
}

void LcaRecorder::on_finish(const model::ParameterSet& final_params) {
  const auto& layout = final_params.layout();
  if (objective_) {
    if (!diag_.loss_before.empty()) {
      const double final_loss = objective_->loss(layout, final_params.values());
      final_loss_ = final_loss;
      if (diag_.loss_after.size() + 1 == diag_.loss_before.size()) diag_.loss_after.push_back(final_loss);
      if (pending_) {
        pending_->loss_end = final_loss;
        commit(std::move(*pending_));
        pending_.reset();
      }
      if (acc_.steps() > 0) {
        auto record = close_window(window_index_++);
        record.loss_end = final_loss;
        commit(std::move(record));
      }
    }
  } else if (acc_.steps() > 0) {
    auto record = close_window(window_index_++);
    record.loss_end = model::forward_loss(layout, final_params.values(), *window_batch_).value;
    commit(std::move(record));
  }
  if (writer_) writer_->finalize();
}

Fidelity LcaRecorder::fidelity() const {
  Fidelity f;
  f.mode = options_.mode.describe();
  f.steps = diag_.total.size();
  KahanSum interval;
  for (const auto& r : records_) {
    for (double v : r.values) interval += v * static_cast<double>(r.steps);
  }
  f.interval_total = interval.value();
  if (objective_) {
    if (!diag_.loss_before.empty() && final_loss_) f.observed_change = *final_loss_ - diag_.loss_before.front();
    std::vector<double> residuals;
    for (std::size_t t = 0; t < diag_.loss_after.size() && t < diag_.total.size(); ++t) {
      const double dl = diag_.loss_after[t] - diag_.loss_before[t];
      if (dl == 0.0) continue;
      residuals.push_back(std::abs(diag_.total[t] - dl) / std::abs(dl));
    }
    if (!residuals.empty()) {
      const auto mid = residuals.begin() + static_cast<std::ptrdiff_t>(residuals.size() / 2);
      std::nth_element(residuals.begin(), mid, residuals.end());
      double m = *mid;
      if (residuals.size() % 2 == 0) m = 0.5 * (m + *std::max_element(residuals.begin(), mid));
      f.median_step_residual = m;
    }
  } else {
    KahanSum change;
    for (const auto& r : records_) change += r.loss_end - r.loss_start;
    f.observed_change = change.value();
  }
  return f;
}

}  // namespace lca_scope::lca
