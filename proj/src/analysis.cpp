// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "lca_scope/error.hpp"
#include "lca_scope/kahan.hpp"
#include "lca_scope/svg.hpp"

namespace lca_scope::analysis {

using nlohmann::json;
namespace fs = std::filesystem;

Ranking rank_by_magnitude(std::span<const std::string> names, std::span<const double> values) {
  if (names.size() != values.size()) throw DimensionError("ranking: names and values differ in length");
  std::vector<std::size_t> idx(names.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double x = std::abs(values[a]);
    const double y = std::abs(values[b]);
    if (x != y) return x > y;
    return names[a] < names[b];
  });
  Ranking r;
  for (auto i : idx) r.order.push_back(names[i]);
  return r;
}

namespace {

std::uint64_t merge_count(std::vector<std::size_t>& v, std::vector<std::size_t>& tmp, std::size_t lo,
                          std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t inv = merge_count(v, tmp, lo, mid) + merge_count(v, tmp, mid, hi);
  std::size_t i = lo;
  std::size_t j = mid;
  std::size_t k = lo;
  while (i < mid && j < hi) {
    if (v[i] <= v[j]) {
      tmp[k++] = v[i++];
    } else {
      inv += mid - i;
      tmp[k++] = v[j++];
    }
  }
  while (i < mid) tmp[k++] = v[i++];
  while (j < hi) tmp[k++] = v[j++];
  std::copy(tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return inv;
}

}  // namespace

std::uint64_t count_inversions(std::vector<std::size_t> seq) {
  std::vector<std::size_t> tmp(seq.size());
  return merge_count(seq, tmp, 0, seq.size());
}

double kendall_tau(const Ranking& a, const Ranking& b) {
  const std::size_t n = a.order.size();
  if (b.order.size() != n) throw DimensionError("kendall_tau: rankings differ in length");
  if (n < 2) throw DimensionError("kendall_tau: needs at least two elements");
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < n; ++i) {
    if (!pos.emplace(b.order[i], i).second) throw DimensionError("kendall_tau: duplicate name '" + b.order[i] + "'");
  }
  std::vector<std::size_t> seq(n);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < n; ++i) {
    auto it = pos.find(a.order[i]);
    if (it == pos.end()) throw DimensionError("kendall_tau: '" + a.order[i] + "' missing from second ranking");
    if (!seen.insert(a.order[i]).second) throw DimensionError("kendall_tau: duplicate name '" + a.order[i] + "'");
    seq[i] = it->second;
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const auto discordant = static_cast<double>(count_inversions(std::move(seq)));
  return (pairs - 2.0 * discordant) / pairs;
}

namespace {

std::vector<double> final_totals(const lca::WindowSeries& series) {
  if (series.size() == 0) return std::vector<double>(series.names.size(), 0.0);
  return lca::cumulative(series).back();
}

std::vector<std::size_t> rank_positions(const std::vector<std::string>& names, const Ranking& r) {
  std::vector<std::size_t> out(names.size());
  for (std::size_t i = 0; i < r.order.size(); ++i) {
    const auto it = std::find(names.begin(), names.end(), r.order[i]);
    out[static_cast<std::size_t>(it - names.begin())] = i;
  }
  return out;
}

std::vector<GroupRow> group_rows(const std::vector<std::string>& names, const std::vector<double>& totals) {
  const auto ratios = lca::occupation_ratio(totals);
  const auto ranks = rank_positions(names, rank_by_magnitude(names, totals));
  std::vector<GroupRow> rows;
  for (std::size_t g = 0; g < names.size(); ++g) rows.push_back(GroupRow{names[g], totals[g], ratios[g], ranks[g]});
  return rows;
}

json ranking_json(const Ranking& r) { return json{{"order", r.order}, {"policy", r.policy}}; }

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

json ValidationReport::to_json() const {
  json g = json::array();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    g.push_back({{"name", groups[i]},
                 {"exact_cumulative", exact_totals[i]},
                 {"approx_cumulative", approx_totals[i]},
                 {"exact_ratio", exact_ratios[i]},
                 {"approx_ratio", approx_ratios[i]}});
  }
  return json{{"mode", "validate"},
              {"tau", tau},
              {"exact_ranking", ranking_json(exact)},
              {"approx_ranking", ranking_json(approx)},
              {"groups", g},
              {"metadata", {{"tau_variant", kTauVariant}, {"rank_policy", kRankPolicy}, {"aggregation", "sum"}}}};
}

ValidationReport validate_approximation(const lca::WindowSeries& exact, const lca::WindowSeries& approx) {
  if (exact.names != approx.names) throw DimensionError("validate: traces have different group names");
  ValidationReport r;
  r.groups = exact.names;
  r.exact_totals = final_totals(exact);
  r.approx_totals = final_totals(approx);
  r.exact_ratios = lca::occupation_ratio(r.exact_totals);
  r.approx_ratios = lca::occupation_ratio(r.approx_totals);
  r.exact = rank_by_magnitude(r.groups, r.exact_totals);
  r.approx = rank_by_magnitude(r.groups, r.approx_totals);
  r.tau = kendall_tau(r.exact, r.approx);
  return r;
}

ValidationReport validate_approximation(const fs::path& exact_trace, const fs::path& approx_trace) {
  return validate_approximation(lca::series_from_trace(exact_trace), lca::series_from_trace(approx_trace));
}

json Report::to_json() const {
  json g = json::array();
  for (const auto& row : groups) {
    g.push_back({{"name", row.name}, {"cumulative", row.cumulative}, {"ratio", row.ratio}, {"rank", row.rank}});
  }
  json j{{"mode", mode}, {"groups", g}};
  if (tau) j["tau"] = *tau;
  if (!segments.empty()) {
    json s = json::array();
    for (const auto& seg : segments) s.push_back({{"t1", seg.t1}, {"t2", seg.t2}, {"values", seg.values}});
    j["segments"] = s;
  }
  j["metadata"] = metadata;
  return j;
}

std::string Report::table_csv() const {
  std::ostringstream out;
  out << "name,cumulative,ratio,rank\n";
  for (const auto& row : groups) {
    out << row.name << ',' << fmt17(row.cumulative) << ',' << fmt17(row.ratio) << ',' << row.rank << '\n';
  }
  return out.str();
}

Report report_cumulative(const lca::WindowSeries& series, bool normalize) {
  Report r;
  r.mode = "cumulative";
  const auto totals = final_totals(series);
  r.groups = group_rows(series.names, totals);
  std::vector<double> plotted;
  for (const auto& row : r.groups) plotted.push_back(normalize ? row.ratio : row.cumulative);
  r.metadata = {{"normalize", normalize},
                {"windows", series.size()},
                {"steps", series.total_steps()},
                {"window", series.window},
                {"aggregation", "sum"},
                {"rank_policy", kRankPolicy}};
  r.svg = svg::bar_chart(normalize ? "Occupation ratio of cumulative LCA" : "Cumulative LCA per group", series.names,
                         plotted, normalize ? "ratio" : "cumulative LCA");
  return r;
}

Report report_interval(const lca::WindowSeries& series, std::size_t n_segments) {
  if (n_segments == 0) throw UsageError("report interval: segments must be >= 1");
  if (series.size() == 0) throw DegenerateInputError("report interval: trace has no windows");
  if (n_segments > series.size()) {
    throw UsageError("report interval: " + std::to_string(n_segments) + " segments but only " +
                     std::to_string(series.size()) + " windows");
  }
  Report r;
  r.mode = "interval";
  // Step boundaries of each window.
  std::vector<std::size_t> start(series.size() + 1, 0);
  for (std::size_t k = 0; k < series.size(); ++k) start[k] = series.index[k] * series.window;
  start[series.size()] = start[series.size() - 1] + series.steps.back();
  std::vector<double> mid;
  std::vector<std::vector<double>> lines(series.names.size());
  for (std::size_t s = 0; s < n_segments; ++s) {
    const std::size_t k0 = s * series.size() / n_segments;
    const std::size_t k1 = (s + 1) * series.size() / n_segments;
    const auto iv = lca::interval_lca(series, start[k0], start[k1]);
    r.segments.push_back(Segment{iv.t1, iv.t2, iv.values});
    mid.push_back(0.5 * static_cast<double>(iv.t1 + iv.t2));
    for (std::size_t g = 0; g < iv.values.size(); ++g) lines[g].push_back(iv.values[g]);
  }
  const auto total = lca::interval_lca(series, start.front(), start.back());
  r.groups = group_rows(series.names, total.values);
  r.metadata = {{"segments", n_segments},
                {"windows", series.size()},
                {"steps", series.total_steps()},
                {"window", series.window},
                {"aggregation", "sum"},
                {"rank_policy", kRankPolicy}};
  r.svg = svg::line_chart("Interval LCA per group", mid, series.names, lines, "training step (segment midpoint)",
                          "interval LCA");
  return r;
}

Report report_buckets(const fs::path& trace_path, const data::BucketAssignment& buckets, model::EmbeddingSide side) {
  trace::TraceReader reader(trace_path);
  const auto header = reader.header();
  if (!header.has_rows()) {
    throw DegenerateInputError("report buckets: trace " + trace_path.string() +
                               " was recorded without per-row embedding retention");
  }
  const std::string tensor = model::embedding_tensor(side);
  const auto block = std::find_if(header.row_blocks.begin(), header.row_blocks.end(),
                                  [&](const trace::RowBlock& b) { return b.tensor == tensor; });
  if (block == header.row_blocks.end()) throw DegenerateInputError("report buckets: no rows retained for " + tensor);
  if (buckets.bucket_of.size() != block->rows) {
    throw DimensionError("report buckets: assignment covers " + std::to_string(buckets.bucket_of.size()) +
                         " tokens, table " + tensor + " has " + std::to_string(block->rows) + " rows");
  }
  std::uint32_t total_rows = 0;
  for (const auto& b : header.row_blocks) total_rows = std::max(total_rows, b.row_offset + b.rows);
  std::vector<int> row_group(total_rows, -1);
  for (std::uint32_t row = 0; row < block->rows; ++row) {
    row_group[block->row_offset + row] = static_cast<int>(buckets.bucket_of[row]);
  }
  std::vector<std::string> names;
  const std::size_t width = buckets.n_buckets > 100 ? 3 : 2;
  for (std::size_t b = 0; b < buckets.n_buckets; ++b) {
    std::string idx = std::to_string(b);
    names.push_back("b" + std::string(width - std::min(width, idx.size()), '0') + idx);
  }
  const auto series = lca::row_series_from_trace(trace_path, row_group, names);
  const auto totals = final_totals(series);

  const auto modules = lca::series_from_trace(trace_path);
  const auto module_totals = final_totals(modules);
  const double group_total = module_totals[static_cast<std::size_t>(
      std::find(modules.names.begin(), modules.names.end(), block->group) - modules.names.begin())];

  Report r;
  r.mode = "buckets";
  r.groups = group_rows(names, totals);
  Ranking by_frequency{names, "bucket index (descending corpus frequency)"};
  const Ranking by_lca = rank_by_magnitude(names, totals);
  if (names.size() >= 2) r.tau = kendall_tau(by_frequency, by_lca);
  r.metadata = {{"side", model::to_string(side)},
                {"tensor", tensor},
                {"group", block->group},
                {"buckets", buckets.n_buckets},
                {"bucket_frequency", buckets.bucket_frequency},
                {"bucket_size", buckets.bucket_size},
                {"group_total", group_total},
                {"bucket_sum", kahan_sum(totals)},
                {"first_exceeds_last", names.size() >= 2 && std::abs(totals.front()) > std::abs(totals.back())},
                {"tau_variant", kTauVariant},
                {"rank_policy", kRankPolicy}};
  r.svg = svg::bar_chart("Cumulative LCA of " + tensor + " rows by frequency bucket", names, totals,
                         "cumulative LCA");
  return r;
}

void write_report(const Report& report, const fs::path& prefix) {
  if (prefix.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(prefix.parent_path(), ec);
  }
  auto write = [](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f << text;
    if (!f) throw IoError("write failed: " + p.string());
  };
  const std::string base = prefix.string();
  write(base + ".json", report.to_json().dump(2) + "\n");
  write(base + ".csv", report.table_csv());
  write(base + ".svg", report.svg);
}

}  // namespace lca_scope::analysis
