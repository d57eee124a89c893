// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lca_scope/data.hpp"
#include "lca_scope/lca.hpp"
#include "lca_scope/model.hpp"

namespace lca_scope::analysis {

inline constexpr const char* kRankPolicy = "descending |cumulative LCA|, ties broken by ascending group name";
inline constexpr const char* kTauVariant = "tau-a";

/// Group names ordered from rank 0 (largest magnitude) down.
struct Ranking {
  std::vector<std::string> order;
  std::string policy = kRankPolicy;
};

Ranking rank_by_magnitude(std::span<const std::string> names, std::span<const double> values);

/// (C - D) / (n(n-1)/2) with discordant pairs counted as inversions by merge
/// sort. Throws DimensionError unless both rankings order the same set of at
/// least two names.
double kendall_tau(const Ranking& a, const Ranking& b);

/// Inversion count of a sequence of distinct integers, O(n log n).
std::uint64_t count_inversions(std::vector<std::size_t> seq);

struct ValidationReport {
  std::vector<std::string> groups;
  Ranking exact;
  Ranking approx;
  double tau = 0.0;
  std::vector<double> exact_totals;
  std::vector<double> approx_totals;
  std::vector<double> exact_ratios;
  std::vector<double> approx_ratios;

  [[nodiscard]] nlohmann::json to_json() const;
};

ValidationReport validate_approximation(const lca::WindowSeries& exact, const lca::WindowSeries& approx);
ValidationReport validate_approximation(const std::filesystem::path& exact_trace,
                                        const std::filesystem::path& approx_trace);

struct GroupRow {
  std::string name;
  double cumulative = 0.0;
  double ratio = 0.0;
  std::size_t rank = 0;
};

struct Segment {
  std::size_t t1 = 0;
  std::size_t t2 = 0;
  std::vector<double> values;
};

struct Report {
  std::string mode;
  std::vector<GroupRow> groups;
  std::optional<double> tau;
  std::vector<Segment> segments;
  nlohmann::json metadata = nlohmann::json::object();
  std::string svg;

  [[nodiscard]] nlohmann::json to_json() const;
  /// name,cumulative,ratio,rank with %.17g values.
  [[nodiscard]] std::string table_csv() const;
};

/// Final cumulative totals and occupation ratios in canonical group order.
/// normalize plots ratios instead of raw totals.
Report report_cumulative(const lca::WindowSeries& series, bool normalize = false);

/// Splits the windows into n_segments runs of equal window count and reports
/// the interval LCA of each.
Report report_interval(const lca::WindowSeries& series, std::size_t n_segments);

/// Per-bucket cumulative LCA of one embedding table's rows, plus Kendall tau
/// between the frequency ranking of the buckets and their |LCA| ranking.
Report report_buckets(const std::filesystem::path& trace_path, const data::BucketAssignment& buckets,
                      model::EmbeddingSide side);

/// Writes <prefix>.json, <prefix>.csv and <prefix>.svg.
void write_report(const Report& report, const std::filesystem::path& prefix);

}  // namespace lca_scope::analysis
