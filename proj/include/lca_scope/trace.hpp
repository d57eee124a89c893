// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace lca_scope::trace {

inline constexpr char kMagic[4] = {'L', 'C', 'A', '1'};
inline constexpr char kFooterMagic[4] = {'1', 'A', 'C', 'L'};
inline constexpr std::uint32_t kVersion = 1;

/// One embedding table whose per-row window values are stored. Row ids in
/// records are global: row r of this table is stored as row_offset + r.
struct RowBlock {
  std::string tensor;
  std::string group;
  std::uint32_t row_offset = 0;
  std::uint32_t rows = 0;
  friend bool operator==(const RowBlock&, const RowBlock&) = default;
};

struct TraceHeader {
  std::uint32_t version = kVersion;
  std::uint64_t num_scalars = 0;
  std::vector<std::string> group_names;
  std::vector<std::uint64_t> group_sizes;
  std::uint32_t window = 15;
  std::uint64_t total_steps = 0;
  nlohmann::json lca_mode = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json model_config = nlohmann::json::object();
  nlohmann::json optimizer_config = nlohmann::json::object();
  std::string model_digest;
  std::string optimizer_digest;
  std::vector<RowBlock> row_blocks;
  /// ISO-8601 UTC; empty when written with timestamps disabled.
  std::string created;

  /// Throws FormatError for an unusable header.
  void validate() const;
  [[nodiscard]] bool has_rows() const { return !row_blocks.empty(); }
  [[nodiscard]] nlohmann::json to_json() const;
  static TraceHeader from_json(const nlohmann::json& j);
};

/// Hex FNV-1a 64 of the compact JSON dump.
std::string digest(const nlohmann::json& j);

struct RowValue {
  std::uint32_t row = 0;
  double value = 0.0;
  friend bool operator==(const RowValue&, const RowValue&) = default;
};

/// One smoothing window. Values are per-step averages over the window's
/// steps, summed over each group's scalars.
struct TraceRecord {
  std::uint64_t window_index = 0;
  std::uint32_t steps = 0;
  double loss_start = 0.0;
  double loss_end = 0.0;
  std::vector<double> values;
  std::optional<std::vector<RowValue>> rows;
  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, TraceHeader header);
  TraceWriter(const TraceWriter&) = delete;
  TraceWriter& operator=(const TraceWriter&) = delete;
  ~TraceWriter();

  /// Writes and flushes one record. Window indices must strictly increase.
  void append(const TraceRecord& record);
  /// Writes the footer; no appends afterwards.
  void finalize();

  [[nodiscard]] const TraceHeader& header() const { return header_; }
  [[nodiscard]] std::uint64_t records_written() const { return count_; }
  [[nodiscard]] bool finalized() const { return finalized_; }

 private:
  std::filesystem::path path_;
  TraceHeader header_;
  std::ofstream out_;
  std::uint64_t count_ = 0;
  std::optional<std::uint64_t> last_window_;
  bool finalized_ = false;
};

/// Streaming reader; holds one record at a time. A trailing partial record
/// (crashed writer) ends the stream silently.
class TraceReader {
 public:
  explicit TraceReader(const std::filesystem::path& path);

  [[nodiscard]] const TraceHeader& header() const { return header_; }
  std::optional<TraceRecord> next();
  [[nodiscard]] bool finalized() const { return footer_count_.has_value(); }
  /// Record count from the footer of a finalized file.
  [[nodiscard]] std::optional<std::uint64_t> footer_count() const { return footer_count_; }
  /// Records returned so far.
  [[nodiscard]] std::uint64_t records_read() const { return read_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  TraceHeader header_;
  std::uint64_t pos_ = 0;
  std::uint64_t end_ = 0;
  std::optional<std::uint64_t> footer_count_;
  std::uint64_t read_ = 0;
};

/// Convenience for small traces.
struct TraceData {
  TraceHeader header;
  std::vector<TraceRecord> records;
  bool finalized = false;
};
TraceData read_trace(const std::filesystem::path& path);

/// "window,<group>..." then one row per record, %.17g values.
void export_csv(const std::filesystem::path& trace_path, const std::filesystem::path& out);
/// {"header": ..., "finalized": bool, "records": [...]}.
void export_json(const std::filesystem::path& trace_path, const std::filesystem::path& out);

struct CsvTable {
  std::vector<std::string> groups;
  std::vector<std::uint64_t> windows;
  std::vector<std::vector<double>> values;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace lca_scope::trace
