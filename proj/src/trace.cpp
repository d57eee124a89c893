// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/trace.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <set>
#include <sstream>

#include "lca_scope/error.hpp"

namespace lca_scope::trace {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

void put_u32(std::string& buf, std::uint32_t v) {
  v = to_little(v);
  buf.append(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::string& buf, std::uint64_t v) {
  v = to_little(v);
  buf.append(reinterpret_cast<const char*>(&v), 8);
}
void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

template <typename T>
T get(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return to_little(v);
}
double get_f64(const char* p) { return std::bit_cast<double>(get<std::uint64_t>(p)); }

constexpr std::uint64_t kFixedPayload = 8 + 4 + 8 + 8;

}  // namespace

std::string digest(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void TraceHeader::validate() const {
  if (version != kVersion) throw VersionError("trace version " + std::to_string(version) + " unsupported");
  if (group_names.empty()) throw FormatError("trace header has no groups");
  std::set<std::string> unique(group_names.begin(), group_names.end());
  if (unique.size() != group_names.size()) throw FormatError("trace header has duplicate group names");
  if (!group_sizes.empty() && group_sizes.size() != group_names.size()) {
    throw FormatError("trace header group sizes do not match group names");
  }
  if (window == 0) throw FormatError("trace header window must be >= 1");
}

json TraceHeader::to_json() const {
  json groups = json::array();
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    json entry{{"name", group_names[g]}};
    if (g < group_sizes.size()) entry["size"] = group_sizes[g];
    groups.push_back(entry);
  }
  json rows = json::array();
  for (const auto& b : row_blocks) {
    rows.push_back({{"tensor", b.tensor}, {"group", b.group}, {"row_offset", b.row_offset}, {"rows", b.rows}});
  }
  json j{{"format", "lca-scope-trace"},
         {"version", version},
         {"num_scalars", num_scalars},
         {"groups", groups},
         {"window", window},
         {"total_steps", total_steps},
         {"lca_mode", lca_mode},
         {"seeds", seeds},
         {"model", model_config},
         {"optimizer", optimizer_config},
         {"digests", {{"model", model_digest}, {"optimizer", optimizer_digest}}},
         {"row_blocks", rows}};
  if (!created.empty()) j["created"] = created;
  return j;
}

TraceHeader TraceHeader::from_json(const json& j) {
  try {
    TraceHeader h;
    h.version = j.at("version").get<std::uint32_t>();
    h.num_scalars = j.value("num_scalars", std::uint64_t{0});
    for (const auto& g : j.at("groups")) {
      h.group_names.push_back(g.at("name").get<std::string>());
      if (g.contains("size")) h.group_sizes.push_back(g["size"].get<std::uint64_t>());
    }
    h.window = j.at("window").get<std::uint32_t>();
    h.total_steps = j.value("total_steps", std::uint64_t{0});
    h.lca_mode = j.value("lca_mode", json::object());
    h.seeds = j.value("seeds", json::object());
    h.model_config = j.value("model", json::object());
    h.optimizer_config = j.value("optimizer", json::object());
    if (j.contains("digests")) {
      h.model_digest = j["digests"].value("model", std::string());
      h.optimizer_digest = j["digests"].value("optimizer", std::string());
    }
    for (const auto& b : j.value("row_blocks", json::array())) {
      h.row_blocks.push_back(RowBlock{b.at("tensor").get<std::string>(), b.at("group").get<std::string>(),
                                      b.at("row_offset").get<std::uint32_t>(), b.at("rows").get<std::uint32_t>()});
    }
    h.created = j.value("created", std::string());
    return h;
  } catch (const json::exception& e) {
    throw FormatError(std::string("trace header: ") + e.what());
  }
}

TraceWriter::TraceWriter(const fs::path& path, TraceHeader header) : path_(path), header_(std::move(header)) {
  header_.validate();
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open trace for writing: " + path.string());
  const std::string text = header_.to_json().dump();
  std::string buf(kMagic, 4);
  put_u32(buf, header_.version);
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out_.flush();
  if (!out_) throw IoError("write failed: " + path.string());
}

TraceWriter::~TraceWriter() = default;

void TraceWriter::append(const TraceRecord& record) {
  if (finalized_) throw Error("trace writer: append after finalize");
  if (record.values.size() != header_.group_names.size()) {
    throw DimensionError("trace record has " + std::to_string(record.values.size()) + " values, header has " +
                         std::to_string(header_.group_names.size()) + " groups");
  }
  if (last_window_ && record.window_index <= *last_window_) {
    throw FormatError("trace record window " + std::to_string(record.window_index) + " out of order (after " +
                      std::to_string(*last_window_) + ")");
  }
  std::string payload;
  put_u64(payload, record.window_index);
  put_u32(payload, record.steps);
  put_f64(payload, record.loss_start);
  put_f64(payload, record.loss_end);
  for (double v : record.values) put_f64(payload, v);
  if (record.rows) {
    put_u32(payload, static_cast<std::uint32_t>(record.rows->size()));
    for (const auto& r : *record.rows) {
      put_u32(payload, r.row);
      put_f64(payload, r.value);
    }
  }
  std::string buf;
  put_u32(buf, static_cast<std::uint32_t>(payload.size()));
  buf += payload;
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out_.flush();
  if (!out_) throw IoError("write failed: " + path_.string());
  last_window_ = record.window_index;
  ++count_;
}

void TraceWriter::finalize() {
  if (finalized_) return;
  std::string buf;
  put_u64(buf, count_);
  buf.append(kFooterMagic, 4);
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out_.flush();
  if (!out_) throw IoError("write failed: " + path_.string());
  out_.close();
  finalized_ = true;
}

TraceReader::TraceReader(const fs::path& path) : path_(path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw IoError("cannot open trace: " + path.string());
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open trace: " + path.string());
  char head[12];
  if (size < 12 || !in_.read(head, 12)) throw FormatError("trace too short: " + path.string());
  if (std::memcmp(head, kMagic, 4) != 0) throw FormatError("bad trace magic: " + path.string());
  const auto version = get<std::uint32_t>(head + 4);
  if (version != kVersion) {
    throw VersionError("trace version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kVersion) + "): " + path.string());
  }
  const auto header_len = get<std::uint32_t>(head + 8);
  if (12 + static_cast<std::uint64_t>(header_len) > size) throw FormatError("trace header truncated: " + path.string());
  std::string text(header_len, '\0');
  in_.read(text.data(), header_len);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("trace header is not valid JSON: " + std::string(e.what()));
  }
  header_ = TraceHeader::from_json(j);
  header_.validate();
  pos_ = 12 + header_len;
  end_ = size;
  if (size >= pos_ + 12) {
    char tail[12];
    in_.seekg(static_cast<std::streamoff>(size - 12));
    in_.read(tail, 12);
    if (std::memcmp(tail + 8, kFooterMagic, 4) == 0) {
      footer_count_ = get<std::uint64_t>(tail);
      end_ = size - 12;
    }
  }
  in_.seekg(static_cast<std::streamoff>(pos_));
}

std::optional<TraceRecord> TraceReader::next() {
  if (pos_ + 4 > end_) return std::nullopt;
  char lenbuf[4];
  in_.read(lenbuf, 4);
  const auto len = get<std::uint32_t>(lenbuf);
  if (pos_ + 4 + len > end_) {
    pos_ = end_;
    return std::nullopt;
  }
  const std::size_t groups = header_.group_names.size();
  const std::uint64_t fixed = kFixedPayload + 8 * groups;
  if (len < fixed) throw FormatError("trace record too short at offset " + std::to_string(pos_));
  std::string payload(len, '\0');
  in_.read(payload.data(), len);
  if (!in_) throw IoError("read failed: " + path_.string());
  const char* p = payload.data();
  TraceRecord r;
  r.window_index = get<std::uint64_t>(p);
  r.steps = get<std::uint32_t>(p + 8);
  r.loss_start = get_f64(p + 12);
  r.loss_end = get_f64(p + 20);
  r.values.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) r.values[g] = get_f64(p + kFixedPayload + 8 * g);
  if (len > fixed) {
    if (len < fixed + 4) throw FormatError("trace record has a truncated row block");
    const auto n = get<std::uint32_t>(p + fixed);
    if (len != fixed + 4 + 12ULL * n) throw FormatError("trace record row block length mismatch");
    std::vector<RowValue> rows(n);
    const char* q = p + fixed + 4;
    for (std::uint32_t i = 0; i < n; ++i) {
      rows[i].row = get<std::uint32_t>(q + 12 * i);
      rows[i].value = get_f64(q + 12 * i + 4);
    }
    r.rows = std::move(rows);
  }
  pos_ += 4 + len;
  ++read_;
  if (pos_ == end_ && footer_count_ && *footer_count_ != read_) {
    throw FormatError("trace footer count " + std::to_string(*footer_count_) + " does not match " +
                      std::to_string(read_) + " records");
  }
  return r;
}

TraceData read_trace(const fs::path& path) {
  TraceReader reader(path);
  TraceData out;
  out.header = reader.header();
  while (auto r = reader.next()) out.records.push_back(std::move(*r));
  out.finalized = reader.finalized();
  return out;
}

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& out) {
  if (out.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(out.parent_path(), ec);
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + out.string());
  return f;
}

}  // namespace

void export_csv(const fs::path& trace_path, const fs::path& out) {
  TraceReader reader(trace_path);
  auto f = open_out(out);
  f << "window";
  for (const auto& g : reader.header().group_names) f << ',' << g;
  f << '\n';
  while (auto r = reader.next()) {
    f << r->window_index;
    for (double v : r->values) f << ',' << fmt17(v);
    f << '\n';
  }
  if (!f) throw IoError("write failed: " + out.string());
}

void export_json(const fs::path& trace_path, const fs::path& out) {
  TraceReader reader(trace_path);
  json records = json::array();
  while (auto r = reader.next()) {
    json rec{{"window", r->window_index},
             {"steps", r->steps},
             {"loss_start", r->loss_start},
             {"loss_end", r->loss_end},
             {"values", r->values}};
    if (r->rows) {
      json rows = json::array();
      for (const auto& rv : *r->rows) rows.push_back(json::array({rv.row, rv.value}));
      rec["rows"] = rows;
    }
    records.push_back(std::move(rec));
  }
  json doc{{"header", reader.header().to_json()}, {"finalized", reader.finalized()}, {"records", records}};
  auto f = open_out(out);
  f << doc.dump(1) << '\n';
  if (!f) throw IoError("write failed: " + out.string());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open csv: " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(f, line)) throw FormatError("empty csv: " + path.string());
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (cell != "window") throw FormatError("csv must start with a window column: " + path.string());
    while (std::getline(ss, cell, ',')) t.groups.push_back(cell);
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    t.windows.push_back(std::stoull(cell));
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      row.push_back(std::strtod(cell.c_str(), &end));
      if (end == cell.c_str()) throw FormatError("bad csv value '" + cell + "'");
    }
    if (row.size() != t.groups.size()) throw FormatError("csv row width mismatch in " + path.string());
    t.values.push_back(std::move(row));
  }
  return t;
}

}  // namespace lca_scope::trace
