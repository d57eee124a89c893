// SPDX-License-Identifier: Apache-2.0
// Native half of the lca_scope Python package. Structured results cross the
// boundary as JSON text; lca_scope/__init__.py decodes them.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lca_scope/analysis.hpp"
#include "lca_scope/error.hpp"
#include "lca_scope/experiment.hpp"
#include "lca_scope/lca.hpp"
#include "lca_scope/trace.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;
using namespace lca_scope;

namespace {

experiment::ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  return experiment::config_from_json(json::parse(text), base_dir);
}

std::string gen_data(const std::string& out, const std::string& spec_json, std::size_t test_examples) {
  const auto spec = json::parse(spec_json).get<data::CorpusSpec>();
  if (spec.vocab < 4) throw UsageError("vocab must be >= 4 (ids 0, 1, 2 are reserved for pad, bos, eos)");
  experiment::write_dataset(out, spec, test_examples);
  return json{{"train", (fs::path(out) / "train.tsv").string()},
              {"test", (fs::path(out) / "test.tsv").string()},
              {"spec", spec},
              {"test_examples", test_examples}}
      .dump();
}

std::string train(const std::string& config_json, const std::string& base_dir, const std::string& out,
                  bool timestamps) {
  const auto config = parse_config(config_json, base_dir);
  config.optimizer.validate();
  const auto corpora = experiment::load_corpora(config);
  const auto s = experiment::run_training(config, corpora, {out, timestamps});
  json j{{"run", s.run_path.string()},
         {"steps", config.optimizer.steps},
         {"train_loss", s.metadata.train_loss}};
  if (config.lca.mode != experiment::LcaChoice::kNone) j["trace"] = out;
  if (s.fidelity) j["fidelity"] = s.fidelity->to_json();
  if (timestamps) j["wall_clock_seconds"] = s.metadata.wall_clock_seconds;
  return j.dump();
}

std::string read_trace(const std::string& path) {
  const auto t = trace::read_trace(path);
  json records = json::array();
  for (const auto& r : t.records) {
    json rec{{"window", r.window_index},
             {"steps", r.steps},
             {"loss_start", r.loss_start},
             {"loss_end", r.loss_end},
             {"values", r.values}};
    if (r.rows) {
      json rows = json::array();
      for (const auto& v : *r.rows) rows.push_back({v.row, v.value});
      rec["rows"] = rows;
    }
    records.push_back(rec);
  }
  return json{{"header", t.header.to_json()}, {"finalized", t.finalized}, {"records", records}}.dump();
}

std::string report_buckets(const std::string& trace_path, const std::string& corpus_path, const std::string& side,
                           std::size_t n_buckets, const std::string& out) {
  const auto s = model::parse_embedding_side(side);
  const auto corpus = data::read_corpus(corpus_path);
  const auto buckets = data::frequency_buckets(
      corpus, n_buckets, s == model::EmbeddingSide::kEncoder ? data::Side::kSource : data::Side::kTarget);
  const auto report = analysis::report_buckets(trace_path, buckets, s);
  if (!out.empty()) analysis::write_report(report, out);
  return report.to_json().dump();
}

std::string repro(const std::string& config_json, const std::string& out, std::size_t timing_repeats,
                  bool timestamps) {
  const auto config = config_json.empty() ? experiment::desk_preset() : parse_config(config_json, "");
  experiment::ReproOptions o;
  o.out_dir = out;
  o.timestamps = timestamps;
  o.timing_repeats = timing_repeats;
  return experiment::run_repro(config, o).summary.dump();
}

}  // namespace

PYBIND11_MODULE(_lca_scope, m) {
  m.doc() = "Loss change allocation for a micro seq2seq transformer";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
  auto format = py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<VersionError>(m, "VersionError", format.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("desk_preset", [] { return experiment::desk_preset().to_json().dump(); });
  m.def("normalize_config", [](const std::string& text, const std::string& base_dir) {
    return parse_config(text, base_dir).to_json().dump();
  });
  m.def("gen_data", &gen_data, py::arg("out"), py::arg("spec_json"), py::arg("test_examples"));
  m.def("train", &train, py::arg("config_json"), py::arg("base_dir"), py::arg("out"), py::arg("timestamps"),
        py::call_guard<py::gil_scoped_release>());
  m.def("repro", &repro, py::arg("config_json"), py::arg("out"), py::arg("timing_repeats"), py::arg("timestamps"),
        py::call_guard<py::gil_scoped_release>());

  m.def("validate", [](const std::string& exact, const std::string& approx) {
    return analysis::validate_approximation(fs::path(exact), fs::path(approx)).to_json().dump();
  });
  m.def("report_cumulative", [](const std::string& trace_path, bool normalize, const std::string& out) {
    const auto r = analysis::report_cumulative(lca::series_from_trace(trace_path), normalize);
    if (!out.empty()) analysis::write_report(r, out);
    return r.to_json().dump();
  });
  m.def("report_interval", [](const std::string& trace_path, std::size_t segments, const std::string& out) {
    const auto r = analysis::report_interval(lca::series_from_trace(trace_path), segments);
    if (!out.empty()) analysis::write_report(r, out);
    return r.to_json().dump();
  });
  m.def("report_buckets", &report_buckets);

  m.def("read_trace", &read_trace);
  m.def("export_csv", [](const std::string& t, const std::string& out) { trace::export_csv(t, out); });
  m.def("export_json", [](const std::string& t, const std::string& out) { trace::export_json(t, out); });
  m.def("interval_lca", [](const std::string& trace_path, std::size_t t1, std::size_t t2) {
    const auto iv = lca::interval_lca(fs::path(trace_path), t1, t2);
    return std::make_pair(iv.names, iv.values);
  });

  m.def("moment_lca", [](const std::vector<double>& grad, const std::vector<double>& delta) {
    return lca::moment_lca(grad, delta);
  });
  m.def("kendall_tau", [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
    return analysis::kendall_tau({a}, {b});
  });
  m.def("rank_by_magnitude", [](const std::vector<std::string>& names, const std::vector<double>& values) {
    return analysis::rank_by_magnitude(names, values).order;
  });
}
