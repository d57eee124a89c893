// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lca_scope/experiment.hpp"

namespace lca_scope::fixtures {

inline constexpr const char* kRegenCommand = "build/tests/regen-fixtures --dir tests/fixtures";

struct File {
  std::string name;
  std::string bytes;
};

struct Fixture {
  std::string name;
  /// "[TRIVIAL]" or "[DERIVED: <oracle>]".
  std::string provenance;
  std::string oracle;
  std::vector<File> files;
};

/// Micro config behind the golden traces: L=2, d=4, V=12, 200 examples.
experiment::ExperimentConfig tiny_config(experiment::LcaChoice mode, std::size_t steps);

/// Builds every fixture, using scratch for intermediate files.
std::vector<Fixture> generate_all(const std::filesystem::path& scratch);

nlohmann::json manifest(const std::vector<Fixture>& fixtures);

/// Model config and batch used by the gradient fixture.
model::ModelConfig fd_model_config();
data::Batch fd_batch();

}  // namespace lca_scope::fixtures
