// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace lca_scope {

/// Total map from parameter-scalar index to group id. Being a total map of
/// indices onto ids makes it a partition; validate() checks the remaining
/// conditions (length, id range, unique names).
struct GroupingSpec {
  std::vector<std::string> names;
  std::vector<std::uint32_t> group_of;

  [[nodiscard]] std::size_t num_groups() const { return names.size(); }
  [[nodiscard]] std::size_t num_scalars() const { return group_of.size(); }
  [[nodiscard]] std::vector<std::size_t> sizes() const;
  [[nodiscard]] std::size_t index_of(const std::string& name) const;

  /// Throws DimensionError unless this partitions exactly k scalars.
  void validate(std::size_t k) const;
};

}  // namespace lca_scope
