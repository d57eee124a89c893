// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/grouping.hpp"

#include <algorithm>
#include <set>

#include "lca_scope/error.hpp"

namespace lca_scope {

std::vector<std::size_t> GroupingSpec::sizes() const {
  std::vector<std::size_t> out(names.size(), 0);
  for (auto g : group_of) {
    if (g >= out.size()) throw DimensionError("grouping: group id " + std::to_string(g) + " out of range");
    ++out[g];
  }
  return out;
}

std::size_t GroupingSpec::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw DimensionError("grouping: no group named '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

void GroupingSpec::validate(std::size_t k) const {
  if (group_of.size() != k) {
    throw DimensionError("grouping covers " + std::to_string(group_of.size()) + " scalars, expected " +
                         std::to_string(k));
  }
  if (names.empty()) throw DimensionError("grouping has no groups");
  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) throw DimensionError("grouping has duplicate group names");
  for (auto g : group_of) {
    if (g >= names.size()) throw DimensionError("grouping: group id " + std::to_string(g) + " out of range");
  }
}

}  // namespace lca_scope
