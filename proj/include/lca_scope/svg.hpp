// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace lca_scope::svg {

inline constexpr int kWidth = 960;
inline constexpr int kHeight = 540;

std::string escape(const std::string& text);

/// Vertical bars, one per label, on a fixed 960x540 canvas.
std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                      const std::vector<double>& values, const std::string& y_label);

/// One polyline per series over shared x positions.
std::string line_chart(const std::string& title, const std::vector<double>& x,
                       const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& series,
                       const std::string& x_label, const std::string& y_label);

}  // namespace lca_scope::svg
