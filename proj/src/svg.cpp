// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lca_scope::svg {

namespace {

constexpr double kLeft = 90.0;
constexpr double kRight = 30.0;
constexpr double kTop = 50.0;
constexpr double kBottom = 90.0;

const char* const kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
                                "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#2ca02c"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Range {
  double lo;
  double hi;
};

Range value_range(const std::vector<double>& values, bool include_zero) {
  double lo = include_zero ? 0.0 : INFINITY;
  double hi = include_zero ? 0.0 : -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  if (hi == lo) {
    const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - (lo < 0.0 ? pad : 0.0), hi + (hi > 0.0 ? pad : 0.0)};
}

void header(std::ostringstream& out, const std::string& title) {
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">" << escape(title)
      << "</text>\n";
}

// Y axis with five ticks and a zero line; returns the value-to-pixel map.
template <typename Map>
void y_axis(std::ostringstream& out, Range r, Map&& y, const std::string& label) {
  const double bottom = kHeight - kBottom;
  out << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft) << "\" y2=\""
      << num(bottom) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = r.lo + (r.hi - r.lo) * i / 4.0;
    out << "<line x1=\"" << num(kLeft - 4) << "\" y1=\"" << num(y(v)) << "\" x2=\"" << num(kWidth - kRight)
        << "\" y2=\"" << num(y(v)) << "\" stroke=\"#e0e0e0\"/>\n"
        << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(y(v) + 4) << "\" text-anchor=\"end\">"
        << escape(tick_label(v)) << "</text>\n";
  }
  if (r.lo < 0.0 && r.hi > 0.0) {
    out << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(y(0.0)) << "\" x2=\"" << num(kWidth - kRight)
        << "\" y2=\"" << num(y(0.0)) << "\" stroke=\"black\" stroke-width=\"0.8\"/>\n";
  }
  out << "<text x=\"20\" y=\"" << num((kTop + bottom) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << num((kTop + bottom) / 2) << ")\">" << escape(label) << "</text>\n";
}

}  // namespace

std::string escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      case '\'':
        out += "&apos;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                      const std::vector<double>& values, const std::string& y_label) {
  std::ostringstream out;
  header(out, title);
  const Range r = value_range(values, true);
  const double bottom = kHeight - kBottom;
  auto y = [&](double v) { return bottom - (v - r.lo) / (r.hi - r.lo) * (bottom - kTop); };
  y_axis(out, r, y, y_label);
  const std::size_t n = std::max<std::size_t>(labels.size(), 1);
  const double slot = (kWidth - kLeft - kRight) / static_cast<double>(n);
  const double bar = slot * 0.7;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = i < values.size() && std::isfinite(values[i]) ? values[i] : 0.0;
    const double x = kLeft + slot * static_cast<double>(i) + (slot - bar) / 2;
    const double y0 = y(0.0);
    const double y1 = y(v);
    out << "<rect x=\"" << num(x) << "\" y=\"" << num(std::min(y0, y1)) << "\" width=\"" << num(bar)
        << "\" height=\"" << num(std::abs(y1 - y0)) << "\" fill=\"" << kPalette[i % std::size(kPalette)]
        << "\"><title>" << escape(labels[i]) << ": " << escape(tick_label(v)) << "</title></rect>\n";
    const double lx = x + bar / 2;
    out << "<text x=\"" << num(lx) << "\" y=\"" << num(bottom + 16) << "\" text-anchor=\"end\" transform=\"rotate(-45 "
        << num(lx) << ' ' << num(bottom + 16) << ")\">" << escape(labels[i]) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string line_chart(const std::string& title, const std::vector<double>& x,
                       const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& series,
                       const std::string& x_label, const std::string& y_label) {
  std::ostringstream out;
  header(out, title);
  std::vector<double> all;
  for (const auto& s : series) all.insert(all.end(), s.begin(), s.end());
  const Range r = value_range(all, true);
  const Range rx = x.empty() ? Range{0.0, 1.0} : value_range(x, false);
  const double bottom = kHeight - kBottom;
  const double legend = 130.0;
  const double plot_right = kWidth - kRight - legend;
  auto y = [&](double v) { return bottom - (v - r.lo) / (r.hi - r.lo) * (bottom - kTop); };
  auto px = [&](double v) { return kLeft + (v - rx.lo) / (rx.hi - rx.lo) * (plot_right - kLeft); };
  y_axis(out, r, y, y_label);
  out << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(bottom) << "\" x2=\"" << num(plot_right) << "\" y2=\""
      << num(bottom) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = rx.lo + (rx.hi - rx.lo) * i / 4.0;
    out << "<text x=\"" << num(px(v)) << "\" y=\"" << num(bottom + 18) << "\" text-anchor=\"middle\">"
        << escape(tick_label(v)) << "</text>\n";
  }
  out << "<text x=\"" << num((kLeft + plot_right) / 2) << "\" y=\"" << num(bottom + 50)
      << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].size() && i < x.size(); ++i) {
      if (i) out << ' ';
      out << num(px(x[i])) << ',' << num(y(std::isfinite(series[s][i]) ? series[s][i] : 0.0));
    }
    out << "\"/>\n";
    const double ly = kTop + 18.0 * static_cast<double>(s);
    const std::string name = s < series_names.size() ? series_names[s] : std::to_string(s);
    out << "<rect x=\"" << num(plot_right + 20) << "\" y=\"" << num(ly - 9) << "\" width=\"12\" height=\"12\" fill=\""
        << color << "\"/>\n"
        << "<text x=\"" << num(plot_right + 38) << "\" y=\"" << num(ly + 1) << "\">" << escape(name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace lca_scope::svg
