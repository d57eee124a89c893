// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace lca_scope {

/// Compensated accumulator (Neumaier's variant of Kahan summation). Unlike
/// plain Kahan it stays accurate when an addend is larger in magnitude than
/// the running sum, which happens constantly with mixed-sign LCA terms.
class KahanSum {
 public:
  KahanSum() = default;
  explicit KahanSum(double initial) : sum_(initial) {}

  KahanSum& operator+=(double value) {
    const double t = sum_ + value;
    if (std::abs(sum_) >= std::abs(value)) {
      compensation_ += (sum_ - t) + value;
    } else {
      compensation_ += (value - t) + sum_;
    }
    sum_ = t;
    return *this;
  }

  KahanSum& operator-=(double value) { return *this += -value; }

  [[nodiscard]] double value() const { return sum_ + compensation_; }
  explicit operator double() const { return value(); }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

inline double kahan_sum(std::span<const double> values) {
  KahanSum acc;
  for (double v : values) acc += v;
  return acc.value();
}

/// Compensated dot product. Each product is rounded once before accumulation.
inline double kahan_dot(std::span<const double> a, std::span<const double> b) {
  KahanSum acc;
  const std::size_t n = a.size() < b.size() ? a.size() : b.size();
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc.value();
}

}  // namespace lca_scope
