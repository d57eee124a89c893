// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference implementations used to check the library. Each one is written
// independently of the code it checks: plain loops, extended precision, or
// brute-force enumeration.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace lca_scope::oracle {

/// C[i][j] = sum_p A[i][p] * B[p][j], accumulated left to right in double.
std::vector<double> naive_matmul(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
                                 std::size_t n);

/// Phi(x) by composite Simpson integration of the Gaussian density in long
/// double, then x * Phi(x).
long double gelu_quadrature(long double x, std::size_t intervals = 200000);

std::vector<long double> softmax(std::span<const double> x);

/// Mean over non-pad rows of logsumexp(row) - row[target], in long double.
long double cross_entropy(std::span<const double> logits, std::size_t vocab, std::span<const std::int32_t> targets,
                          std::int32_t pad_id);

std::vector<long double> layer_norm_row(std::span<const double> x, std::span<const double> gain,
                                        std::span<const double> bias, long double eps);

/// (C - D) / (n(n-1)/2) by enumerating every pair.
double kendall_tau_pairs(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// 1 / sum_{r=1..n} r^-s.
long double inverse_harmonic(std::size_t n, double s);

/// One SGD step on L = 0.5 * ||theta||^2.
struct QuadraticStep {
  std::vector<double> theta_after;
  std::vector<double> moment;
  long double moment_sum = 0.0L;
  long double true_change = 0.0L;
  long double residual = 0.0L;
};
QuadraticStep quadratic_sgd_step(std::span<const double> theta, double lr);

/// Adam recurrences written out for step t (1-based) from zero moments.
std::vector<double> adam_first_step(std::span<const double> grad, double lr, double beta1, double beta2, double eps);

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor);

/// Central differences with step eps * max(1, |theta_i|), evaluated in the
/// order i = 0..n-1.
std::vector<double> central_differences(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> theta, double eps);

}  // namespace lca_scope::oracle
