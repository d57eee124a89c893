// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "lca_scope/tensor.hpp"

namespace lca_scope::ad {

using NodeId = std::int32_t;
class Tape;

/// Handle to a node recorded on a tape. Cheap to copy; valid while the tape
/// lives and is not moved.
struct Var {
  Tape* tape = nullptr;
  NodeId id = -1;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
};

/// Flat gradient aligned with parameter-scalar indices 0..K-1.
using Gradient = std::vector<double>;

/// Records ops in topological order. Values are immutable once recorded.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient lands in the flat gradient at
  /// [flat_offset, flat_offset + value.size()).
  Var parameter(Tensor value, std::size_t flat_offset);

  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  [[nodiscard]] const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] std::span<const NodeId> inputs(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

  /// Reverse sweep from a scalar node. Parameters not reached get 0.
  Gradient backward(Var loss, std::size_t num_params);

  /// Gradient accumulator for a node; only valid inside a backward sweep.
  Tensor& grad(NodeId id);

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    std::optional<std::size_t> param_offset;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

// Closed op set. Attention and the model are composed from these.

/// a[..., m, k] x b[k, n] (b shared across leading dims) or batched
/// a[..., m, k] x b[..., k, n] with identical leading dims.
Var matmul(Var a, Var b);
/// Pointwise; shapes must match exactly or one side must be a scalar.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var relu(Var x);
/// Exact form x * Phi(x) with Phi the standard normal CDF.
Var gelu(Var x);
/// Max-subtracted softmax along `axis` (negative counts from the back).
Var softmax(Var x, int axis = -1);
/// Normalizes over the last dimension; gain and bias have that length.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Gathers rows of table[V, d]; result is [ids.size(), d].
Var embedding_lookup(Var table, std::span<const std::int32_t> ids);
/// Mean negative log-likelihood over positions whose target != pad_id.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t pad_id);
Var reshape(Var x, Shape shape);
/// Permutes axes: result axis i is input axis perm[i].
Var transpose(Var x, std::vector<std::size_t> perm);

// Helpers expressed through the op set.
Var scale(Var x, double factor);
Var sum(Var x);

double gelu_value(double x);
double gelu_derivative(double x);

struct FiniteDiffOptions {
  double eps = 1e-5;
  /// Use eps * max(1, |theta_i|) per coordinate.
  bool relative_to_magnitude = false;
};

/// Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h for every
/// coordinate. Verification oracle, independent of the tape.
Gradient finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::span<const double> theta,
                          FiniteDiffOptions options = {});

}  // namespace lca_scope::ad
