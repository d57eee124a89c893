// SPDX-License-Identifier: Apache-2.0
#include "lca_scope/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "lca_scope/error.hpp"
#include "lca_scope/kahan.hpp"

namespace lca_scope::ad {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, std::nullopt, false});
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::parameter(Tensor value, std::size_t flat_offset) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, flat_offset, true});
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
  bool needs = false;
  for (NodeId in : inputs) needs = needs || requires_grad(in);
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), std::nullopt, needs});
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Tensor& Tape::grad(NodeId id) {
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot) slot.emplace(value(id).shape(), 0.0);
  return *slot;
}

Gradient Tape::backward(Var loss, std::size_t num_params) {
  if (loss.tape != this) throw Error("backward: loss does not belong to this tape");
  const Tensor& lv = value(loss.id);
  if (!lv.is_scalar()) throw DimensionError("backward: loss must be a scalar, got " + shape_string(lv.shape()));

  Gradient out(num_params, 0.0);
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[static_cast<std::size_t>(loss.id)].emplace(lv.shape(), 1.0);

  for (NodeId id = loss.id; id >= 0; --id) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot) continue;
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.param_offset) {
      const std::size_t off = *node.param_offset;
      if (off + slot->size() > num_params) throw DimensionError("backward: parameter leaf exceeds gradient length");
      for (std::size_t j = 0; j < slot->size(); ++j) out[off + j] += (*slot)[j];
    } else if (node.backward) {
      node.backward(*this, *slot);
    }
  }
  grads_.clear();
  return out;
}

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aval = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aval * bp[j];
    }
  }
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": operands on different tapes");
}

enum class Broadcast { kSame, kScalarA, kScalarB };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.is_scalar()) return Broadcast::kScalarB;
  if (a.is_scalar()) return Broadcast::kScalarA;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(ax);
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) throw DimensionError("matmul: operands must have rank >= 2");
  const std::size_t k = av.shape().back();
  const std::size_t m = av.shape()[av.rank() - 2];
  const std::size_t kb = bv.shape()[bv.rank() - 2];
  const std::size_t n = bv.shape().back();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }

  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  out_shape.push_back(n);

  if (bv.rank() == 2) {
    const std::size_t rows = av.size() / k;
    Tensor out(out_shape, 0.0);
    gemm_nn(rows, k, n, av.data().data(), bv.data().data(), out.data().data());
    return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, rows, k, n](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) {
        // dA = dC * B^T through an explicit transpose so the inner loop runs
        // over contiguous output columns.
        const double* bp = t.value(ib).data().data();
        std::vector<double> bt(k * n);
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bp[p * n + j];
        }
        gemm_nn(rows, n, k, g.data().data(), bt.data(), t.grad(ia).data().data());
      }
      if (t.requires_grad(ib)) {
        gemm_tn(k, rows, n, t.value(ia).data().data(), g.data().data(), t.grad(ib).data().data());
      }
    });
  }

  if (av.rank() != bv.rank() ||
      !std::equal(av.shape().begin(), av.shape().end() - 2, bv.shape().begin(), bv.shape().end() - 2)) {
    throw DimensionError("matmul: batch dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  const std::size_t batches = av.size() / (m * k);
  Tensor out(out_shape, 0.0);
  for (std::size_t g = 0; g < batches; ++g) {
    gemm_nn(m, k, n, av.data().data() + g * m * k, bv.data().data() + g * k * n, out.data().data() + g * m * n);
  }
  return a.tape->record(std::move(out), {a.id, b.id},
                        [ia = a.id, ib = b.id, batches, m, k, n](Tape& t, const Tensor& g) {
                          const double* gp = g.data().data();
                          if (t.requires_grad(ia)) {
                            double* da = t.grad(ia).data().data();
                            const double* bp = t.value(ib).data().data();
                            for (std::size_t s = 0; s < batches; ++s) {
                              gemm_nt(m, n, k, gp + s * m * n, bp + s * k * n, da + s * m * k);
                            }
                          }
                          if (t.requires_grad(ib)) {
                            double* db = t.grad(ib).data().data();
                            const double* ap = t.value(ia).data().data();
                            for (std::size_t s = 0; s < batches; ++s) {
                              gemm_tn(k, m, n, ap + s * m * k, gp + s * m * n, db + s * k * n);
                            }
                          }
                        });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "add");
  Tensor out = kind == Broadcast::kScalarA ? bv : av;
  if (kind == Broadcast::kSame) {
    auto od = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  } else {
    const double s = kind == Broadcast::kScalarA ? av.item() : bv.item();
    for (double& v : out.data()) v += s;
  }
  return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, kind](Tape& t, const Tensor& g) {
    auto push = [&](NodeId id, bool reduce) {
      if (!t.requires_grad(id)) return;
      Tensor& dst = t.grad(id);
      if (reduce) {
        dst[0] += kahan_sum(g.data());
      } else {
        auto dd = dst.data();
        auto gd = g.data();
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += gd[i];
      }
    };
    push(ia, kind == Broadcast::kScalarA);
    push(ib, kind == Broadcast::kScalarB);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "mul");
  Tensor out = kind == Broadcast::kScalarA ? bv : av;
  if (kind == Broadcast::kSame) {
    auto od = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  } else {
    const double s = kind == Broadcast::kScalarA ? av.item() : bv.item();
    for (double& v : out.data()) v *= s;
  }
  return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, kind](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    auto gd = g.data();
    // Gradient of one operand is g times the other, reduced if that operand
    // was the broadcast scalar.
    auto push = [&](NodeId id, const Tensor& other, bool self_scalar, bool other_scalar) {
      if (!t.requires_grad(id)) return;
      Tensor& dst = t.grad(id);
      if (self_scalar) {
        KahanSum acc;
        for (std::size_t i = 0; i < gd.size(); ++i) acc += gd[i] * other[i];
        dst[0] += acc.value();
      } else if (other_scalar) {
        const double s = other.item();
        for (std::size_t i = 0; i < gd.size(); ++i) dst[i] += gd[i] * s;
      } else {
        for (std::size_t i = 0; i < gd.size(); ++i) dst[i] += gd[i] * other[i];
      }
    };
    push(ia, bv, kind == Broadcast::kScalarA, kind == Broadcast::kScalarB);
    push(ib, av, kind == Broadcast::kScalarB, kind == Broadcast::kScalarA);
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), {x.id}, [ix = x.id](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ix);
    Tensor& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += g[i];
    }
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = gelu_value(v);
  return x.tape->record(std::move(out), {x.id}, [ix = x.id](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ix);
    Tensor& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * gelu_derivative(xv[i]);
  });
}

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("softmax: input must have rank >= 1");
  const std::size_t ax = normalize_axis(axis, xv.rank());
  const std::size_t n = xv.dim(ax);
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t outer = xv.size() / (n * inner);

  Tensor out(xv.shape(), 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  const NodeId self = static_cast<NodeId>(x.tape->size());
  return x.tape->record(std::move(out), {x.id}, [ix = x.id, self, outer, n, inner](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(self);
    Tensor& dx = t.grad(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          dx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("layer_norm: input must have rank >= 1");
  const std::size_t d = xv.shape().back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(d));
  }
  const std::size_t rows = xv.size() / d;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x.id, gain.id, bias.id},
      [ix = x.id, ig = gain.id, ib = bias.id, xhat, rstd, rows, d](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& dg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * (*xhat)[r * d + j];
          }
        }
        if (t.requires_grad(ib)) {
          Tensor& db = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
          }
        }
        if (t.requires_grad(ix)) {
          Tensor& dx = t.grad(ix);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv[j];
              dx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Var embedding_lookup(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding_lookup: table must be [V, d]");
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Tensor out({ids.size(), d}, 0.0);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DimensionError("embedding_lookup: id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) +
                           ")");
    }
    std::copy_n(tv.data().data() + static_cast<std::size_t>(id) * d, d, out.data().data() + r * d);
  }
  return table.tape->record(std::move(out), {table.id},
                            [it = table.id, rows = std::vector<std::int32_t>(ids.begin(), ids.end()), d](
                                Tape& t, const Tensor& g) {
                              Tensor& dt = t.grad(it);
                              for (std::size_t r = 0; r < rows.size(); ++r) {
                                double* dst = dt.data().data() + static_cast<std::size_t>(rows[r]) * d;
                                const double* src = g.data().data() + r * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t pad_id) {
  const Tensor& lv = logits.value();
  if (lv.rank() < 2) throw DimensionError("cross_entropy: logits must be [N, V]");
  const std::size_t vocab = lv.shape().back();
  const std::size_t rows = lv.size() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(lv.size(), 0.0);
  KahanSum total;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto target = targets[r];
    if (target == pad_id) continue;
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(target) + " outside vocabulary");
    }
    const double* x = lv.data().data() + r * vocab;
    double mx = x[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = std::exp(x[j] - lse);
    total += lse - x[static_cast<std::size_t>(target)];
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: every target is padding");
  const double mean = total.value() / static_cast<double>(count);
  return logits.tape->record(
      Tensor::scalar(mean), {logits.id},
      [il = logits.id, probs, tg = std::vector<std::int32_t>(targets.begin(), targets.end()), pad_id, vocab, count](
          Tape& t, const Tensor& g) {
        Tensor& dl = t.grad(il);
        const double s = g.item() / static_cast<double>(count);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == pad_id) continue;
          for (std::size_t j = 0; j < vocab; ++j) dl[r * vocab + j] += s * (*probs)[r * vocab + j];
          dl[r * vocab + static_cast<std::size_t>(tg[r])] -= s;
        }
      });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x.id}, [ix = x.id](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

Var transpose(Var x, std::vector<std::size_t> perm) {
  const Tensor& xv = x.value();
  const std::size_t rank = xv.rank();
  if (perm.size() != rank) throw DimensionError("transpose: permutation length differs from rank");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("transpose: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * xv.dim(i);
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = xv.dim(perm[i]);
    step[i] = in_stride[perm[i]];
  }
  // source[o] is the input offset feeding output element o.
  auto source = std::make_shared<std::vector<std::size_t>>(xv.size());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < xv.size(); ++o) {
    (*source)[o] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      offset += step[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= step[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  Tensor out(out_shape, 0.0);
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*source)[o]];
  return x.tape->record(std::move(out), {x.id}, [ix = x.id, source](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad(ix);
    for (std::size_t o = 0; o < g.size(); ++o) dx[(*source)[o]] += g[o];
  });
}

Var scale(Var x, double factor) { return mul(x, x.tape->constant(Tensor::scalar(factor))); }

Var sum(Var x) {
  const std::size_t n = x.value().size();
  Var flat = reshape(x, {n, 1});
  Var ones = x.tape->constant(Tensor({1, n}, 1.0));
  return reshape(matmul(ones, flat), {});
}

Gradient finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::span<const double> theta,
                          FiniteDiffOptions options) {
  if (!(options.eps > 0.0)) throw UsageError("finite_diff_grad: eps must be positive");
  std::vector<double> probe(theta.begin(), theta.end());
  Gradient grad(theta.size(), 0.0);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double h = options.relative_to_magnitude ? options.eps * std::max(1.0, std::abs(theta[i])) : options.eps;
    const double hi = theta[i] + h;
    const double lo = theta[i] - h;
    probe[i] = hi;
    const double up = f(probe);
    probe[i] = lo;
    const double down = f(probe);
    probe[i] = theta[i];
    grad[i] = (up - down) / (hi - lo);
  }
  return grad;
}

}  // namespace lca_scope::ad
