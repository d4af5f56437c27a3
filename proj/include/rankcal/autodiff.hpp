#pragma once

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Graph records every primitive applied during a forward pass in creation
// order, which is a topological order by construction. Graph::backward walks
// that record once in reverse. Graphs are rebuilt for every forward pass and
// are not shared between threads.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rankcal/error.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  inline const Tensor& value() const;
  inline const Tensor& grad() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  /// Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(const Tensor& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends the result of a primitive. The node requires grad iff any input does;
  /// `fn` is dropped otherwise.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, false, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  bool has_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].has_grad;
  }

  const Tensor& grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id()];
    if (!n.has_grad) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return n.grad;
  }

  /// Gradient accumulator of `v`, zero-initialised on first use; nullptr when
  /// `v` does not require grad.
  Tensor* grad_sink(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape, std::vector<double>(n.value.size(), 0.0));
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var loss) {
    check_owned(loss);
    if (backward_done_) {
      throw ContractError("backward called twice on the same graph without zero_grad()");
    }
    const Node& root = nodes_[loss.id()];
    if (!root.value.is_scalar()) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(root.value.shape));
    }
    backward_done_ = true;
    Tensor* seed = grad_sink(loss);
    if (seed == nullptr) return;
    seed->data[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.grad = Tensor();
      n.has_grad = false;
    }
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var v) const {
    if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this graph");
    }
  }

  // deque keeps references stable while nodes are appended
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }
inline const Tensor& Var::grad() const { return graph_->grad(*this); }

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
                  static_cast<Eigen::Index>(t.shape[1]));
}

inline MutMap as_matrix(Tensor& t) {
  return MutMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
                static_cast<Eigen::Index>(t.shape[1]));
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(v.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ: " + to_string(av.shape) + " x " +
                         to_string(bv.shape));
  }
  Tensor out({av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b}, [&g, a, b](const Tensor& dc) {
    if (Tensor* da = g.grad_sink(a)) {
      detail::as_matrix(*da).noalias() += detail::as_matrix(dc) * detail::as_matrix(b.value()).transpose();
    }
    if (Tensor* db = g.grad_sink(b)) {
      detail::as_matrix(*db).noalias() += detail::as_matrix(a.value()).transpose() * detail::as_matrix(dc);
    }
  });
}

/// x[M×N] + b[N] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_rank(x, 2, "add_bias");
  detail::require_rank(bias, 1, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape) + " vs input " + to_string(xv.shape));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i % n];
  Graph& g = x.graph();
  return g.record(std::move(out), {x, bias}, [&g, x, bias, n](const Tensor& d) {
    if (Tensor* dx = g.grad_sink(x)) {
      for (std::size_t i = 0; i < d.size(); ++i) dx->data[i] += d.data[i];
    }
    if (Tensor* db = g.grad_sink(bias)) {
      for (std::size_t i = 0; i < d.size(); ++i) db->data[i % n] += d.data[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b}, [&g, a, b](const Tensor& d) {
    for (Var v : {a, b}) {
      if (Tensor* s = g.grad_sink(v)) {
        for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b}, [&g, a, b](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i];
    }
    if (Tensor* s = g.grad_sink(b)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] -= d.data[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b}, [&g, a, b](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i] * b.value().data[i];
    }
    if (Tensor* s = g.grad_sink(b)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i] * a.value().data[i];
    }
  });
}

inline Var divide(Var a, Var b) {
  detail::require_same_shape(a, b, "divide");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b.value().data[i];
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b}, [&g, a, b](const Tensor& d) {
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i] / bv[i];
    }
    if (Tensor* s = g.grad_sink(b)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] -= d.data[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [&g, a, c](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += c * d.data[i];
    }
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [&g, a](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[i] += d.data[i];
    }
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  Graph& g = x.graph();
  return g.record(std::move(out), {x}, [&g, x](const Tensor& d) {
    if (Tensor* s = g.grad_sink(x)) {
      const auto& xv = x.value().data;
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (xv[i] > 0.0) s->data[i] += d.data[i];
      }
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

// ---------------------------------------------------------------------------
// Row-wise softmax family

/// Row-wise softmax of a [B×K] tensor, evaluated with the row maximum subtracted.
inline Var softmax(Var z) {
  detail::require_rank(z, 2, "softmax");
  const Tensor& zv = z.value();
  const std::size_t rows = zv.rows();
  const std::size_t k = zv.cols();
  if (k < 2) throw ContractError("softmax needs at least 2 classes, got " + std::to_string(k));
  Tensor out(zv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &zv.data[r * k];
    double* p = &out.data[r * k];
    const double mx = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(in[j] - mx);
      total += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= total;
  }
  Graph& g = z.graph();
  const std::size_t self = g.size();
  return g.record(std::move(out), {z}, [&g, z, self, rows, k](const Tensor& d) {
    Tensor* s = g.grad_sink(z);
    if (s == nullptr) return;
    const Tensor& p = g.value(Var(&g, self));
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += d.data[r * k + j] * p.data[r * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        s->data[r * k + j] += p.data[r * k + j] * (d.data[r * k + j] - dot);
      }
    }
  });
}

inline Var log_softmax(Var z) {
  detail::require_rank(z, 2, "log_softmax");
  const Tensor& zv = z.value();
  const std::size_t rows = zv.rows();
  const std::size_t k = zv.cols();
  if (k < 2) throw ContractError("log_softmax needs at least 2 classes, got " + std::to_string(k));
  Tensor out(zv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &zv.data[r * k];
    const double mx = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < k; ++j) out.data[r * k + j] = in[j] - lse;
  }
  Graph& g = z.graph();
  const std::size_t self = g.size();
  return g.record(std::move(out), {z}, [&g, z, self, rows, k](const Tensor& d) {
    Tensor* s = g.grad_sink(z);
    if (s == nullptr) return;
    const Tensor& lp = g.value(Var(&g, self));
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) total += d.data[r * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        s->data[r * k + j] += d.data[r * k + j] - std::exp(lp.data[r * k + j]) * total;
      }
    }
  });
}

/// Per-row maximum of a [B×K] tensor as a [B] tensor. The gradient goes to the
/// lowest index attaining the maximum.
inline Var max_over_classes(Var p) {
  detail::require_rank(p, 2, "max_over_classes");
  const Tensor& pv = p.value();
  const std::size_t rows = pv.rows();
  const std::size_t k = pv.cols();
  Tensor out({rows});
  std::vector<std::size_t> arg(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (pv.data[r * k + j] > pv.data[r * k + best]) best = j;
    }
    arg[r] = best;
    out.data[r] = pv.data[r * k + best];
  }
  Graph& g = p.graph();
  return g.record(std::move(out), {p}, [&g, p, k, arg = std::move(arg)](const Tensor& d) {
    if (Tensor* s = g.grad_sink(p)) {
      for (std::size_t r = 0; r < arg.size(); ++r) s->data[r * k + arg[r]] += d.data[r];
    }
  });
}

/// out[i] = a[i, labels[i]]
inline Var pick(Var a, std::span<const int> labels) {
  detail::require_rank(a, 2, "pick");
  const Tensor& av = a.value();
  const std::size_t k = av.cols();
  if (labels.size() != av.rows()) {
    throw DimensionError("pick: " + std::to_string(labels.size()) + " labels for " + to_string(av.shape));
  }
  std::vector<std::size_t> cols(labels.size());
  Tensor out({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("pick: label " + std::to_string(labels[i]) + " out of range at row " +
                          std::to_string(i));
    }
    cols[i] = static_cast<std::size_t>(labels[i]);
    out.data[i] = av.data[i * k + cols[i]];
  }
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [&g, a, k, cols = std::move(cols)](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < cols.size(); ++i) s->data[i * k + cols[i]] += d.data[i];
    }
  });
}

/// Rows [begin, end) of a rank-2 tensor.
inline Var rows(Var a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "rows");
  const Tensor& av = a.value();
  if (begin >= end || end > av.rows()) {
    throw DimensionError("rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + to_string(av.shape));
  }
  const std::size_t k = av.cols();
  Tensor out({end - begin, k},
             std::vector<double>(av.data.begin() + static_cast<std::ptrdiff_t>(begin * k),
                                 av.data.begin() + static_cast<std::ptrdiff_t>(end * k)));
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [&g, a, begin, k](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) s->data[begin * k + i] += d.data[i];
    }
  });
}

/// Flat concatenation of the given tensors into one vector.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat: nothing to concatenate");
  std::vector<double> data;
  for (const Var& p : parts) {
    if (&p.graph() != &parts.front().graph()) throw ContractError("concat: variables from different graphs");
    data.insert(data.end(), p.value().data.begin(), p.value().data.end());
  }
  Graph& g = parts.front().graph();
  return g.record(Tensor::vector(std::move(data)), std::span<const Var>(parts), [&g, parts](const Tensor& d) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      if (Tensor* s = g.grad_sink(p)) {
        for (std::size_t i = 0; i < n; ++i) s->data[i] += d.data[offset + i];
      }
      offset += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data) total += v;
  Graph& g = a.graph();
  return g.record(Tensor::scalar(total), {a}, [&g, a](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (double& v : s->data) v += d.data[0];
    }
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().data) total += v;
  Graph& g = a.graph();
  return g.record(Tensor::scalar(total / n), {a}, [&g, a, n](const Tensor& d) {
    if (Tensor* s = g.grad_sink(a)) {
      for (double& v : s->data) v += d.data[0] / n;
    }
  });
}

/// One output coordinate as a sparse combination of input coordinates.
struct SparseRow {
  std::vector<std::pair<std::size_t, double>> terms;  // (flat input index, coefficient)
};

/// out[r] = Σ coef · x[index] over rows[r].terms, with x read in flat order.
inline Var linear_map(Var x, std::vector<SparseRow> map) {
  const Tensor& xv = x.value();
  if (map.empty()) throw DimensionError("linear_map: no output rows");
  Tensor out({map.size()});
  for (std::size_t r = 0; r < map.size(); ++r) {
    double acc = 0.0;
    for (const auto& [idx, coef] : map[r].terms) {
      if (idx >= xv.size()) {
        throw DimensionError("linear_map: index " + std::to_string(idx) + " outside " + to_string(xv.shape));
      }
      acc += coef * xv.data[idx];
    }
    out.data[r] = acc;
  }
  Graph& g = x.graph();
  return g.record(std::move(out), {x}, [&g, x, map = std::move(map)](const Tensor& d) {
    if (Tensor* s = g.grad_sink(x)) {
      for (std::size_t r = 0; r < map.size(); ++r) {
        for (const auto& [idx, coef] : map[r].terms) s->data[idx] += coef * d.data[r];
      }
    }
  });
}

/// Scalar view of one flat coordinate.
inline Var element(Var x, std::size_t index) {
  return sum(linear_map(x, {SparseRow{{{index, 1.0}}}}));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// Builds a scalar from a leaf inside the given graph.
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Largest |analytic − central difference| / max(1, |analytic|) over all
/// coordinates of `x`. Discrepancies within the rounding noise of the
/// difference quotient count as zero, so exactly linear functions report 0.
inline double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  Tensor analytic;
  {
    Graph g;
    Var xv = g.leaf(x);
    Var y = f(g, xv);
    if (!std::isfinite(y.item())) throw NumericalError("grad_check: non-finite value at the base point");
    g.backward(y);
    analytic = g.has_grad(xv) ? g.grad(xv) : Tensor(x.shape, std::vector<double>(x.size(), 0.0));
  }
  auto eval = [&](const Tensor& point) {
    Graph g;
    return f(g, g.constant(point)).item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data[i];
    probe.data[i] = orig + step;
    const double up = eval(probe);
    probe.data[i] = orig - step;
    const double down = eval(probe);
    probe.data[i] = orig;
    const double a = analytic.data[i];
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
      throw NumericalError("grad_check: non-finite value at coordinate " + std::to_string(i));
    }
    const double width = (orig + step) - (orig - step);
    const double numeric = (up - down) / width;
    const double noise = 64.0 * std::numeric_limits<double>::epsilon() *
                         std::max({1.0, std::abs(up), std::abs(down)}) / width;
    const double excess = std::max(0.0, std::abs(a - numeric) - noise);
    worst = std::max(worst, excess / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace rankcal
