// SPDX-License-Identifier: Apache-2.0
//
// Dense 2-D value/gradient engine with reverse-mode differentiation.
//
// Every value is a row-major matrix of doubles; scalars are 1x1. Ops build a
// DAG of shared nodes, and backward() walks the DAG in reverse topological
// order. Broadcasting is limited to scalar-with-tensor in the elementwise
// binary ops; anything else goes through repeat_rows().
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace m3c2::grad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major matrix of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(rows_, cols_));
    }
  }
  Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Tensor: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(n, 1, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t numel() const { return data_.size(); }
  Shape shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const { return shape_str(rows_, cols_); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item on " + shape_string());
    return data_[0];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Graph nodes

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.numel() == 0) grad = Tensor(value.rows(), value.cols());
    return grad;
  }
};

namespace detail {
inline bool& recording_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

struct BranchTrace {
  bool active = false;
  std::uint64_t hash = 0;
};

inline BranchTrace& branch_trace() {
  thread_local BranchTrace t;
  return t;
}
}  // namespace detail

/// Records a discrete choice (relu side, top-M membership) while a gradient
/// check is tracing. Two evaluations with different traces lie on different
/// smooth pieces.
inline void note_branch(std::uint64_t v) {
  auto& t = detail::branch_trace();
  if (!t.active) return;
  t.hash = (t.hash ^ (v + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
}

/// Suspends graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::recording_disabled()) { detail::recording_disabled() = true; }
  ~NoGradGuard() { detail::recording_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  /// Gradient after backward(); zeros if the node was not reached.
  Tensor grad() const {
    if (node_->grad.numel() == 0) return Tensor(value().rows(), value().cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.item(); }
  const char* op() const { return node_->op; }
  bool defined() const { return static_cast<bool>(node_); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->op = "constant";
  return Var(std::move(n));
}

/// Trainable leaf.
inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->op = "parameter";
  return Var(std::move(n));
}

/// Builds an op node. `backward_fn` is attached only when some parent needs a
/// gradient and recording is enabled. Public so callers can define custom ops.
inline Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = name;
  if (!detail::recording_disabled()) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

inline void check_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (equal shapes, or one side 1x1)

namespace detail {

enum class Bin { Add, Sub, Mul, Div };

inline const char* bin_name(Bin k) {
  switch (k) {
    case Bin::Add: return "add";
    case Bin::Sub: return "sub";
    case Bin::Mul: return "mul";
    case Bin::Div: return "div";
  }
  return "?";
}

inline Var binary(Bin kind, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_sc = av.numel() == 1 && bv.numel() != 1;
  const bool b_sc = bv.numel() == 1 && av.numel() != 1;
  if (!a_sc && !b_sc && !av.same_shape(bv)) {
    throw ShapeError(std::string(bin_name(kind)) + ": shape mismatch " + av.shape_string() +
                     " vs " + bv.shape_string());
  }
  const Tensor& shape_src = a_sc ? bv : av;
  Tensor out(shape_src.rows(), shape_src.cols());
  const std::size_t n = out.numel();
  auto A = [&](std::size_t i) { return a_sc ? av[0] : av[i]; };
  auto B = [&](std::size_t i) { return b_sc ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Bin::Add: out[i] = A(i) + B(i); break;
      case Bin::Sub: out[i] = A(i) - B(i); break;
      case Bin::Mul: out[i] = A(i) * B(i); break;
      case Bin::Div: out[i] = A(i) / B(i); break;
    }
  }
  return make_op(bin_name(kind), std::move(out), {a, b}, [kind, a_sc, b_sc](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    const std::size_t n = g.numel();
    auto A = [&](std::size_t i) { return a_sc ? pa.value[0] : pa.value[i]; };
    auto B = [&](std::size_t i) { return b_sc ? pb.value[0] : pb.value[i]; };
    if (pa.requires_grad) {
      Tensor& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        switch (kind) {
          case Bin::Add:
          case Bin::Sub: d = g[i]; break;
          case Bin::Mul: d = g[i] * B(i); break;
          case Bin::Div: d = g[i] / B(i); break;
        }
        ga[a_sc ? 0 : i] += d;
      }
    }
    if (pb.requires_grad) {
      Tensor& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        switch (kind) {
          case Bin::Add: d = g[i]; break;
          case Bin::Sub: d = -g[i]; break;
          case Bin::Mul: d = g[i] * A(i); break;
          case Bin::Div: d = -g[i] * A(i) / (B(i) * B(i)); break;
        }
        gb[b_sc ? 0 : i] += d;
      }
    }
  });
}

template <class F, class DF>
Var unary(const char* name, const Var& x, F f, DF df_from_xy) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return make_op(name, std::move(out), {x}, [df_from_xy](Node& self) {
    Node& p = *self.parents[0];
    Tensor& gp = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      gp[i] += self.grad[i] * df_from_xy(p.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::binary(detail::Bin::Add, a, b); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(detail::Bin::Sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return detail::binary(detail::Bin::Mul, a, b); }
inline Var div(const Var& a, const Var& b) { return detail::binary(detail::Bin::Div, a, b); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

/// Multiply by a fixed (non-differentiable) scalar.
inline Var scale(const Var& x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_constant(const Var& x, double c) {
  return detail::unary(
      "add_constant", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var tanh(const Var& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& x) {
  if (detail::branch_trace().active) {
    for (double v : x.value().data()) note_branch(v > 0.0 ? 1 : 0);
  }
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(const Var& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av(i, p);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * bv(p, j);
    }
  }
  return make_op("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    if (pa.requires_grad) {
      Tensor& ga = pa.grad_buffer();  // g * b^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g(i, j) * pb.value(p, j);
          ga(i, p) += s;
        }
    }
    if (pb.requires_grad) {
      Tensor& gb = pb.grad_buffer();  // a^T * g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.value(i, p);
          for (std::size_t j = 0; j < n; ++j) gb(p, j) += aip * g(i, j);
        }
    }
  });
}

inline Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.cols(), xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(j, i) = xv(i, j);
  return make_op("transpose", std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    Tensor& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.rows(); ++i)
      for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += self.grad(j, i);
  });
}

/// Tiles a 1xC row `times` times into a (times)xC matrix.
inline Var repeat_rows(const Var& x, std::size_t times) {
  const Tensor& xv = x.value();
  if (xv.rows() != 1) throw ShapeError("repeat_rows: expected one row, got " + xv.shape_string());
  if (times == 0) throw ShapeError("repeat_rows: zero repeats");
  const std::size_t c = xv.cols();
  Tensor out(times, c);
  for (std::size_t r = 0; r < times; ++r)
    for (std::size_t j = 0; j < c; ++j) out(r, j) = xv[j];
  return make_op("repeat_rows", std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    Tensor& gp = p.grad_buffer();
    for (std::size_t r = 0; r < self.grad.rows(); ++r)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) gp[j] += self.grad(r, j);
  });
}

/// axis 0 stacks rows, axis 1 joins columns.
inline Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  std::size_t rows = xs[0].rows(), cols = xs[0].cols();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const bool ok = axis == 0 ? xs[i].cols() == cols : xs[i].rows() == rows;
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + xs[0].value().shape_string() + " vs " +
                       xs[i].value().shape_string());
    }
    (axis == 0 ? rows : cols) += axis == 0 ? xs[i].rows() : xs[i].cols();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const auto& x : xs) {
    const Tensor& v = x.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        if (axis == 0) out(off + i, j) = v(i, j);
        else out(i, off + j) = v(i, j);
      }
    off += axis == 0 ? v.rows() : v.cols();
  }
  return make_op("concat", std::move(out), xs, [axis](Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      const std::size_t r = p.value.rows(), c = p.value.cols();
      if (p.requires_grad) {
        Tensor& gp = p.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gp(i, j) += axis == 0 ? self.grad(off + i, j) : self.grad(i, off + j);
      }
      off += axis == 0 ? r : c;
    }
  });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& x, int axis, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? xv.rows() : xv.cols();
  if (begin >= end || end > extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + xv.shape_string());
  }
  const std::size_t r = axis == 0 ? end - begin : xv.rows();
  const std::size_t c = axis == 1 ? end - begin : xv.cols();
  Tensor out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out(i, j) = axis == 0 ? xv(begin + i, j) : xv(i, begin + j);
  return make_op("slice", std::move(out), {x}, [axis, begin](Node& self) {
    Tensor& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) {
        if (axis == 0) gp(begin + i, j) += self.grad(i, j);
        else gp(i, begin + j) += self.grad(i, j);
      }
  });
}

/// Gathers flat (row-major) elements into a 1xI row.
inline Var take(const Var& x, std::vector<std::size_t> indices) {
  const Tensor& xv = x.value();
  Tensor out(1, indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.numel()) throw ShapeError("take: index out of range");
    out[i] = xv[indices[i]];
  }
  return make_op("take", std::move(out), {x}, [idx = std::move(indices)](Node& self) {
    Tensor& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) gp[idx[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return make_op("sum", Tensor::scalar(s), {x}, [](Node& self) {
    Tensor& gp = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

/// axis 0 collapses rows (-> 1xC), axis 1 collapses columns (-> Rx1).
inline Var sum(const Var& x, int axis) {
  const Tensor& xv = x.value();
  if (axis != 0 && axis != 1) throw ShapeError("sum: axis must be 0 or 1");
  Tensor out = axis == 0 ? Tensor(1, xv.cols()) : Tensor(xv.rows(), 1);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out[axis == 0 ? j : i] += xv(i, j);
  return make_op("sum_axis", std::move(out), {x}, [axis](Node& self) {
    Tensor& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.rows(); ++i)
      for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += self.grad[axis == 0 ? j : i];
  });
}

inline Var mean(const Var& x, int axis) {
  const std::size_t n = axis == 0 ? x.rows() : x.cols();
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

/// Frobenius norm. Gradient at the origin is taken as zero.
inline Var l2_norm(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v * v;
  const double nrm = std::sqrt(s);
  return make_op("l2_norm", Tensor::scalar(nrm), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    const double nrm = self.value[0];
    if (nrm == 0.0) return;
    Tensor& gp = p.grad_buffer();
    const double g = self.grad[0] / nrm;
    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += g * p.value[i];
  });
}

/// Frobenius inner product.
inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

/// Cosine of the Frobenius angle. Defined as 0 when either side is all-zero.
inline Var cosine(const Var& a, const Var& b) {
  check_same_shape("cosine", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) {
    ab += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double c = degenerate ? 0.0 : ab / (na * nb);
  return make_op("cosine", Tensor::scalar(c), {a, b}, [na, nb, degenerate](Node& self) {
    if (degenerate) return;
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double c = self.value[0];
    const double g = self.grad[0];
    // d cos / da = b/(|a||b|) - cos * a/|a|^2
    if (pa.requires_grad) {
      Tensor& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < ga.numel(); ++i)
        ga[i] += g * (pb.value[i] / (na * nb) - c * pa.value[i] / (na * na));
    }
    if (pb.requires_grad) {
      Tensor& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < gb.numel(); ++i)
        gb[i] += g * (pa.value[i] / (na * nb) - c * pb.value[i] / (nb * nb));
    }
  });
}

inline Var mse(const Var& a, const Var& b) {
  check_same_shape("mse", a.value(), b.value());
  const Var d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Normalisation

/// Max-subtracted softmax. axis 1 normalises each row, axis 0 each column.
inline Var softmax(const Var& x, int axis) {
  const Tensor& xv = x.value();
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  Tensor out(xv.rows(), xv.cols());
  const std::size_t outer = axis == 1 ? xv.rows() : xv.cols();
  const std::size_t inner = axis == 1 ? xv.cols() : xv.rows();
  const std::size_t cols = xv.cols();
  // flat offset of element i along the normalised axis of slice o
  auto at = [axis, cols](std::size_t o, std::size_t i) {
    return axis == 1 ? o * cols + i : i * cols + o;
  };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, xv[at(o, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      const double e = std::exp(xv[at(o, i)] - mx);
      out[at(o, i)] = e;
      z += e;
    }
    for (std::size_t i = 0; i < inner; ++i) out[at(o, i)] /= z;
  }
  return make_op("softmax", std::move(out), {x}, [outer, inner, at](Node& self) {
    Tensor& gp = self.parents[0]->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += g[at(o, i)] * y[at(o, i)];
      for (std::size_t i = 0; i < inner; ++i) gp[at(o, i)] += y[at(o, i)] * (g[at(o, i)] - s);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm with affine 1xC gamma and beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("layer_norm: shape mismatch " + xv.shape_string() + " vs gamma " +
                     gamma.value().shape_string() + " / beta " + beta.value().shape_string());
  }
  Tensor xhat(r, c);
  std::vector<double> inv_std(r);
  Tensor out(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
      out(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  }
  return make_op("layer_norm", std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pg = *self.parents[1];
                   Node& pb = *self.parents[2];
                   const Tensor& g = self.grad;
                   if (pg.requires_grad || pb.requires_grad) {
                     Tensor& gg = pg.grad_buffer();
                     Tensor& gb = pb.grad_buffer();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) {
                         gg[j] += g(i, j) * xhat(i, j);
                         gb[j] += g(i, j);
                       }
                   }
                   if (px.requires_grad) {
                     Tensor& gx = px.grad_buffer();
                     const double inv_c = 1.0 / static_cast<double>(c);
                     for (std::size_t i = 0; i < r; ++i) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                         const double dxh = g(i, j) * pg.value[j];
                         s1 += dxh;
                         s2 += dxh * xhat(i, j);
                       }
                       for (std::size_t j = 0; j < c; ++j) {
                         const double dxh = g(i, j) * pg.value[j];
                         gx(i, j) += inv_std[i] * (dxh - inv_c * s1 - inv_c * xhat(i, j) * s2);
                       }
                     }
                   }
                 });
}

/// Cross-entropy of a 1xC logit row against a class index, log-sum-exp folded.
inline Var softmax_cross_entropy(const Var& logits, std::size_t target) {
  const Tensor& lv = logits.value();
  if (lv.rows() != 1) {
    throw ShapeError("softmax_cross_entropy: expected 1xC logits, got " + lv.shape_string());
  }
  if (target >= lv.cols()) {
    throw ShapeError("softmax_cross_entropy: target " + std::to_string(target) +
                     " out of range for " + lv.shape_string());
  }
  double mx = -INFINITY;
  for (double v : lv.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : lv.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Tensor probs(1, lv.cols());
  for (std::size_t j = 0; j < lv.cols(); ++j) probs[j] = std::exp(lv[j] - lse);
  return make_op("softmax_cross_entropy", Tensor::scalar(lse - lv[target]), {logits},
                 [probs = std::move(probs), target](Node& self) {
                   Tensor& gp = self.parents[0]->grad_buffer();
                   const double g = self.grad[0];
                   for (std::size_t j = 0; j < probs.numel(); ++j)
                     gp[j] += g * (probs[j] - (j == target ? 1.0 : 0.0));
                 });
}

// ---------------------------------------------------------------------------
// Backward

class BackwardError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reverse-mode sweep from a scalar. Intermediate gradients are reset first;
/// leaf gradients accumulate, so callers zero them between steps.
inline void backward(const Var& loss) {
  if (loss.value().numel() != 1) {
    throw BackwardError("backward: loss must be scalar, got " + loss.value().shape_string());
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad = Tensor();
  }
  loss.node()->grad = Tensor::scalar(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.numel() != 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference check

inline constexpr double kGradCheckScaleFloor = 1e-3;

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// turning finite-difference rounding noise into huge ratios.
inline double relative_error(double analytic, double numeric,
                             double floor = kGradCheckScaleFloor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t straddled = 0;  // probes whose stencil crossed a branch; not scored
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;
  bool passed() const {
    return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.passed; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
};

struct NamedParam {
  std::string name;
  Var var;
};

/// Compares analytic gradients of `f` against central differences.
/// `f` must rebuild its graph from the current parameter values on each call.
/// A probe whose x+h or x-h evaluation takes a different branch (see
/// note_branch) than x has no derivative to compare; it is counted in
/// `straddled` instead of scored.
/// When `coords_per_param` is nonzero only that many coordinates per
/// parameter are probed, picked by `pick(param_index, numel, k)`.
inline GradCheckReport grad_check(
    const std::function<Var()>& f, std::vector<NamedParam> params, double h, double tol,
    std::size_t coords_per_param = 0,
    const std::function<std::size_t(std::size_t, std::size_t, std::size_t)>& pick = {}) {
  GradCheckReport report;
  report.tolerance = tol;
  for (auto& p : params) p.var.zero_grad();
  {
    Var loss = f();
    backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.var.grad());

  NoGradGuard no_grad;
  auto& trace = detail::branch_trace();
  const detail::BranchTrace saved = trace;
  struct Restore {
    detail::BranchTrace& t;
    detail::BranchTrace v;
    ~Restore() { t = v; }
  } restore{trace, saved};
  auto traced = [&](double& value) {
    trace.active = true;
    trace.hash = 0;
    value = f().item();
    trace.active = false;
    return trace.hash;
  };
  double base_value = 0.0;
  const std::uint64_t base = traced(base_value);
  (void)base_value;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParamCheck pc;
    pc.name = params[pi].name;
    Tensor& v = params[pi].var.mutable_value();
    const std::size_t numel = v.numel();
    std::vector<std::size_t> coords;
    if (coords_per_param == 0 || coords_per_param >= numel || !pick) {
      coords.resize(numel);
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
      for (std::size_t k = 0; k < coords_per_param; ++k) coords.push_back(pick(pi, numel, k));
    }
    for (std::size_t idx : coords) {
      const double orig = v[idx];
      double fp = 0.0, fm = 0.0;
      v[idx] = orig + h;
      const std::uint64_t sp = traced(fp);
      v[idx] = orig - h;
      const std::uint64_t sm = traced(fm);
      v[idx] = orig;
      if (sp != base || sm != base) {
        ++pc.straddled;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[pi][idx], numeric);
      if (err > pc.max_rel_error) {
        pc.max_rel_error = err;
        pc.worst_index = idx;
      }
      ++pc.checked;
    }
    pc.passed = pc.max_rel_error <= tol;
    report.params.push_back(std::move(pc));
  }
  return report;
}

}  // namespace m3c2::grad
