#pragma once

// Tape-style reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Graph records every primitive in creation order, so node ids are already
// a topological order; backward() walks the ids once from the root down.
// Tensors of any rank are viewed as rows x cols with cols = last dimension.

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <deque>
#include <vector>

#include "hcrnn/tensor.hpp"

namespace hcrnn::ad {

enum class Op : std::uint8_t {
  leaf,
  matmul,
  transpose,
  reshape,
  add,
  sub,
  mul,
  affine,
  sigmoid,
  tanh,
  exp,
  log,
  softmax,
  causal_softmax,
  concat,
  stack_rows,
  slice_rows,
  gather_rows,
  pick,
  dropout,
  sum,
  mean,
  sum_rows,
  mean_rows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::affine: return "affine";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::softmax: return "softmax";
    case Op::causal_softmax: return "causal_softmax";
    case Op::concat: return "concat";
    case Op::stack_rows: return "stack_rows";
    case Op::slice_rows: return "slice_rows";
    case Op::gather_rows: return "gather_rows";
    case Op::pick: return "pick";
    case Op::dropout: return "dropout";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::sum_rows: return "sum_rows";
    case Op::mean_rows: return "mean_rows";
  }
  return "?";
}

using NodeId = std::uint32_t;
inline constexpr NodeId kInvalidNode = std::numeric_limits<NodeId>::max();

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives
/// and has not been cleared.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr && id_ != kInvalidNode; }
  Graph& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }

  inline const Tensor& value() const;
  inline const Tensor& grad() const;
  inline bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Graph;
  Var(Graph* g, NodeId id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  NodeId id_ = kInvalidNode;
};

struct Node {
  Op op = Op::leaf;
  std::array<NodeId, 3> in{kInvalidNode, kInvalidNode, kInvalidNode};
  std::uint8_t arity = 0;
  std::vector<NodeId> extra;  // inputs beyond the third (concat / stack)
  Tensor value;
  const Tensor* external = nullptr;
  Tensor grad;
  bool requires_grad = false;
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<std::size_t> index;
  std::vector<double> mask;

  const Tensor& val() const { return external ? *external : value; }
  std::size_t input_count() const { return arity + extra.size(); }
  NodeId input(std::size_t i) const { return i < arity ? in[i] : extra[i - arity]; }
};

namespace kernel {

inline void matmul_into(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a * b^T with a: m x k, b: n x k
inline void matmul_nt_into(std::span<const double> a, std::span<const double> b, std::span<double> c,
                           std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// c += a^T * b with a: k x m, b: k x n
inline void matmul_tn_into(std::span<const double> a, std::span<const double> b, std::span<double> c,
                           std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t a_rs, a_cs, b_rs, b_cs;
};

inline Broadcast broadcast_shape(const Tensor& a, const Tensor& b, const char* what) {
  const std::size_t ra = a.rows(), ca = a.cols(), rb = b.rows(), cb = b.cols();
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(what) + ": cannot broadcast " + to_string(a.shape()) + " with " +
                         to_string(b.shape()));
  };
  Broadcast bc{};
  bc.rows = dim(ra, rb);
  bc.cols = dim(ca, cb);
  bc.a_rs = ra == 1 ? 0 : ca;
  bc.a_cs = ca == 1 ? 0 : 1;
  bc.b_rs = rb == 1 ? 0 : cb;
  bc.b_cs = cb == 1 ? 0 : 1;
  return bc;
}

inline void softmax_row(const double* x, double* y, std::size_t n) {
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= s;
}

}  // namespace kernel

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor t) { return push_leaf(std::move(t), nullptr, false); }
  /// Leaf that receives a gradient.
  Var variable(Tensor t) { return push_leaf(std::move(t), nullptr, true); }
  /// Leaf viewing caller-owned storage, which must outlive the graph.
  Var bind(const Tensor& external, bool requires_grad) { return push_leaf(Tensor{}, &external, requires_grad); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return nodes_[id].val(); }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  bool backward_done() const noexcept { return backward_done_; }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  /// Populates grad on every requires_grad node reachable from `root`.
  void backward(Var root);

  // Node construction; used by the primitive functions below.
  Var push(Op op, std::initializer_list<Var> inputs, Tensor value) {
    Node n;
    n.op = op;
    for (Var v : inputs) add_input(n, v);
    n.value = std::move(value);
    return commit(std::move(n));
  }
  Var push(Node n) { return commit(std::move(n)); }

  static void add_input(Node& n, Var v) {
    if (n.arity < 3) {
      n.in[n.arity++] = v.id();
    } else {
      n.extra.push_back(v.id());
    }
  }

 private:
  Var push_leaf(Tensor t, const Tensor* external, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(t);
    n.external = external;
    n.requires_grad = requires_grad;
    if (!n.val().all_finite()) throw NumericError("leaf tensor contains non-finite values");
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  Var commit(Node n) {
    if (!n.value.all_finite()) throw NumericError(std::string(op_name(n.op)) + " produced a non-finite value");
    bool rg = false;
    for (std::size_t i = 0; i < n.input_count(); ++i) rg = rg || nodes_[n.input(i)].requires_grad;
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.val().shape(), 0.0);
    return n.grad;
  }

  void backward_node(NodeId id);

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Tensor& Var::grad() const { return graph_->grad(id_); }
inline bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

inline void Graph::backward(Var root) {
  if (!root.valid() || &root.graph() != this) throw ContractError("backward: root does not belong to this graph");
  if (root.value().size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + to_string(root.value().shape()));
  }
  if (backward_done_) throw ContractError("backward: already run on this graph");
  backward_done_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  grad_buffer(root.id())[0] = 1.0;
  for (NodeId id = root.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || n.op == Op::leaf) continue;
    backward_node(id);
  }
  for (const Node& n : nodes_) {
    if (!n.grad.empty() && !n.grad.all_finite()) {
      throw NumericError(std::string("backward through ") + op_name(n.op) + " produced a non-finite gradient");
    }
  }
}

inline void Graph::backward_node(NodeId id) {
  // Node storage may not reallocate here: backward never pushes nodes.
  const Node& n = nodes_[id];
  const Tensor& g = n.grad;
  const Tensor& y = n.val();
  auto wants = [&](std::size_t i) { return nodes_[n.input(i)].requires_grad; };
  auto in_val = [&](std::size_t i) -> const Tensor& { return nodes_[n.input(i)].val(); };

  switch (n.op) {
    case Op::leaf:
      break;
    case Op::matmul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
      if (wants(0)) kernel::matmul_nt_into(g.data(), b.data(), grad_buffer(n.in[0]).data(), m, p, k);
      if (wants(1)) kernel::matmul_tn_into(a.data(), g.data(), grad_buffer(n.in[1]).data(), m, k, p);
      break;
    }
    case Op::transpose: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t r = y.rows(), c = y.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[j * r + i] += g[i * c + j];
      break;
    }
    case Op::reshape:
    case Op::dropout: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      if (n.op == Op::reshape) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.mask[i];
      }
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::mul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const auto bc = kernel::broadcast_shape(a, b, op_name(n.op));
      const bool wa = wants(0), wb = wants(1);
      Tensor* ga = wa ? &grad_buffer(n.in[0]) : nullptr;
      Tensor* gb = wb ? &grad_buffer(n.in[1]) : nullptr;
      for (std::size_t i = 0; i < bc.rows; ++i) {
        for (std::size_t j = 0; j < bc.cols; ++j) {
          const double gv = g[i * bc.cols + j];
          const std::size_t ia = i * bc.a_rs + j * bc.a_cs;
          const std::size_t ib = i * bc.b_rs + j * bc.b_cs;
          if (n.op == Op::add) {
            if (wa) (*ga)[ia] += gv;
            if (wb) (*gb)[ib] += gv;
          } else if (n.op == Op::sub) {
            if (wa) (*ga)[ia] += gv;
            if (wb) (*gb)[ib] -= gv;
          } else {
            if (wa) (*ga)[ia] += gv * b[ib];
            if (wb) (*gb)[ib] += gv * a[ia];
          }
        }
      }
      break;
    }
    case Op::affine: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.alpha * g[i];
      break;
    }
    case Op::sigmoid: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::tanh: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::exp: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      break;
    }
    case Op::log: {
      if (!wants(0)) break;
      const Tensor& x = in_val(0);
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > n.alpha) ga[i] += g[i] / x[i];
      }
      break;
    }
    case Op::softmax:
    case Op::causal_softmax: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t r = y.rows(), c = y.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const std::size_t width = n.op == Op::softmax ? c : std::min(c, i + n.index[0] + 1);
        const double* yr = y.data().data() + i * c;
        const double* gr = g.data().data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < width; ++j) ga[i * c + j] += yr[j] * (gr[j] - dot);
      }
      break;
    }
    case Op::concat: {
      const std::size_t r = y.rows(), c = y.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.input_count(); ++k) {
        const NodeId src = n.input(k);
        const std::size_t ck = nodes_[src].val().cols();
        if (nodes_[src].requires_grad) {
          Tensor& gk = grad_buffer(src);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < ck; ++j) gk[i * ck + j] += g[i * c + offset + j];
        }
        offset += ck;
      }
      break;
    }
    case Op::stack_rows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.input_count(); ++k) {
        const NodeId src = n.input(k);
        const std::size_t len = nodes_[src].val().size();
        if (nodes_[src].requires_grad) {
          Tensor& gk = grad_buffer(src);
          for (std::size_t i = 0; i < len; ++i) gk[i] += g[offset + i];
        }
        offset += len;
      }
      break;
    }
    case Op::slice_rows: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t start = n.index[0] * y.cols();
      for (std::size_t i = 0; i < g.size(); ++i) ga[start + i] += g[i];
      break;
    }
    case Op::gather_rows: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t c = y.cols();
      for (std::size_t i = 0; i < n.index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[n.index[i] * c + j] += g[i * c + j];
      break;
    }
    case Op::pick: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t c = in_val(0).cols();
      for (std::size_t i = 0; i < n.index.size(); ++i) ga[i * c + n.index[i]] += g[i];
      break;
    }
    case Op::sum:
    case Op::mean: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const double gv = n.op == Op::sum ? g[0] : g[0] / static_cast<double>(ga.size());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
      break;
    }
    case Op::sum_rows:
    case Op::mean_rows: {
      if (!wants(0)) break;
      Tensor& ga = grad_buffer(n.in[0]);
      const std::size_t r = ga.rows(), c = ga.cols();
      const double s = n.op == Op::sum_rows ? 1.0 : 1.0 / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += s * g[j];
      break;
    }
  }
}

namespace kernel {
inline Graph& same_graph(Var a, Var b, const char* what) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(what) + ": invalid operand");
  if (&a.graph() != &b.graph()) throw ContractError(std::string(what) + ": operands belong to different graphs");
  return a.graph();
}
inline Graph& graph_of(Var a, const char* what) {
  if (!a.valid()) throw ContractError(std::string(what) + ": invalid operand");
  return a.graph();
}
inline Shape shape2(std::size_t r, std::size_t c) { return Shape{r, c}; }

template <class F>
Var unary(Var x, Op op, F f) {
  Graph& g = graph_of(x, op_name(op));
  const Tensor& xv = x.value();
  Tensor out(shape2(xv.rows(), xv.cols()));
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return g.push(op, {x}, std::move(out));
}

inline Var binary(Var a, Var b, Op op) {
  Graph& g = same_graph(a, b, op_name(op));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto bc = broadcast_shape(av, bv, op_name(op));
  Tensor out(shape2(bc.rows, bc.cols));
  for (std::size_t i = 0; i < bc.rows; ++i) {
    for (std::size_t j = 0; j < bc.cols; ++j) {
      const double x = av[i * bc.a_rs + j * bc.a_cs];
      const double y = bv[i * bc.b_rs + j * bc.b_cs];
      out[i * bc.cols + j] = op == Op::add ? x + y : op == Op::sub ? x - y : x * y;
    }
  }
  return g.push(op, {a, b}, std::move(out));
}
}  // namespace kernel

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Graph& g = kernel::same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Tensor out(kernel::shape2(av.rows(), bv.cols()));
  kernel::matmul_into(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.cols());
  return g.push(Op::matmul, {a, b}, std::move(out));
}

inline Var transpose(Var a) {
  Graph& g = kernel::graph_of(a, "transpose");
  const Tensor& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(kernel::shape2(c, r));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return g.push(Op::transpose, {a}, std::move(out));
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Graph& g = kernel::graph_of(a, "reshape");
  const Tensor& av = a.value();
  if (rows * cols != av.size()) {
    throw DimensionError("reshape: cannot view " + to_string(av.shape()) + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  return g.push(Op::reshape, {a}, Tensor(kernel::shape2(rows, cols), av.storage()));
}

/// Element-wise with 2-D broadcasting (a dimension of 1 stretches).
inline Var operator+(Var a, Var b) { return kernel::binary(a, b, Op::add); }
inline Var operator-(Var a, Var b) { return kernel::binary(a, b, Op::sub); }
/// Hadamard product.
inline Var operator*(Var a, Var b) { return kernel::binary(a, b, Op::mul); }

/// scale * x + shift
inline Var affine(Var x, double scale, double shift) {
  Graph& g = kernel::graph_of(x, "affine");
  const Tensor& xv = x.value();
  Node n;
  n.op = Op::affine;
  Graph::add_input(n, x);
  n.alpha = scale;
  n.beta = shift;
  n.value = Tensor(kernel::shape2(xv.rows(), xv.cols()));
  for (std::size_t i = 0; i < xv.size(); ++i) n.value[i] = scale * xv[i] + shift;
  return g.push(std::move(n));
}
inline Var operator*(double s, Var x) { return affine(x, s, 0.0); }
inline Var operator*(Var x, double s) { return affine(x, s, 0.0); }
inline Var operator+(Var x, double s) { return affine(x, 1.0, s); }
inline Var operator-(double s, Var x) { return affine(x, -1.0, s); }
inline Var operator-(Var x, double s) { return affine(x, 1.0, -s); }
inline Var operator-(Var x) { return affine(x, -1.0, 0.0); }

inline Var sigmoid(Var x) {
  return kernel::unary(x, Op::sigmoid, [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}
inline Var tanh(Var x) { return kernel::unary(x, Op::tanh, [](double v) { return std::tanh(v); }); }
inline Var exp(Var x) { return kernel::unary(x, Op::exp, [](double v) { return std::exp(v); }); }

/// Natural log of max(x, floor). The gradient is zero where the floor binds.
inline Var log(Var x, double floor = 0.0) {
  Graph& g = kernel::graph_of(x, "log");
  const Tensor& xv = x.value();
  Node n;
  n.op = Op::log;
  Graph::add_input(n, x);
  n.alpha = floor;
  n.value = Tensor(kernel::shape2(xv.rows(), xv.cols()));
  for (std::size_t i = 0; i < xv.size(); ++i) n.value[i] = std::log(std::max(xv[i], floor));
  return g.push(std::move(n));
}

/// Softmax over the last axis, row by row.
inline Var softmax(Var x) {
  Graph& g = kernel::graph_of(x, "softmax");
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(kernel::shape2(r, c));
  for (std::size_t i = 0; i < r; ++i) kernel::softmax_row(xv.data().data() + i * c, out.data().data() + i * c, c);
  return g.push(Op::softmax, {x}, std::move(out));
}

/// Row i is a softmax over columns [0, i + offset]; later columns are zero.
inline Var causal_softmax(Var x, std::size_t offset = 0) {
  Graph& g = kernel::graph_of(x, "causal_softmax");
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Node n;
  n.op = Op::causal_softmax;
  Graph::add_input(n, x);
  n.index = {offset};
  n.value = Tensor(kernel::shape2(r, c));
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t width = std::min(c, i + offset + 1);
    kernel::softmax_row(xv.data().data() + i * c, n.value.data().data() + i * c, width);
  }
  return g.push(std::move(n));
}

/// Concatenation along the last axis.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat: no operands");
  Graph& g = kernel::graph_of(parts[0], "concat");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (Var p : parts) {
    kernel::same_graph(parts[0], p, "concat");
    if (p.rows() != r) throw DimensionError("concat: row count mismatch");
    c += p.cols();
  }
  Node n;
  n.op = Op::concat;
  n.value = Tensor(kernel::shape2(r, c));
  std::size_t offset = 0;
  for (Var p : parts) {
    Graph::add_input(n, p);
    const Tensor& pv = p.value();
    const std::size_t pc = pv.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) n.value[i * c + offset + j] = pv[i * pc + j];
    offset += pc;
  }
  return g.push(std::move(n));
}
inline Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

/// Concatenation along the first axis.
inline Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("stack_rows: no operands");
  Graph& g = kernel::graph_of(parts[0], "stack_rows");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (Var p : parts) {
    kernel::same_graph(parts[0], p, "stack_rows");
    if (p.cols() != c) throw DimensionError("stack_rows: column count mismatch");
    r += p.rows();
  }
  Node n;
  n.op = Op::stack_rows;
  n.value = Tensor(kernel::shape2(r, c));
  std::size_t offset = 0;
  for (Var p : parts) {
    Graph::add_input(n, p);
    const Tensor& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), n.value.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += pv.size();
  }
  return g.push(std::move(n));
}

/// Rows [begin, end).
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Graph& g = kernel::graph_of(x, "slice_rows");
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t c = xv.cols();
  Node n;
  n.op = Op::slice_rows;
  Graph::add_input(n, x);
  n.index = {begin, end};
  n.value = Tensor(kernel::shape2(end - begin, c),
                   std::vector<double>(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                       xv.data().begin() + static_cast<std::ptrdiff_t>(end * c)));
  return g.push(std::move(n));
}

/// Embedding lookup: output row i is table row indices[i].
inline Var gather_rows(Var table, std::span<const std::size_t> indices) {
  Graph& g = kernel::graph_of(table, "gather_rows");
  const Tensor& tv = table.value();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t c = tv.cols();
  Node n;
  n.op = Op::gather_rows;
  Graph::add_input(n, table);
  n.index.assign(indices.begin(), indices.end());
  n.value = Tensor(kernel::shape2(indices.size(), c));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                n.value.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return g.push(std::move(n));
}

/// Output is rows x 1 holding x[i, columns[i]].
inline Var pick(Var x, std::span<const std::size_t> columns) {
  Graph& g = kernel::graph_of(x, "pick");
  const Tensor& xv = x.value();
  if (columns.size() != xv.rows()) throw DimensionError("pick: need one column index per row");
  const std::size_t c = xv.cols();
  Node n;
  n.op = Op::pick;
  Graph::add_input(n, x);
  n.index.assign(columns.begin(), columns.end());
  n.value = Tensor(kernel::shape2(columns.size(), 1));
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] >= c) throw DimensionError("pick: column out of range");
    n.value[i] = xv[i * c + columns[i]];
  }
  return g.push(std::move(n));
}

/// Inverted dropout: each entry is zeroed with probability `drop` and the
/// survivors are scaled by 1/(1-drop). drop == 0 is the identity.
inline Var dropout(Var x, double drop, std::uint64_t seed) {
  Graph& g = kernel::graph_of(x, "dropout");
  if (!(drop >= 0.0 && drop < 1.0)) throw ContractError("dropout: probability must lie in [0, 1)");
  const Tensor& xv = x.value();
  Node n;
  n.op = Op::dropout;
  Graph::add_input(n, x);
  n.mask.assign(xv.size(), 1.0);
  if (drop > 0.0) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(1.0 - drop);
    const double scale = 1.0 / (1.0 - drop);
    for (double& m : n.mask) m = keep(rng) ? scale : 0.0;
  }
  n.value = Tensor(kernel::shape2(xv.rows(), xv.cols()));
  for (std::size_t i = 0; i < xv.size(); ++i) n.value[i] = xv[i] * n.mask[i];
  return g.push(std::move(n));
}

inline Var sum(Var x) {
  Graph& g = kernel::graph_of(x, "sum");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return g.push(Op::sum, {x}, Tensor::scalar(s));
}

inline Var mean(Var x) {
  Graph& g = kernel::graph_of(x, "mean");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return g.push(Op::mean, {x}, Tensor::scalar(s / static_cast<double>(x.value().size())));
}

/// Column sums: rows x cols -> 1 x cols.
inline Var sum_rows(Var x) {
  Graph& g = kernel::graph_of(x, "sum_rows");
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(kernel::shape2(1, c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  return g.push(Op::sum_rows, {x}, std::move(out));
}

inline Var mean_rows(Var x) {
  Graph& g = kernel::graph_of(x, "mean_rows");
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(kernel::shape2(1, c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return g.push(Op::mean_rows, {x}, std::move(out));
}

}  // namespace hcrnn::ad
