#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dbl/matrix.hpp"

namespace dbl {

// Reverse-mode gradient engine over a fixed primitive set. A Graph is an
// append-only arena of nodes; inputs always precede their consumers, so the
// insertion order is a topological order. Leaves are named parameters (bound
// at evaluation time) and constants (baked in at build time). Graphs are
// immutable once built and safe to share across threads; evaluation state
// lives in a separate Tape.
using NodeId = int;

enum class Op {
  constant,
  parameter,
  matmul,       // optional transpose flags on either input
  add,
  sub,
  mul,          // elementwise
  square,       // elementwise x^2
  hinge,        // [x]+ = max(x, 0); subgradient at 0 is 0
  tanh_fn,
  exp_fn,
  row_softmax,  // softmax(temperature * row), max-subtracted
  row_l2norm,   // rows scaled to unit norm; zero rows stay zero
  row_sum,      // RxC -> Rx1
  col_sum,      // RxC -> 1xC
  row_mean,
  col_mean,
  affine,       // s0 * x + s1 elementwise, s0/s1 scalars
};

struct Node {
  Op op;
  NodeId a = -1, b = -1;
  bool trans_a = false, trans_b = false;
  double s0 = 0.0, s1 = 0.0;
  int rows = 0, cols = 0;
  std::string name;  // parameters only
  Matrix value;      // constants only
};

class Graph {
 public:
  NodeId constant(Matrix m) {
    if (!m.all_finite()) throw numeric_error("constant: non-finite entries");
    Node n;
    n.op = Op::constant;
    n.rows = m.rows();
    n.cols = m.cols();
    n.value = std::move(m);
    return push(std::move(n));
  }

  NodeId parameter(const std::string& name, int rows, int cols) {
    if (name.empty()) throw shape_error("parameter: empty name");
    for (const auto& n : nodes_)
      if (n.op == Op::parameter && n.name == name)
        throw shape_error("parameter: duplicate name '" + name + "'");
    Node n;
    n.op = Op::parameter;
    n.rows = rows;
    n.cols = cols;
    n.name = name;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
    const Node& na = node(a);
    const Node& nb = node(b);
    const int ar = trans_a ? na.cols : na.rows;
    const int ac = trans_a ? na.rows : na.cols;
    const int br = trans_b ? nb.cols : nb.rows;
    const int bc = trans_b ? nb.rows : nb.cols;
    if (ac != br)
      throw shape_error("node#" + std::to_string(nodes_.size()) + ":matmul inner dims " +
                        std::to_string(ac) + " vs " + std::to_string(br));
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.rows = ar;
    n.cols = bc;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }

  NodeId square(NodeId a) { return unary(Op::square, a); }
  NodeId hinge(NodeId a) { return unary(Op::hinge, a); }
  NodeId tanh(NodeId a) { return unary(Op::tanh_fn, a); }
  NodeId exp(NodeId a) { return unary(Op::exp_fn, a); }

  NodeId row_softmax(NodeId a, double temperature) {
    Node n = unary_node(Op::row_softmax, a);
    n.s0 = temperature;
    return push(std::move(n));
  }
  NodeId row_l2norm(NodeId a) { return unary(Op::row_l2norm, a); }

  NodeId row_sum(NodeId a) { return reduce(Op::row_sum, a, node(a).rows, 1); }
  NodeId col_sum(NodeId a) { return reduce(Op::col_sum, a, 1, node(a).cols); }
  NodeId row_mean(NodeId a) { return reduce(Op::row_mean, a, node(a).rows, 1); }
  NodeId col_mean(NodeId a) { return reduce(Op::col_mean, a, 1, node(a).cols); }

  NodeId affine(NodeId a, double scale, double shift) {
    Node n = unary_node(Op::affine, a);
    n.s0 = scale;
    n.s1 = shift;
    return push(std::move(n));
  }

  // Composites.
  NodeId sum_all(NodeId a) { return col_sum(row_sum(a)); }
  NodeId neg(NodeId a) { return affine(a, -1.0, 0.0); }

  const Node& node(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw shape_error("node id " + std::to_string(id) + " out of range");
    return nodes_[id];
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.op == Op::parameter) out.push_back(n.name);
    return out;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }
  Node unary_node(Op op, NodeId a) {
    const Node& na = node(a);
    Node n;
    n.op = op;
    n.a = a;
    n.rows = na.rows;
    n.cols = na.cols;
    return n;
  }
  NodeId unary(Op op, NodeId a) { return push(unary_node(op, a)); }
  NodeId binary(Op op, NodeId a, NodeId b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.rows != nb.rows || na.cols != nb.cols)
      throw shape_error("node#" + std::to_string(nodes_.size()) + ":" + op_name(op) +
                        " shape mismatch " + shape_str(na) + " vs " + shape_str(nb));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = na.cols;
    return push(std::move(n));
  }
  NodeId reduce(Op op, NodeId a, int rows, int cols) {
    Node n = unary_node(op, a);
    n.rows = rows;
    n.cols = cols;
    return push(std::move(n));
  }
  static std::string shape_str(const Node& n) {
    return std::to_string(n.rows) + "x" + std::to_string(n.cols);
  }
  static const char* op_name(Op op) {
    switch (op) {
      case Op::add: return "add";
      case Op::sub: return "sub";
      case Op::mul: return "mul";
      default: return "op";
    }
  }

  std::vector<Node> nodes_;
};

using Bindings = std::map<std::string, Matrix>;
using GradMap = std::map<std::string, Matrix>;

// Forward values for every node of one evaluation.
struct Tape {
  std::vector<Matrix> values;
};

namespace detail {

inline void check_finite(const Matrix& m, const Node& n, NodeId id) {
  if (!m.all_finite())
    throw numeric_error("node#" + std::to_string(id) +
                        (n.name.empty() ? "" : " (" + n.name + ")") +
                        ": non-finite value");
}

}  // namespace detail

inline Tape forward(const Graph& g, const Bindings& leaves) {
  Tape tape;
  tape.values.resize(g.size());
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    Matrix& out = tape.values[id];
    switch (n.op) {
      case Op::constant:
        out = n.value;
        break;
      case Op::parameter: {
        auto it = leaves.find(n.name);
        if (it == leaves.end())
          throw shape_error("unbound parameter '" + n.name + "'");
        if (it->second.rows() != n.rows || it->second.cols() != n.cols)
          throw shape_error("parameter '" + n.name + "' bound with wrong shape");
        out = it->second;
        detail::check_finite(out, n, id);
        break;
      }
      case Op::matmul:
        out = matmul(tape.values[n.a], tape.values[n.b], n.trans_a, n.trans_b);
        break;
      case Op::add: {
        out = tape.values[n.a];
        const Matrix& b = tape.values[n.b];
        for (size_t i = 0; i < out.size(); ++i) out.raw()[i] += b.raw()[i];
        break;
      }
      case Op::sub: {
        out = tape.values[n.a];
        const Matrix& b = tape.values[n.b];
        for (size_t i = 0; i < out.size(); ++i) out.raw()[i] -= b.raw()[i];
        break;
      }
      case Op::mul: {
        out = tape.values[n.a];
        const Matrix& b = tape.values[n.b];
        for (size_t i = 0; i < out.size(); ++i) out.raw()[i] *= b.raw()[i];
        break;
      }
      case Op::square: {
        out = tape.values[n.a];
        for (auto& v : out.raw()) v *= v;
        break;
      }
      case Op::hinge: {
        out = tape.values[n.a];
        for (auto& v : out.raw()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case Op::tanh_fn: {
        out = tape.values[n.a];
        for (auto& v : out.raw()) v = std::tanh(v);
        break;
      }
      case Op::exp_fn: {
        out = tape.values[n.a];
        for (auto& v : out.raw()) v = std::exp(v);
        break;
      }
      case Op::row_softmax: {
        const Matrix& x = tape.values[n.a];
        out = Matrix(x.rows(), x.cols());
        for (int i = 0; i < x.rows(); ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < x.cols(); ++j) mx = std::max(mx, n.s0 * x(i, j));
          double sum = 0.0;
          for (int j = 0; j < x.cols(); ++j) {
            out(i, j) = std::exp(n.s0 * x(i, j) - mx);
            sum += out(i, j);
          }
          for (int j = 0; j < x.cols(); ++j) out(i, j) /= sum;
        }
        break;
      }
      case Op::row_l2norm:
        out = normalize_rows(tape.values[n.a]);
        break;
      case Op::row_sum: {
        const Matrix& x = tape.values[n.a];
        out = Matrix(x.rows(), 1);
        for (int i = 0; i < x.rows(); ++i)
          for (int j = 0; j < x.cols(); ++j) out(i, 0) += x(i, j);
        break;
      }
      case Op::col_sum: {
        const Matrix& x = tape.values[n.a];
        out = Matrix(1, x.cols());
        for (int i = 0; i < x.rows(); ++i)
          for (int j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
        break;
      }
      case Op::row_mean: {
        const Matrix& x = tape.values[n.a];
        out = Matrix(x.rows(), 1);
        for (int i = 0; i < x.rows(); ++i) {
          for (int j = 0; j < x.cols(); ++j) out(i, 0) += x(i, j);
          out(i, 0) /= x.cols();
        }
        break;
      }
      case Op::col_mean: {
        const Matrix& x = tape.values[n.a];
        out = Matrix(1, x.cols());
        for (int i = 0; i < x.rows(); ++i)
          for (int j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
        for (int j = 0; j < x.cols(); ++j) out(0, j) /= x.rows();
        break;
      }
      case Op::affine: {
        out = tape.values[n.a];
        for (auto& v : out.raw()) v = n.s0 * v + n.s1;
        break;
      }
    }
    detail::check_finite(out, n, id);
  }
  return tape;
}

inline Matrix evaluate(const Graph& g, NodeId root, const Bindings& leaves) {
  Tape tape = forward(g, leaves);
  return tape.values[root];
}

inline double evaluate_scalar(const Graph& g, NodeId root, const Bindings& leaves) {
  Matrix m = evaluate(g, root, leaves);
  if (m.rows() != 1 || m.cols() != 1) throw shape_error("evaluate_scalar: root is not 1x1");
  return m(0, 0);
}

// Reverse accumulation of d(root)/d(parameter) for each requested parameter.
// The root must be scalar (1x1). Parameters never reached by the backward
// sweep get zero gradients of the right shape.
inline GradMap gradient(const Graph& g, NodeId root, const Tape& tape,
                        const std::vector<std::string>& wrt) {
  const Node& r = g.node(root);
  if (r.rows != 1 || r.cols != 1) throw shape_error("gradient: root is not scalar (1x1)");

  std::vector<Matrix> adj(g.size());
  std::vector<bool> live(g.size(), false);
  adj[root] = Matrix(1, 1, 1.0);
  live[root] = true;

  auto bump = [&](NodeId id, int rows, int cols) -> Matrix& {
    if (!live[id]) {
      adj[id] = Matrix(rows, cols);
      live[id] = true;
    }
    return adj[id];
  };

  for (NodeId id = g.size() - 1; id >= 0; --id) {
    if (!live[id]) continue;
    const Node& n = g.node(id);
    const Matrix& d = adj[id];
    switch (n.op) {
      case Op::constant:
      case Op::parameter:
        break;
      case Op::matmul: {
        const Matrix& av = tape.values[n.a];
        const Matrix& bv = tape.values[n.b];
        // d(A') = dC * B'^T, d(B') = A'^T * dC, undoing the transpose flags.
        Matrix da = n.trans_b ? matmul(d, bv) : matmul(d, bv, false, true);
        if (n.trans_a) da = transpose(da);
        Matrix db = n.trans_a ? matmul(av, d) : matmul(av, d, true, false);
        if (n.trans_b) db = transpose(db);
        Matrix& ga = bump(n.a, av.rows(), av.cols());
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += da.raw()[i];
        Matrix& gb = bump(n.b, bv.rows(), bv.cols());
        for (size_t i = 0; i < gb.size(); ++i) gb.raw()[i] += db.raw()[i];
        break;
      }
      case Op::add: {
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += d.raw()[i];
        Matrix& gb = bump(n.b, n.rows, n.cols);
        for (size_t i = 0; i < gb.size(); ++i) gb.raw()[i] += d.raw()[i];
        break;
      }
      case Op::sub: {
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += d.raw()[i];
        Matrix& gb = bump(n.b, n.rows, n.cols);
        for (size_t i = 0; i < gb.size(); ++i) gb.raw()[i] -= d.raw()[i];
        break;
      }
      case Op::mul: {
        const Matrix& av = tape.values[n.a];
        const Matrix& bv = tape.values[n.b];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += d.raw()[i] * bv.raw()[i];
        Matrix& gb = bump(n.b, n.rows, n.cols);
        for (size_t i = 0; i < gb.size(); ++i) gb.raw()[i] += d.raw()[i] * av.raw()[i];
        break;
      }
      case Op::square: {
        const Matrix& av = tape.values[n.a];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += 2.0 * av.raw()[i] * d.raw()[i];
        break;
      }
      case Op::hinge: {
        const Matrix& av = tape.values[n.a];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i)
          if (av.raw()[i] > 0.0) ga.raw()[i] += d.raw()[i];
        break;
      }
      case Op::tanh_fn: {
        const Matrix& y = tape.values[id];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i)
          ga.raw()[i] += (1.0 - y.raw()[i] * y.raw()[i]) * d.raw()[i];
        break;
      }
      case Op::exp_fn: {
        const Matrix& y = tape.values[id];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += y.raw()[i] * d.raw()[i];
        break;
      }
      case Op::row_softmax: {
        const Matrix& y = tape.values[id];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (int i = 0; i < n.rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < n.cols; ++j) dot += d(i, j) * y(i, j);
          for (int j = 0; j < n.cols; ++j)
            ga(i, j) += n.s0 * y(i, j) * (d(i, j) - dot);
        }
        break;
      }
      case Op::row_l2norm: {
        const Matrix& x = tape.values[n.a];
        const Matrix& y = tape.values[id];
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (int i = 0; i < n.rows; ++i) {
          const double norm = row_norm(x, i);
          if (norm == 0.0) continue;  // zero rows: gradient convention 0
          double dot = 0.0;
          for (int j = 0; j < n.cols; ++j) dot += d(i, j) * y(i, j);
          for (int j = 0; j < n.cols; ++j) ga(i, j) += (d(i, j) - y(i, j) * dot) / norm;
        }
        break;
      }
      case Op::row_sum: {
        const Node& src = g.node(n.a);
        Matrix& ga = bump(n.a, src.rows, src.cols);
        for (int i = 0; i < src.rows; ++i)
          for (int j = 0; j < src.cols; ++j) ga(i, j) += d(i, 0);
        break;
      }
      case Op::col_sum: {
        const Node& src = g.node(n.a);
        Matrix& ga = bump(n.a, src.rows, src.cols);
        for (int i = 0; i < src.rows; ++i)
          for (int j = 0; j < src.cols; ++j) ga(i, j) += d(0, j);
        break;
      }
      case Op::row_mean: {
        const Node& src = g.node(n.a);
        Matrix& ga = bump(n.a, src.rows, src.cols);
        for (int i = 0; i < src.rows; ++i)
          for (int j = 0; j < src.cols; ++j) ga(i, j) += d(i, 0) / src.cols;
        break;
      }
      case Op::col_mean: {
        const Node& src = g.node(n.a);
        Matrix& ga = bump(n.a, src.rows, src.cols);
        for (int i = 0; i < src.rows; ++i)
          for (int j = 0; j < src.cols; ++j) ga(i, j) += d(0, j) / src.rows;
        break;
      }
      case Op::affine: {
        Matrix& ga = bump(n.a, n.rows, n.cols);
        for (size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += n.s0 * d.raw()[i];
        break;
      }
    }
  }

  GradMap out;
  for (const auto& name : wrt) {
    NodeId pid = -1;
    for (NodeId id = 0; id < g.size(); ++id)
      if (g.node(id).op == Op::parameter && g.node(id).name == name) {
        pid = id;
        break;
      }
    if (pid < 0) throw shape_error("gradient: unknown parameter '" + name + "'");
    out[name] = live[pid] ? adj[pid] : Matrix(g.node(pid).rows, g.node(pid).cols);
  }
  return out;
}

inline GradMap gradient(const Graph& g, NodeId root, const Bindings& leaves,
                        const std::vector<std::string>& wrt) {
  Tape tape = forward(g, leaves);
  return gradient(g, root, tape, wrt);
}

// Central finite differences against the reverse-mode gradient. Returns the
// max entrywise relative error with denominator max(|a|, |b|, 1e-8).
inline double finite_diff_check(const Graph& g, NodeId root, const Bindings& leaves,
                                const std::vector<std::string>& wrt, double step) {
  if (step <= 0.0) throw shape_error("finite_diff_check: step must be positive");
  GradMap analytic = gradient(g, root, leaves, wrt);
  Bindings work = leaves;
  double worst = 0.0;
  for (const auto& name : wrt) {
    Matrix& p = work.at(name);
    const Matrix& ga = analytic.at(name);
    for (size_t i = 0; i < p.size(); ++i) {
      const double keep = p.raw()[i];
      p.raw()[i] = keep + step;
      const double up = evaluate_scalar(g, root, work);
      p.raw()[i] = keep - step;
      const double dn = evaluate_scalar(g, root, work);
      p.raw()[i] = keep;
      const double fd = (up - dn) / (2.0 * step);
      const double a = ga.raw()[i];
      const double rel = std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Smallest |x| over all hinge inputs of one evaluation; +inf when the graph
// has no hinges. Used to certify a point as kink-free before gradient checks.
inline double min_hinge_gap(const Graph& g, const Tape& tape) {
  double gap = std::numeric_limits<double>::infinity();
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.op != Op::hinge) continue;
    for (double v : tape.values[n.a].raw()) gap = std::min(gap, std::abs(v));
  }
  return gap;
}

}  // namespace dbl
