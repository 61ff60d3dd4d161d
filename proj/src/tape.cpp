#include "snapdyn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "snapdyn/math_util.hpp"

namespace snapdyn {

namespace {

[[noreturn]] void shape_fail(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("tape: shape mismatch in ") +
                              op_name(op) + ": " + a.shape_string() + " vs " +
                              b.shape_string());
}

[[noreturn]] void shape_fail(Op op, const Tensor& a, const std::string& why) {
  throw std::invalid_argument(std::string("tape: invalid shape in ") +
                              op_name(op) + ": " + a.shape_string() + " (" +
                              why + ")");
}

void require_matrix(Op op, const Tensor& t) {
  if (t.rank() != 2) shape_fail(op, t, "expected a rank-2 tensor");
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kMatMul: return "matmul";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kNeg: return "neg";
    case Op::kSqrt: return "sqrt";
    case Op::kSin: return "sin";
    case Op::kRelu: return "relu";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kSumAll: return "sum";
    case Op::kMeanAll: return "mean";
    case Op::kMaxAll: return "max";
    case Op::kSumAxis: return "sum_axis";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kBroadcast: return "broadcast";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kTakeRows: return "take_rows";
    case Op::kTakePerRow: return "take_per_row";
    case Op::kTransportLse: return "transport_lse";
  }
  return "?";
}

const Tensor& Gradients::at(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= by_id_.size())
    throw std::invalid_argument("gradients: unknown node");
  return by_id_[static_cast<std::size_t>(v.id)];
}

int Tape::check_same_tape(Var v) const {
  if (v.tape != this || v.id < 0 ||
      static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::invalid_argument("tape: operand does not live on this tape");
  return v.id;
}

Var Tape::push(Node node) {
  if (!node.value.all_finite())
    throw std::runtime_error(std::string("tape: non-finite value produced by ") +
                             op_name(node.op));
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.trainable = true;
  n.value = std::move(value);
  Var v = push(std::move(n));
  leaf_ids_.push_back(v.id);
  return v;
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  return nodes_[static_cast<std::size_t>(check_same_tape(v))].value;
}

// --- elementwise binaries -------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) shape_fail(Op::kAdd, va, vb);
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] + vb[i];
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) shape_fail(Op::kSub, va, vb);
  Node n;
  n.op = Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] - vb[i];
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) shape_fail(Op::kMul, va, vb);
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] * vb[i];
  return push(std::move(n));
}

Var Tape::div(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) shape_fail(Op::kDiv, va, vb);
  Node n;
  n.op = Op::kDiv;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] / vb[i];
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require_matrix(Op::kMatMul, va);
  require_matrix(Op::kMatMul, vb);
  if (va.cols() != vb.rows()) shape_fail(Op::kMatMul, va, vb);
  const std::size_t n = va.rows(), k = va.cols(), m = vb.cols();
  Node node;
  node.op = Op::kMatMul;
  node.a = a.id;
  node.b = b.id;
  node.value = Tensor({n, m});
  double* out = node.value.data();
  const double* pa = va.data();
  const double* pb = vb.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      const double* brow = pb + kk * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  return push(std::move(node));
}

// --- elementwise unaries ----------------------------------------------------

Var Tape::exp(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kExp;
  n.a = a.id;
  n.value = Tensor(va.shape());
  const double* in = va.data();
  double* out = n.value.data();
  for (std::size_t i = 0; i < va.numel(); ++i) out[i] = fexp(in[i]);
  return push(std::move(n));
}

Var Tape::log(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kLog;
  n.a = a.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = std::log(va[i]);
  return push(std::move(n));
}

Var Tape::neg(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kNeg;
  n.a = a.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = -va[i];
  return push(std::move(n));
}

Var Tape::sqrt(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kSqrt;
  n.a = a.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = std::sqrt(va[i]);
  return push(std::move(n));
}

Var Tape::sin(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kSin;
  n.a = a.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = std::sin(va[i]);
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kRelu;
  n.a = a.id;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i)
    n.value[i] = va[i] > 0.0 ? va[i] : 0.0;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kAddScalar;
  n.a = a.id;
  n.attr = c;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] + c;
  return push(std::move(n));
}

Var Tape::mul_scalar(Var a, double c) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kMulScalar;
  n.a = a.id;
  n.attr = c;
  n.value = Tensor(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] * c;
  return push(std::move(n));
}

// --- reductions ---------------------------------------------------------

Var Tape::sum(Var a) {
  const Tensor& va = value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
  Node n;
  n.op = Op::kSumAll;
  n.a = a.id;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Var Tape::mean(Var a) {
  const Tensor& va = value(a);
  if (va.numel() == 0) shape_fail(Op::kMeanAll, va, "empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
  Node n;
  n.op = Op::kMeanAll;
  n.a = a.id;
  n.value = Tensor::scalar(s / static_cast<double>(va.numel()));
  return push(std::move(n));
}

Var Tape::max_all(Var a) {
  const Tensor& va = value(a);
  if (va.numel() == 0) shape_fail(Op::kMaxAll, va, "empty tensor");
  double best = va[0];
  for (std::size_t i = 1; i < va.numel(); ++i) best = std::max(best, va[i]);
  Node n;
  n.op = Op::kMaxAll;
  n.a = a.id;
  n.value = Tensor::scalar(best);
  return push(std::move(n));
}

Var Tape::sum_axis(Var a, int axis) {
  const Tensor& va = value(a);
  require_matrix(Op::kSumAxis, va);
  if (axis != 0 && axis != 1) shape_fail(Op::kSumAxis, va, "axis must be 0 or 1");
  const std::size_t rows = va.rows(), cols = va.cols();
  Node n;
  n.op = Op::kSumAxis;
  n.a = a.id;
  n.iattr = axis;
  if (axis == 0) {
    n.value = Tensor({cols});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) n.value[j] += va.at(i, j);
  } else {
    n.value = Tensor({rows});
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += va.at(i, j);
      n.value[i] = s;
    }
  }
  return push(std::move(n));
}

Var Tape::logsumexp(Var a, int axis) {
  const Tensor& va = value(a);
  require_matrix(Op::kLogSumExp, va);
  if (axis != 0 && axis != 1)
    shape_fail(Op::kLogSumExp, va, "axis must be 0 or 1");
  const std::size_t rows = va.rows(), cols = va.cols();
  Node n;
  n.op = Op::kLogSumExp;
  n.a = a.id;
  n.iattr = axis;
  const std::size_t out_len = axis == 1 ? rows : cols;
  const std::size_t red_len = axis == 1 ? cols : rows;
  n.value = Tensor({out_len});
  for (std::size_t i = 0; i < out_len; ++i) {
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < red_len; ++j) {
      const double x = axis == 1 ? va.at(i, j) : va.at(j, i);
      mx = std::max(mx, x);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < red_len; ++j) {
      const double x = axis == 1 ? va.at(i, j) : va.at(j, i);
      s += fexp(x - mx);
    }
    n.value[i] = mx + std::log(s);
  }
  return push(std::move(n));
}

// --- structure ------------------------------------------------------------

Var Tape::broadcast_to(Var a, std::vector<std::size_t> shape) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kBroadcast;
  n.a = a.id;
  if (va.numel() == 1) {
    n.value = Tensor::full(shape, va[0]);
    return push(std::move(n));
  }
  if (shape.size() == 2) {
    const std::size_t rows = shape[0], cols = shape[1];
    if ((va.rank() == 1 && va.dim(0) == cols) ||
        (va.rank() == 2 && va.rows() == 1 && va.cols() == cols)) {
      // row vector repeated down the rows
      n.value = Tensor(std::move(shape));
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) n.value.at(i, j) = va[j];
      return push(std::move(n));
    }
    if (va.rank() == 2 && va.cols() == 1 && va.rows() == rows) {
      // column vector repeated across the columns
      n.value = Tensor(std::move(shape));
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) n.value.at(i, j) = va[i];
      return push(std::move(n));
    }
  }
  shape_fail(Op::kBroadcast, va, "unsupported broadcast target");
}

Var Tape::transpose(Var a) {
  const Tensor& va = value(a);
  require_matrix(Op::kTranspose, va);
  Node n;
  n.op = Op::kTranspose;
  n.a = a.id;
  n.value = Tensor({va.cols(), va.rows()});
  for (std::size_t i = 0; i < va.rows(); ++i)
    for (std::size_t j = 0; j < va.cols(); ++j)
      n.value.at(j, i) = va.at(i, j);
  return push(std::move(n));
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kReshape;
  n.a = a.id;
  n.value = va.reshaped(std::move(shape));
  return push(std::move(n));
}

Var Tape::take_rows(Var a, std::vector<std::size_t> rows) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kTakeRows;
  n.a = a.id;
  if (va.rank() == 1) {
    n.value = Tensor({rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= va.dim(0))
        shape_fail(Op::kTakeRows, va, "row index out of range");
      n.value[i] = va[rows[i]];
    }
  } else {
    require_matrix(Op::kTakeRows, va);
    const std::size_t cols = va.cols();
    n.value = Tensor({rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= va.rows())
        shape_fail(Op::kTakeRows, va, "row index out of range");
      for (std::size_t j = 0; j < cols; ++j)
        n.value.at(i, j) = va.at(rows[i], j);
    }
  }
  n.idx = std::move(rows);
  return push(std::move(n));
}

Var Tape::take_per_row(Var a, std::vector<std::size_t> cols) {
  const Tensor& va = value(a);
  require_matrix(Op::kTakePerRow, va);
  if (cols.size() != va.rows())
    shape_fail(Op::kTakePerRow, va, "need one column index per row");
  Node n;
  n.op = Op::kTakePerRow;
  n.a = a.id;
  n.value = Tensor({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= va.cols())
      shape_fail(Op::kTakePerRow, va, "column index out of range");
    n.value[i] = va.at(i, cols[i]);
  }
  n.idx = std::move(cols);
  return push(std::move(n));
}

Var Tape::transport_lse(Var cost, Var pot, Var log_w, double eps,
                        bool transposed) {
  const Tensor& vc = value(cost);
  const Tensor& vp = value(pot);
  const Tensor& vw = value(log_w);
  require_matrix(Op::kTransportLse, vc);
  const std::size_t out_len = transposed ? vc.cols() : vc.rows();
  const std::size_t red_len = transposed ? vc.rows() : vc.cols();
  if (vp.rank() != 1 || vp.dim(0) != red_len) shape_fail(Op::kTransportLse, vc, vp);
  if (vw.rank() != 1 || vw.dim(0) != red_len) shape_fail(Op::kTransportLse, vc, vw);
  if (!(eps > 0.0))
    throw std::invalid_argument("tape: transport_lse requires eps > 0");

  Node n;
  n.op = Op::kTransportLse;
  n.a = cost.id;
  n.b = pot.id;
  n.c = log_w.id;
  n.attr = eps;
  n.iattr = transposed ? 1 : 0;
  n.value = Tensor({out_len});

  const double inv_eps = 1.0 / eps;
  std::vector<double> q(red_len);
  for (std::size_t j = 0; j < red_len; ++j) q[j] = vw[j] + vp[j] * inv_eps;

  const double* c = vc.data();
  const std::size_t ld = vc.cols();
  std::vector<double> srow(red_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    if (!transposed) {
      const double* crow = c + i * ld;
      for (std::size_t j = 0; j < red_len; ++j) srow[j] = q[j] - crow[j] * inv_eps;
    } else {
      for (std::size_t j = 0; j < red_len; ++j)
        srow[j] = q[j] - c[j * ld + i] * inv_eps;
    }
    double mx = srow[0];
    for (std::size_t j = 1; j < red_len; ++j) mx = std::max(mx, srow[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < red_len; ++j) s += fexp(srow[j] - mx);
    n.value[i] = -eps * (mx + std::log(s));
  }
  return push(std::move(n));
}

// --- backward --------------------------------------------------------------

Gradients Tape::backward(Var output) {
  const int out_id = check_same_tape(output);
  if (consumed_)
    throw std::runtime_error("tape: already consumed by a backward pass");
  const Tensor& out_val = nodes_[static_cast<std::size_t>(out_id)].value;
  if (out_val.rank() != 0)
    throw std::invalid_argument("tape: backward requires a scalar output, got " +
                                out_val.shape_string());
  consumed_ = true;

  // Which nodes need a gradient at all (have a trainable ancestor)?
  std::vector<char> needs(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& nd = nodes_[i];
    if (nd.op == Op::kLeaf) {
      needs[i] = nd.trainable ? 1 : 0;
    } else {
      needs[i] = (nd.a >= 0 && needs[static_cast<std::size_t>(nd.a)]) ||
                 (nd.b >= 0 && needs[static_cast<std::size_t>(nd.b)]) ||
                 (nd.c >= 0 && needs[static_cast<std::size_t>(nd.c)]);
    }
  }

  std::vector<Tensor> grads(nodes_.size());
  auto grad_buf = [&](int id) -> Tensor& {
    Tensor& g = grads[static_cast<std::size_t>(id)];
    if (g.numel() == 0 && nodes_[static_cast<std::size_t>(id)].value.numel() > 0)
      g = Tensor(nodes_[static_cast<std::size_t>(id)].value.shape());
    return g;
  };

  // Zero gradients for every trainable leaf, even unreachable ones.
  for (int leaf : leaf_ids_) grad_buf(leaf);

  grad_buf(out_id)[0] = 1.0;

  for (int id = out_id; id >= 0; --id) {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (nd.op == Op::kLeaf) continue;
    if (!needs[static_cast<std::size_t>(id)]) continue;
    const Tensor& g = grads[static_cast<std::size_t>(id)];
    if (g.numel() == 0) continue;  // not on a path to the output

    auto want = [&](int pid) { return pid >= 0 && needs[static_cast<std::size_t>(pid)]; };

    switch (nd.op) {
      case Op::kAdd: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (want(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (want(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& va = node(nd.a).value;
        const Tensor& vb = node(nd.b).value;
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
        }
        if (want(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
        }
        break;
      }
      case Op::kDiv: {
        const Tensor& va = node(nd.a).value;
        const Tensor& vb = node(nd.b).value;
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / vb[i];
        }
        if (want(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < g.numel(); ++i)
            gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
        }
        break;
      }
      case Op::kMatMul: {
        const Tensor& va = node(nd.a).value;
        const Tensor& vb = node(nd.b).value;
        const std::size_t n = va.rows(), k = va.cols(), m = vb.cols();
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);  // g [n,m] * B^T [m,k]
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double gij = g.at(i, j);
              for (std::size_t kk = 0; kk < k; ++kk)
                ga.at(i, kk) += gij * vb.at(kk, j);
            }
        }
        if (want(nd.b)) {
          Tensor& gb = grad_buf(nd.b);  // A^T [k,n] * g [n,m]
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double aik = va.at(i, kk);
              for (std::size_t j = 0; j < m; ++j)
                gb.at(kk, j) += aik * g.at(i, j);
            }
        }
        break;
      }
      case Op::kExp: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * nd.value[i];
        }
        break;
      }
      case Op::kLog: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / va[i];
        }
        break;
      }
      case Op::kNeg: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] -= g[i];
        }
        break;
      }
      case Op::kSqrt: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i)
            if (nd.value[i] > 0.0) ga[i] += 0.5 * g[i] / nd.value[i];
        }
        break;
      }
      case Op::kSin: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i)
            ga[i] += g[i] * std::cos(va[i]);
        }
        break;
      }
      case Op::kRelu: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i)
            if (va[i] > 0.0) ga[i] += g[i];
        }
        break;
      }
      case Op::kAddScalar: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        break;
      }
      case Op::kMulScalar: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * nd.attr;
        }
        break;
      }
      case Op::kSumAll: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          const double gv = g[0];
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
        }
        break;
      }
      case Op::kMeanAll: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          const double gv = g[0] / static_cast<double>(ga.numel());
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
        }
        break;
      }
      case Op::kMaxAll: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          std::size_t best = 0;
          for (std::size_t i = 1; i < va.numel(); ++i)
            if (va[i] > va[best]) best = i;
          ga[best] += g[0];
        }
        break;
      }
      case Op::kSumAxis: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          const std::size_t rows = va.rows(), cols = va.cols();
          if (nd.iattr == 0) {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += g[j];
          } else {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += g[i];
          }
        }
        break;
      }
      case Op::kLogSumExp: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          const std::size_t rows = va.rows(), cols = va.cols();
          if (nd.iattr == 1) {
            for (std::size_t i = 0; i < rows; ++i) {
              const double gv = g[i], lse = nd.value[i];
              for (std::size_t j = 0; j < cols; ++j)
                ga.at(i, j) += gv * fexp(va.at(i, j) - lse);
            }
          } else {
            for (std::size_t j = 0; j < cols; ++j) {
              const double gv = g[j], lse = nd.value[j];
              for (std::size_t i = 0; i < rows; ++i)
                ga.at(i, j) += gv * fexp(va.at(i, j) - lse);
            }
          }
        }
        break;
      }
      case Op::kBroadcast: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          if (va.numel() == 1) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += g[i];
            ga[0] += s;
          } else if (nd.value.rank() == 2 && va.rank() <= 2) {
            const std::size_t rows = nd.value.rows(), cols = nd.value.cols();
            const bool row_vec = (va.rank() == 1) || va.rows() == 1;
            if (row_vec) {
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) ga[j] += g.at(i, j);
            } else {
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) ga[i] += g.at(i, j);
            }
          }
        }
        break;
      }
      case Op::kTranspose: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          const std::size_t rows = nd.value.rows(), cols = nd.value.cols();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) ga.at(j, i) += g.at(i, j);
        }
        break;
      }
      case Op::kReshape: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        break;
      }
      case Op::kTakeRows: {
        if (want(nd.a)) {
          const Tensor& va = node(nd.a).value;
          Tensor& ga = grad_buf(nd.a);
          if (va.rank() == 1) {
            for (std::size_t i = 0; i < nd.idx.size(); ++i)
              ga[nd.idx[i]] += g[i];
          } else {
            const std::size_t cols = va.cols();
            for (std::size_t i = 0; i < nd.idx.size(); ++i)
              for (std::size_t j = 0; j < cols; ++j)
                ga.at(nd.idx[i], j) += g.at(i, j);
          }
        }
        break;
      }
      case Op::kTakePerRow: {
        if (want(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < nd.idx.size(); ++i)
            ga.at(i, nd.idx[i]) += g[i];
        }
        break;
      }
      case Op::kTransportLse: {
        const Tensor& vc = node(nd.a).value;
        const Tensor& vp = node(nd.b).value;
        const Tensor& vw = node(nd.c).value;
        const bool transposed = nd.iattr != 0;
        const std::size_t out_len = nd.value.dim(0);
        const std::size_t red_len = vp.dim(0);
        const double eps = nd.attr, inv_eps = 1.0 / eps;

        const bool wc = want(nd.a), wp = want(nd.b), ww = want(nd.c);
        if (!wc && !wp && !ww) break;
        Tensor* gc = wc ? &grad_buf(nd.a) : nullptr;
        Tensor* gp = wp ? &grad_buf(nd.b) : nullptr;
        Tensor* gw = ww ? &grad_buf(nd.c) : nullptr;

        std::vector<double> q(red_len), prow(red_len);
        for (std::size_t j = 0; j < red_len; ++j)
          q[j] = vw[j] + vp[j] * inv_eps;
        const double* c = vc.data();
        const std::size_t ld = vc.cols();
        for (std::size_t i = 0; i < out_len; ++i) {
          const double gv = g[i];
          if (gv == 0.0) continue;
          const double lse = -nd.value[i] * inv_eps;
          if (!transposed) {
            const double* crow = c + i * ld;
            for (std::size_t j = 0; j < red_len; ++j)
              prow[j] = fexp(q[j] - crow[j] * inv_eps - lse);
            if (wc) {
              double* gcrow = gc->data() + i * ld;
              for (std::size_t j = 0; j < red_len; ++j)
                gcrow[j] += gv * prow[j];
            }
          } else {
            for (std::size_t j = 0; j < red_len; ++j)
              prow[j] = fexp(q[j] - c[j * ld + i] * inv_eps - lse);
            if (wc) {
              for (std::size_t j = 0; j < red_len; ++j)
                gc->data()[j * ld + i] += gv * prow[j];
            }
          }
          if (wp)
            for (std::size_t j = 0; j < red_len; ++j)
              (*gp)[j] -= gv * prow[j];
          if (ww)
            for (std::size_t j = 0; j < red_len; ++j)
              (*gw)[j] -= eps * gv * prow[j];
        }
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  return Gradients(std::move(grads));
}

GradCheckReport grad_check(const TapeBuilder& build,
                           const std::vector<Tensor>& leaves, double step,
                           double tol) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");

  auto evaluate = [&](const std::vector<Tensor>& pts) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(pts.size());
    for (const Tensor& t : pts) vars.push_back(tape.param(t));
    Var out = build(tape, vars);
    const double v = tape.value(out).value();
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: function returned non-finite value");
    return v;
  };

  // Analytic gradients from one recording.
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& t : leaves) vars.push_back(tape.param(t));
  Var out = build(tape, vars);
  if (!std::isfinite(tape.value(out).value()))
    throw std::runtime_error("grad_check: function returned non-finite value");
  Gradients grads = tape.backward(out);

  GradCheckReport report;
  std::vector<Tensor> pts = leaves;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& analytic = grads.at(vars[li]);
    for (std::size_t k = 0; k < leaves[li].numel(); ++k) {
      const double orig = pts[li][k];
      pts[li][k] = orig + step;
      const double f_plus = evaluate(pts);
      pts[li][k] = orig - step;
      const double f_minus = evaluate(pts);
      pts[li][k] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[k];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-5});
      const double err = std::fabs(a - numeric) / denom;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_leaf = li;
        report.worst_coord = k;
      }
    }
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace snapdyn
