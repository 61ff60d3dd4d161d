#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "snapdyn/tensor.hpp"

namespace snapdyn {

class Tape;

// Lightweight handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatMul,
  kExp,
  kLog,
  kNeg,
  kSqrt,
  kSin,
  kRelu,
  kAddScalar,
  kMulScalar,
  kSumAll,
  kMeanAll,
  kMaxAll,
  kSumAxis,
  kLogSumExp,   // row/column logsumexp; backward is the softmax
  kBroadcast,
  kTranspose,
  kReshape,
  kTakeRows,
  kTakePerRow,
  kTransportLse,  // fused log-domain potential update for entropic OT
};

const char* op_name(Op op);

// Gradients of one scalar output with respect to every tape leaf.
// Leaves that the output does not depend on carry zero gradients.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> by_id) : by_id_(std::move(by_id)) {}

  const Tensor& at(Var v) const;
  bool has(Var v) const {
    return v.id >= 0 && static_cast<std::size_t>(v.id) < by_id_.size() &&
           by_id_[static_cast<std::size_t>(v.id)].numel() > 0;
  }

 private:
  std::vector<Tensor> by_id_;
};

// Append-only record of primitive operations.  Forward values are computed
// eagerly at record time; backward walks the record once in reverse.
class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1, c = -1;   // parent ids; always precede this node
    double attr = 0.0;            // scalar attribute (constants, epsilon)
    int iattr = 0;                // axis / orientation flag
    Tensor value;
    std::vector<std::size_t> idx;  // gather indices
    bool trainable = false;
  };

  // Leaf whose gradient is wanted.
  Var param(Tensor value);
  // Leaf treated as a constant (gradient still defined, just usually unused).
  Var constant(Tensor value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Reverse-mode sweep from a scalar output.  A tape can be consumed by
  // exactly one backward pass; re-record to differentiate again.
  Gradients backward(Var output);

  const std::vector<int>& leaf_ids() const { return leaf_ids_; }

  // --- recording primitives -------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var matmul(Var a, Var b);
  Var exp(Var a);
  Var log(Var a);
  Var neg(Var a);
  Var sqrt(Var a);
  Var sin(Var a);
  Var relu(Var a);
  Var add_scalar(Var a, double c);
  Var mul_scalar(Var a, double c);
  Var sum(Var a);
  Var mean(Var a);
  Var max_all(Var a);
  Var sum_axis(Var a, int axis);
  Var logsumexp(Var a, int axis);
  Var broadcast_to(Var a, std::vector<std::size_t> shape);
  Var transpose(Var a);
  Var reshape(Var a, std::vector<std::size_t> shape);
  Var take_rows(Var a, std::vector<std::size_t> rows);
  Var take_per_row(Var a, std::vector<std::size_t> cols);

  // r_i = -eps * log sum_j exp(log_w_j + (pot_j - C_ij) / eps).
  // With `transposed` the cost matrix is read as C^T (no copy is made).
  Var transport_lse(Var cost, Var pot, Var log_w, double eps,
                    bool transposed = false);

 private:
  Var push(Node node);
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int check_same_tape(Var v) const;

  std::vector<Node> nodes_;
  std::vector<int> leaf_ids_;
  bool consumed_ = false;
};

// Operator sugar; scalars are folded into attribute ops.
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator+(Var a, double c) { return a.tape->add_scalar(a, c); }
inline Var operator+(double c, Var a) { return a.tape->add_scalar(a, c); }
inline Var operator-(Var a, double c) { return a.tape->add_scalar(a, -c); }
inline Var operator-(double c, Var a) {
  return a.tape->add_scalar(a.tape->neg(a), c);
}
inline Var operator*(Var a, double c) { return a.tape->mul_scalar(a, c); }
inline Var operator*(double c, Var a) { return a.tape->mul_scalar(a, c); }
inline Var operator/(Var a, double c) { return a.tape->mul_scalar(a, 1.0 / c); }
inline Var operator-(Var a) { return a.tape->neg(a); }

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_coord = 0;
  bool pass = false;
};

// Builds the function once per evaluation point and compares reverse-mode
// gradients against central finite differences.  Relative error uses
// max(|analytic|, |numeric|, 1e-5) as denominator.
using TapeBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;
GradCheckReport grad_check(const TapeBuilder& build,
                           const std::vector<Tensor>& leaves, double step,
                           double tol);

}  // namespace snapdyn
