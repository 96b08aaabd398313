#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Tape is rebuilt for every loss evaluation. Nodes are appended in
// evaluation order, so parents always precede children and backward() is a
// single reverse sweep. Gradient accumulators are allocated lazily and zeroed
// at the start of every backward(), which makes repeated sweeps idempotent.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ncdpo/tensor.hpp"

namespace ncdpo::ad {

class Tape;

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient flowing into the node (and the node's own value)
  // and accumulates into parents.
  using BackwardFn =
      std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

  // With record_gradients = false the tape only evaluates values.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool recording() const { return record_; }

  void backward(Var root);

  // d root / d v from the last backward(); exact zeros when v was not reached.
  Tensor gradient(Var v) const;

  // Accumulator for a node, allocated on first use. Backward closures only.
  Tensor& grad_accumulator(std::size_t id);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_ = true;
};

// Elementwise, same shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var minimum(Var a, Var b);

Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

// [M,K] x [K,N]
Var matmul(Var a, Var b);

// x [B,N] with a [1,N] row broadcast over rows.
Var add_row(Var x, Var row);
Var mul_row(Var x, Var row);
// x [B,N] scaled per row by col [B,1].
Var mul_col(Var x, Var col);

Var tanh(Var a);
Var mish(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);

// Reductions.
Var sum(Var a);        // -> scalar
Var mean(Var a);       // -> scalar
Var sum_cols(Var a);   // [B,N] -> [B,1]

// Row-wise softmax / log-softmax of x * inv_temperature.
Var softmax(Var x, double inv_temperature = 1.0);
Var log_softmax(Var x, double inv_temperature = 1.0);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);

// One leaf per tensor, in order.
std::vector<Var> leaves(Tape& tape, const std::vector<Tensor>& values);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator-(Var a) { return neg(a); }

// Central-difference gradient check. `loss` builds a scalar from the given
// parameter vars on a fresh tape. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|).
using ScalarFn = std::function<Var(Tape&, std::span<const Var> params)>;

double finite_diff_check(const ScalarFn& loss, std::vector<Tensor> params, double step);
double finite_diff_check(const std::function<Var(Tape&, Var)>& loss, const Tensor& theta,
                         double step);

}  // namespace ncdpo::ad
