#include "ncdpo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ncdpo/simd/kernels.hpp"

namespace ncdpo::ad {
namespace {

const simd::KernelTable& kern() { return simd::kernels(); }

Tape& common_tape(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

bool is_row_vector(const Tensor& row, std::size_t n) {
  return row.size() == n && row.rows() == 1;
}

Var unary(Var a, Tensor out, std::function<void(const Tensor& x, const Tensor& y,
                                                const Tensor& g, Tensor& gx)>
                                 rule) {
  Tape& tape = *a.tape();
  const std::size_t ida = a.id();
  const Var parents[] = {a};
  return tape.record(std::move(out), parents,
                     [ida, rule = std::move(rule)](Tape& t, const Tensor& g, const Tensor& y) {
                       if (!t.requires_grad(Var(&t, ida))) return;
                       rule(t.value(ida), y, g, t.grad_accumulator(ida));
                     });
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, record_});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) {
      if (p.tape() != this) throw std::invalid_argument("Tape::record: foreign parent");
      needs = needs || nodes_[p.id()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty() && !node.value.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::invalid_argument("backward: root is not on this tape");
  const Tensor& rv = nodes_[root.id()].value;
  if (rv.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_string(rv.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor{};
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Tensor(rv.shape(), 1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad, n.value);
  }
}

Tensor Tape::gradient(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------
// Elementwise binary

Var add(Var a, Var b) {
  Tape& tape = common_tape("add", a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out(a.shape());
  kern().add_scaled(out.size(), a.value().data().data(), 1.0, b.value().data().data(),
                    out.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    for (std::size_t id : {ia, ib}) {
      if (t.requires_grad(Var(&t, id))) {
        kern().axpy(g.size(), 1.0, g.data().data(), t.grad_accumulator(id).data().data());
      }
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = common_tape("sub", a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out(a.shape());
  kern().add_scaled(out.size(), a.value().data().data(), -1.0, b.value().data().data(),
                    out.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(Var(&t, ia))) {
      kern().axpy(g.size(), 1.0, g.data().data(), t.grad_accumulator(ia).data().data());
    }
    if (t.requires_grad(Var(&t, ib))) {
      kern().axpy(g.size(), -1.0, g.data().data(), t.grad_accumulator(ib).data().data());
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape("mul", a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor out(a.shape());
  kern().mul(out.size(), a.value().data().data(), b.value().data().data(), out.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(Var(&t, ia))) {
      kern().mul_acc(g.size(), g.data().data(), t.value(ib).data().data(),
                     t.grad_accumulator(ia).data().data());
    }
    if (t.requires_grad(Var(&t, ib))) {
      kern().mul_acc(g.size(), g.data().data(), t.value(ia).data().data(),
                     t.grad_accumulator(ib).data().data());
    }
  });
}

Var minimum(Var a, Var b) {
  Tape& tape = common_tape("minimum", a, b);
  require_same_shape("minimum", a.value(), b.value());
  Tensor out(a.shape());
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  // Ties route to the first operand.
  return tape.record(std::move(out), parents, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    const auto x = t.value(ia).data();
    const auto y = t.value(ib).data();
    const bool ga = t.requires_grad(Var(&t, ia));
    const bool gb = t.requires_grad(Var(&t, ib));
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] <= y[i]) {
        if (ga) t.grad_accumulator(ia)[i] += g[i];
      } else if (gb) {
        t.grad_accumulator(ib)[i] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar affine

Var scale(Var a, double c) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return unary(a, std::move(out), [c](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
    kern().axpy(g.size(), c, g.data().data(), gx.data().data());
  });
}

Var add_scalar(Var a, double c) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c;
  return unary(a, std::move(out), [](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
    kern().axpy(g.size(), 1.0, g.data().data(), gx.data().data());
  });
}

Var neg(Var a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& tape = common_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(av.shape()) + " x " +
                                shape_string(bv.shape()));
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out(Shape{m, n});
  kern().gemm_nn(m, n, k, av.data().data(), bv.data().data(), out.data().data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return tape.record(std::move(out), parents,
                     [ia, ib, m, n, k](Tape& t, const Tensor& g, const Tensor&) {
                       if (t.requires_grad(Var(&t, ia))) {
                         // dA[M,K] += G[M,N] * B[K,N]^T
                         kern().gemm_nt(m, k, n, g.data().data(), t.value(ib).data().data(),
                                        t.grad_accumulator(ia).data().data(), true);
                       }
                       if (t.requires_grad(Var(&t, ib))) {
                         // dB[K,N] += A[M,K]^T * G[M,N]
                         kern().gemm_tn(k, n, m, t.value(ia).data().data(), g.data().data(),
                                        t.grad_accumulator(ib).data().data(), true);
                       }
                     });
}

Var add_row(Var x, Var row) {
  Tape& tape = common_tape("add_row", x, row);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (xv.rank() != 2 || !is_row_vector(row.value(), cols)) {
    throw std::invalid_argument("add_row: shape mismatch " + shape_string(xv.shape()) + " + " +
                                shape_string(row.shape()));
  }
  Tensor out = xv;
  const double* r = row.value().data().data();
  for (std::size_t i = 0; i < rows; ++i) kern().axpy(cols, 1.0, r, out.data().data() + i * cols);
  const std::size_t ix = x.id(), ir = row.id();
  const Var parents[] = {x, row};
  return tape.record(std::move(out), parents,
                     [ix, ir, rows, cols](Tape& t, const Tensor& g, const Tensor&) {
                       if (t.requires_grad(Var(&t, ix))) {
                         kern().axpy(g.size(), 1.0, g.data().data(),
                                     t.grad_accumulator(ix).data().data());
                       }
                       if (t.requires_grad(Var(&t, ir))) {
                         double* gr = t.grad_accumulator(ir).data().data();
                         for (std::size_t i = 0; i < rows; ++i) {
                           kern().axpy(cols, 1.0, g.data().data() + i * cols, gr);
                         }
                       }
                     });
}

Var mul_row(Var x, Var row) {
  Tape& tape = common_tape("mul_row", x, row);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (xv.rank() != 2 || !is_row_vector(row.value(), cols)) {
    throw std::invalid_argument("mul_row: shape mismatch " + shape_string(xv.shape()) + " * " +
                                shape_string(row.shape()));
  }
  Tensor out(xv.shape());
  const double* r = row.value().data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    kern().mul(cols, xv.data().data() + i * cols, r, out.data().data() + i * cols);
  }
  const std::size_t ix = x.id(), ir = row.id();
  const Var parents[] = {x, row};
  return tape.record(std::move(out), parents,
                     [ix, ir, rows, cols](Tape& t, const Tensor& g, const Tensor&) {
                       const double* r = t.value(ir).data().data();
                       if (t.requires_grad(Var(&t, ix))) {
                         double* gx = t.grad_accumulator(ix).data().data();
                         for (std::size_t i = 0; i < rows; ++i) {
                           kern().mul_acc(cols, g.data().data() + i * cols, r, gx + i * cols);
                         }
                       }
                       if (t.requires_grad(Var(&t, ir))) {
                         double* gr = t.grad_accumulator(ir).data().data();
                         const double* xd = t.value(ix).data().data();
                         for (std::size_t i = 0; i < rows; ++i) {
                           kern().mul_acc(cols, g.data().data() + i * cols, xd + i * cols, gr);
                         }
                       }
                     });
}

Var mul_col(Var x, Var col) {
  Tape& tape = common_tape("mul_col", x, col);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (xv.rank() != 2 || col.value().size() != rows || col.value().cols() != 1) {
    throw std::invalid_argument("mul_col: shape mismatch " + shape_string(xv.shape()) + " * " +
                                shape_string(col.shape()));
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double c = col.value()[i];
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = xv.at(i, j) * c;
  }
  const std::size_t ix = x.id(), ic = col.id();
  const Var parents[] = {x, col};
  return tape.record(std::move(out), parents,
                     [ix, ic, rows, cols](Tape& t, const Tensor& g, const Tensor&) {
                       if (t.requires_grad(Var(&t, ix))) {
                         Tensor& gx = t.grad_accumulator(ix);
                         for (std::size_t i = 0; i < rows; ++i) {
                           kern().axpy(cols, t.value(ic)[i], g.data().data() + i * cols,
                                       gx.data().data() + i * cols);
                         }
                       }
                       if (t.requires_grad(Var(&t, ic))) {
                         Tensor& gc = t.grad_accumulator(ic);
                         for (std::size_t i = 0; i < rows; ++i) {
                           gc[i] += kern().dot(cols, g.data().data() + i * cols,
                                               t.value(ix).data().data() + i * cols);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

Var tanh(Var a) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return unary(a, std::move(out), [](const Tensor&, const Tensor& y, const Tensor& g, Tensor& gx) {
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

namespace {
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2): one exp instead of three.
namespace {
inline double mish_t(double x, double& dt) {
  if (x > 20.0) {
    dt = 0.0;
    return 1.0;
  }
  const double w = std::exp(x);
  const double n = w * (w + 2.0);
  const double d = n + 2.0;
  dt = 4.0 * w * (w + 1.0) / (d * d);
  return n / d;
}
}  // namespace

Var mish(Var a) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  double dt;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mish_t(x[i], dt);
  return unary(a, std::move(out), [](const Tensor& x, const Tensor&, const Tensor& g, Tensor& gx) {
    double dt;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = mish_t(x[i], dt);
      gx[i] += g[i] * (t + x[i] * dt);
    }
  });
}

Var exp(Var a) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return unary(a, std::move(out), [](const Tensor&, const Tensor& y, const Tensor& g, Tensor& gx) {
    kern().mul_acc(g.size(), g.data().data(), y.data().data(), gx.data().data());
  });
}

Var log(Var a) {
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(x[i]) + " at index " +
                              std::to_string(i) + " of shape " + shape_string(a.shape()));
    }
    out[i] = std::log(x[i]);
  }
  return unary(a, std::move(out), [](const Tensor& x, const Tensor&, const Tensor& g, Tensor& gx) {
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
  });
}

Var square(Var a) {
  Tensor out(a.shape());
  kern().mul(out.size(), a.value().data().data(), a.value().data().data(), out.data().data());
  return unary(a, std::move(out), [](const Tensor& x, const Tensor&, const Tensor& g, Tensor& gx) {
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * x[i] * g[i];
  });
}

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  // Gradient passes where lo <= x <= hi.
  return unary(a, std::move(out),
               [lo, hi](const Tensor& x, const Tensor&, const Tensor& g, Tensor& gx) {
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   if (x[i] >= lo && x[i] <= hi) gx[i] += g[i];
                 }
               });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  const auto x = a.value().data();
  double s = 0.0;
  for (double v : x) s += v;
  return unary(a, Tensor::scalar(s), [](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
    const double gv = g[0];
    for (double& v : gx.data()) v += gv;
  });
}

Var mean(Var a) {
  const auto x = a.value().data();
  if (x.empty()) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : x) s += v;
  const double n = static_cast<double>(x.size());
  return unary(a, Tensor::scalar(s / n),
               [n](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
                 const double gv = g[0] / n;
                 for (double& v : gx.data()) v += gv;
               });
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(Shape{rows, 1});
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += x.data()[i * cols + j];
    out[i] = s;
  }
  return unary(a, std::move(out),
               [rows, cols](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
                 for (std::size_t i = 0; i < rows; ++i) {
                   for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[i];
                 }
               });
}

Var softmax(Var x, double inv_temperature) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = xv.row_span(i);
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v * inv_temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out.at(i, j) = std::exp(row[j] * inv_temperature - mx);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) /= z;
  }
  const double c = inv_temperature;
  return unary(x, std::move(out),
               [rows, cols, c](const Tensor&, const Tensor& y, const Tensor& g, Tensor& gx) {
                 for (std::size_t i = 0; i < rows; ++i) {
                   double dotgy = 0.0;
                   for (std::size_t j = 0; j < cols; ++j) dotgy += g.at(i, j) * y.at(i, j);
                   for (std::size_t j = 0; j < cols; ++j) {
                     gx.at(i, j) += c * y.at(i, j) * (g.at(i, j) - dotgy);
                   }
                 }
               });
}

Var log_softmax(Var x, double inv_temperature) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = xv.row_span(i);
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v * inv_temperature);
    double z = 0.0;
    for (double v : row) z += std::exp(v * inv_temperature - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = row[j] * inv_temperature - lse;
  }
  const double c = inv_temperature;
  return unary(x, std::move(out),
               [rows, cols, c](const Tensor&, const Tensor& y, const Tensor& g, Tensor& gx) {
                 for (std::size_t i = 0; i < rows; ++i) {
                   double gsum = 0.0;
                   for (std::size_t j = 0; j < cols; ++j) gsum += g.at(i, j);
                   for (std::size_t j = 0; j < cols; ++j) {
                     gx.at(i, j) += c * (g.at(i, j) - std::exp(y.at(i, j)) * gsum);
                   }
                 }
               });
}

// ---------------------------------------------------------------------------
// Structural

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& tape = *parts[0].tape();
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &tape || p.value().rows() != rows) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_string(parts[0].shape()) +
                                  " vs " + shape_string(p.shape()));
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& v = parts[pi].value();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(v.data().data() + i * widths[pi], widths[pi],
                  out.data().data() + i * total + offset);
    }
    offset += widths[pi];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return tape.record(std::move(out), parts,
                     [ids, widths, rows, total](Tape& t, const Tensor& g, const Tensor&) {
                       std::size_t off = 0;
                       for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                         if (t.requires_grad(Var(&t, ids[pi]))) {
                           Tensor& gp = t.grad_accumulator(ids[pi]);
                           for (std::size_t i = 0; i < rows; ++i) {
                             kern().axpy(widths[pi], 1.0, g.data().data() + i * total + off,
                                         gp.data().data() + i * widths[pi]);
                           }
                         }
                         off += widths[pi];
                       }
                     });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (begin > end || end > cols) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") out of " + shape_string(xv.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out(Shape{rows, w});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(xv.data().data() + i * cols + begin, w, out.data().data() + i * w);
  }
  return unary(x, std::move(out),
               [rows, cols, begin, w](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
                 for (std::size_t i = 0; i < rows; ++i) {
                   kern().axpy(w, 1.0, g.data().data() + i * w,
                               gx.data().data() + i * cols + begin);
                 }
               });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return unary(x, std::move(out), [](const Tensor&, const Tensor&, const Tensor& g, Tensor& gx) {
    kern().axpy(g.size(), 1.0, g.data().data(), gx.data().data());
  });
}

std::vector<Var> leaves(Tape& tape, const std::vector<Tensor>& values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const Tensor& v : values) out.push_back(tape.leaf(v));
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

double finite_diff_check(const ScalarFn& loss, std::vector<Tensor> params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  auto evaluate = [&](const std::vector<Tensor>& ps) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& p : ps) vars.push_back(tape.leaf(p));
    const double v = loss(tape, vars).value().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: loss is not finite");
    return v;
  };

  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& p : params) vars.push_back(tape.leaf(p));
  const Var root = loss(tape, vars);
  if (!std::isfinite(root.value().item())) {
    throw std::domain_error("finite_diff_check: loss is not finite");
  }
  tape.backward(root);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = tape.gradient(vars[pi]);
    for (std::size_t i = 0; i < params[pi].size(); ++i) {
      const double saved = params[pi][i];
      params[pi][i] = saved + step;
      const double up = evaluate(params);
      params[pi][i] = saved - step;
      const double down = evaluate(params);
      params[pi][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& loss, const Tensor& theta,
                         double step) {
  return finite_diff_check(
      [&](Tape& t, std::span<const Var> ps) { return loss(t, ps[0]); },
      std::vector<Tensor>{theta}, step);
}

}  // namespace ncdpo::ad
