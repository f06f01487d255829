#include "flowpose/diffgraph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace flowpose::dg {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::Shape, "tensor data length " + std::to_string(data_.size()) + " does not match " +
                                      std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t(m.rows(), m.cols());
  t.map() = m;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw Error(ErrorKind::Contract, "item() on a non-scalar tensor");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

const Tensor& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------- tape

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Adjoint adjoint) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(adjoint));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Adjoint adjoint) {
  if (checked_ && !value.all_finite()) {
    throw Error(ErrorKind::NonFinite, "primitive produced NaN or Inf");
  }
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& v : inputs) {
      if (v.tape != this) throw Error(ErrorKind::Contract, "variable belongs to another tape");
      if (nodes_[v.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.adjoint = std::move(adjoint);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad_ready) return n.grad;
  return Tensor(n.value.rows(), n.value.cols());
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.grad_ready) {
    n.grad = Tensor(n.value.rows(), n.value.cols());
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::add_grad(std::uint32_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.grad_ready) {
    n.grad = g;
    n.grad_ready = true;
    return;
  }
  auto& dst = n.grad.vec();
  const auto& src = g.vec();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var output) {
  if (output.tape != this) throw Error(ErrorKind::Contract, "backward on a variable from another tape");
  if (value(output).size() != 1) throw Error(ErrorKind::Contract, "backward requires a scalar output");
  if (!record_) throw Error(ErrorKind::Contract, "backward on a tape that does not record gradients");
  for (auto& n : nodes_) {
    n.grad_ready = false;
  }
  add_grad(output.id, Tensor::scalar(1.0));
  for (std::int64_t id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad && n.grad_ready && n.adjoint) n.adjoint(*this, static_cast<std::uint32_t>(id));
  }
}

// ---------------------------------------------------------------- helpers

namespace {

struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  std::size_t ia(std::size_t r, std::size_t c) const { return (ar == 1 ? 0 : r) * ac + (ac == 1 ? 0 : c); }
  std::size_t ib(std::size_t r, std::size_t c) const { return (br == 1 ? 0 : r) * bc + (bc == 1 ? 0 : c); }
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw Error(ErrorKind::Shape, std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                                      std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                                      std::to_string(b.cols()));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols()), a.rows(), a.cols(), b.rows(), b.cols()};
}

// f(x, y) -> z; da(x, y, z) = dz/dx; db(x, y, z) = dz/dy
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast bc = broadcast(x, y, name);
  Tensor out(bc.rows, bc.cols);
  for (std::size_t r = 0; r < bc.rows; ++r) {
    for (std::size_t c = 0; c < bc.cols; ++c) out(r, c) = f(x[bc.ia(r, c)], y[bc.ib(r, c)]);
  }
  return t.record(std::move(out), {a, b}, [a, b, bc, da, db](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(b);
    const Tensor& z = tp.value(self);
    if (tp.requires_grad(a)) {
      Tensor& gx = tp.grad_buffer(a.id);
      for (std::size_t r = 0; r < bc.rows; ++r) {
        for (std::size_t c = 0; c < bc.cols; ++c) {
          const std::size_t i = bc.ia(r, c);
          gx[i] += g(r, c) * da(x[i], y[bc.ib(r, c)], z(r, c));
        }
      }
    }
    if (tp.requires_grad(b)) {
      Tensor& gy = tp.grad_buffer(b.id);
      for (std::size_t r = 0; r < bc.rows; ++r) {
        for (std::size_t c = 0; c < bc.cols; ++c) {
          const std::size_t i = bc.ib(r, c);
          gy[i] += g(r, c) * db(x[bc.ia(r, c)], y[i], z(r, c));
        }
      }
    }
  });
}

// f(x) -> y; df(x, y) = dy/dx
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(std::move(out), {a}, [a, df](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error(ErrorKind::Contract, "variables belong to different tapes");
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  require_same_tape(a, b);
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  for (double v : b.value().vec()) {
    if (v == 0.0) throw Error(ErrorKind::Domain, "division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Var atan2(Var y, Var x) {
  require_same_tape(y, x);
  return binary(
      y, x, "atan2", [](double a, double b) { return std::atan2(a, b); },
      [](double a, double b, double) {
        const double r2 = a * a + b * b;
        return r2 > 0 ? b / r2 : 0.0;
      },
      [](double a, double b, double) {
        const double r2 = a * a + b * b;
        return r2 > 0 ? -a / r2 : 0.0;
      });
}

Var neg(Var a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var tanh(Var a) {
  // exp-based form; libm tanh is several times slower and dominates conditioner cost
  auto f = [](double x) {
    if (std::abs(x) < 1e-3) return x * (1.0 - x * x / 3.0);
    const double t = std::exp(-2.0 * std::abs(x));
    return std::copysign((1.0 - t) / (1.0 + t), x);
  };
  return unary(a, f, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().vec()) {
    if (!(v > 0.0)) throw Error(ErrorKind::Domain, "log of a nonpositive value");
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sin(Var a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.rows()) {
    throw Error(ErrorKind::Shape, "matmul: inner dimensions " + std::to_string(x.cols()) + " and " +
                                      std::to_string(y.rows()) + " differ");
  }
  Tensor out(x.rows(), y.cols());
  out.map().noalias() = x.map() * y.map();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a.id).map().noalias() += g.map() * tp.value(b).map().transpose();
    if (tp.requires_grad(b)) tp.grad_buffer(b.id).map().noalias() += tp.value(a).map().transpose() * g.map();
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.vec()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& tp, std::uint32_t self) {
    const double g = tp.grad_ref(self)[0];
    for (double& v : tp.grad_buffer(a.id).vec()) v += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c);
    out[r] = s;
  }
  return a.tape->record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g[r];
    }
  });
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  Tensor out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] += x(r, c);
  }
  return a.tape->record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g[c];
    }
  });
}

Var softmax(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = -INFINITY;
    for (std::size_t c = 0; c < x.cols(); ++c) m = std::max(m, x(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += (out(r, c) = std::exp(x(r, c) - m));
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= s;
  }
  return a.tape->record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) inner += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - inner);
    }
  });
}

Var dot(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) throw Error(ErrorKind::Shape, "dot: operand shapes differ");
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * y(r, c);
    out[r] = s;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& gx = tp.grad_buffer(a.id);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) += g[r] * y(r, c);
    }
    if (tp.requires_grad(b)) {
      Tensor& gy = tp.grad_buffer(b.id);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) gy(r, c) += g[r] * x(r, c);
    }
  });
}

Var cross(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y) || x.cols() != 3) throw Error(ErrorKind::Shape, "cross: operands must both be r x 3");
  Tensor out(x.rows(), 3);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    out(r, 0) = x(r, 1) * y(r, 2) - x(r, 2) * y(r, 1);
    out(r, 1) = x(r, 2) * y(r, 0) - x(r, 0) * y(r, 2);
    out(r, 2) = x(r, 0) * y(r, 1) - x(r, 1) * y(r, 0);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(b);
    // d(x cross y) = dx cross y + x cross dy; adjoints: gx = y cross g, gy = g cross x
    if (tp.requires_grad(a)) {
      Tensor& gx = tp.grad_buffer(a.id);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        gx(r, 0) += y(r, 1) * g(r, 2) - y(r, 2) * g(r, 1);
        gx(r, 1) += y(r, 2) * g(r, 0) - y(r, 0) * g(r, 2);
        gx(r, 2) += y(r, 0) * g(r, 1) - y(r, 1) * g(r, 0);
      }
    }
    if (tp.requires_grad(b)) {
      Tensor& gy = tp.grad_buffer(b.id);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        gy(r, 0) += g(r, 1) * x(r, 2) - g(r, 2) * x(r, 1);
        gy(r, 1) += g(r, 2) * x(r, 0) - g(r, 0) * x(r, 2);
        gy(r, 2) += g(r, 0) * x(r, 1) - g(r, 1) * x(r, 0);
      }
    }
  });
}

Var l2norm(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * x(r, c);
    if (!(s > 0.0)) throw Error(ErrorKind::Domain, "l2norm of a zero row");
    out[r] = std::sqrt(s);
  }
  return a.tape->record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& n = tp.value(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) += g[r] * x(r, c) / n[r];
  });
}

// ---------------------------------------------------------------- structure

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::Shape, "concat of nothing");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw Error(ErrorKind::Shape, "concat_cols: row counts differ");
    if (p.tape != parts[0].tape) throw Error(ErrorKind::Contract, "variables belong to different tapes");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, off + c) = x(r, c);
    off += x.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [inputs](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t pc = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Tensor& gx = tp.grad_buffer(p.id);
        for (std::size_t r = 0; r < gx.rows(); ++r)
          for (std::size_t c = 0; c < pc; ++c) gx(r, c) += g(r, off + c);
      }
      off += pc;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::Shape, "concat of nothing");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error(ErrorKind::Shape, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& src = p.value().vec();
    std::copy(src.begin(), src.end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [inputs, cols](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t n = tp.value(p).size();
      if (tp.requires_grad(p)) {
        Tensor& gx = tp.grad_buffer(p.id);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[off * cols + i];
      }
      off += tp.value(p).rows();
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (begin >= end || end > x.cols()) throw Error(ErrorKind::Shape, "slice_cols out of range");
  const std::size_t w = end - begin;
  Tensor out(x.rows(), w);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = x(r, begin + c);
  return a.tape->record(std::move(out), {a}, [a, begin, w](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) gx(r, begin + c) += g(r, c);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (begin >= end || end > x.rows()) throw Error(ErrorKind::Shape, "slice_rows out of range");
  const std::size_t cols = x.cols();
  Tensor out(end - begin, cols);
  std::copy(x.vec().begin() + static_cast<std::ptrdiff_t>(begin * cols),
            x.vec().begin() + static_cast<std::ptrdiff_t>(end * cols), out.vec().begin());
  return a.tape->record(std::move(out), {a}, [a, begin, cols](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& x = a.value();
  if (rows * cols != x.size()) throw Error(ErrorKind::Shape, "reshape changes element count");
  Tensor out(rows, cols, x.vec());
  return a.tape->record(std::move(out), {a}, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(Var table, std::span<const std::uint32_t> index) {
  const Tensor& x = table.value();
  const std::size_t cols = x.cols();
  Tensor out(index.size(), cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) throw Error(ErrorKind::Shape, "gather_rows index out of range");
    for (std::size_t c = 0; c < cols; ++c) out(i, c) = x(index[i], c);
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return table.tape->record(std::move(out), {table}, [table, idx, cols](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& gx = tp.grad_buffer(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) gx(idx[i], c) += g(i, c);
  });
}

Var solve_spd(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rows() != A.cols() || B.rows() != A.rows() || B.cols() != 1) {
    throw Error(ErrorKind::Shape, "solve_spd expects n x n and n x 1");
  }
  auto llt = std::make_shared<Eigen::LLT<RowMatrix>>(RowMatrix(A.map()));
  if (llt->info() != Eigen::Success) throw Error(ErrorKind::NotSpd, "Cholesky factorization failed");
  Tensor x(B.rows(), 1);
  x.map() = llt->solve(RowMatrix(B.map()));
  return a.tape->record(std::move(x), {a, b}, [a, b, llt](Tape& tp, std::uint32_t self) {
    const Tensor& gx = tp.grad_ref(self);
    const RowMatrix g = llt->solve(RowMatrix(gx.map()));
    if (tp.requires_grad(b)) tp.grad_buffer(b.id).map() += g;
    if (tp.requires_grad(a)) tp.grad_buffer(a.id).map() -= g * tp.value(self).map().transpose();
  });
}

// ---------------------------------------------------------------- checking

GradCheckReport finite_diff_check(const ScalarFn& f, std::span<const Tensor> point, double step, double tol) {
  GradCheckReport rep;
  std::vector<Tensor> analytic;
  {
    Tape tape(true);
    std::vector<Var> leaves;
    for (const Tensor& p : point) leaves.push_back(tape.leaf(p));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const Var& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor>& pts) {
    Tape tape(false);
    std::vector<Var> leaves;
    for (const Tensor& p : pts) leaves.push_back(tape.leaf(p));
    return f(tape, leaves).item();
  };
  std::vector<Tensor> pts(point.begin(), point.end());
  for (std::size_t p = 0; p < pts.size(); ++p) {
    for (std::size_t i = 0; i < pts[p].size(); ++i) {
      const double x0 = pts[p][i];
      pts[p][i] = x0 + step;
      const double fp = eval(pts);
      pts[p][i] = x0 - step;
      const double fm = eval(pts);
      pts[p][i] = x0;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[p][i];
      const double abs_err = std::abs(an - fd);
      const double rel = abs_err / std::max({std::abs(an), std::abs(fd), 1e-3});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error || rep.checked == 0) {
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        if (rel >= rep.max_rel_error) {
          rep.worst_param = p;
          rep.worst_index = i;
        }
      }
      ++rep.checked;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace flowpose::dg
