#pragma once

// Minimal reverse-mode automatic differentiation over dense rank-2 tensors.
//
// A Tape records every primitive as a node holding its forward value and an
// adjoint closure. Tapes are rebuilt per evaluation; a tape is never shared
// between threads.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowpose/error.hpp"

namespace flowpose::dg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Dense row-major tensor of rank <= 2. Scalars are 1x1, vectors are n x 1 or 1 x n.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(n, 1, std::move(v));
  }
  static Tensor row(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor from_matrix(const RowMatrix& m);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  MatMap map() { return MatMap(data_.data(), rows_, cols_); }
  ConstMatMap map() const { return ConstMatMap(data_.data(), rows_, cols_); }

  bool all_finite() const;
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  // Adjoint closure: receives the tape and the output node's id. It reads the
  // output gradient and accumulates into input gradients via add_grad().
  using Adjoint = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);  // differentiable input

  // Records a node computed outside the built-in primitives.
  Var record(Tensor value, std::initializer_list<Var> inputs, Adjoint adjoint);
  Var record(Tensor value, std::span<const Var> inputs, Adjoint adjoint);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  // Gradient after backward(); zero tensor of matching shape when untouched.
  Tensor grad(Var v) const;
  const Tensor& grad_ref(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Accumulates g into the gradient of node id (no-op when it needs none).
  void add_grad(std::uint32_t id, const Tensor& g);
  Tensor& grad_buffer(std::uint32_t id);

  void backward(Var output);

  void set_checked(bool on) { checked_ = on; }
  bool checked() const { return checked_; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    Adjoint adjoint;
  };

  bool record_ = true;
  bool checked_ = true;
  std::vector<Node> nodes_;
};

// ---- elementwise (rank-2 broadcasting of 1x1, r x 1 and 1 x c operands) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var atan2(Var y, Var x);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);  // domain error for entries <= 0
Var sin(Var a);
Var cos(Var a);
Var square(Var a);
Var abs(Var a);  // subgradient 0 at 0

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, Var a) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }

// ---- linear algebra and reductions ----
Var matmul(Var a, Var b);
Var sum(Var a);        // 1x1
Var sum_rows(Var a);   // r x 1: sum over columns of each row
Var sum_cols(Var a);   // 1 x c: sum over rows of each column
Var mean(Var a);       // 1x1
Var softmax(Var a);    // row-wise
Var dot(Var a, Var b);     // row-wise, r x 1
Var cross(Var a, Var b);   // row-wise on r x 3
Var l2norm(Var a);         // row-wise, r x 1; domain error on a zero row

// ---- structure ----
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var gather_rows(Var table, std::span<const std::uint32_t> index);

// Solves A x = b for SPD A (n x n) and b (n x 1) by Cholesky. Throws NotSpd.
Var solve_spd(Var a, Var b);

// ---- finite-difference verification ----
struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

// f builds a scalar on a fresh tape from leaves holding the parameters.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares tape gradients with central differences. The relative error of
// one entry is |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-3).
GradCheckReport finite_diff_check(const ScalarFn& f, std::span<const Tensor> point, double step, double tol);

}  // namespace flowpose::dg
