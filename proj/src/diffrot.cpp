#include "flowpose/diffrot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "flowpose/so3dist.hpp"

namespace flowpose {

using dg::Tape;
using dg::Tensor;
using dg::Var;

Mat3 row_to_mat3(const Tensor& t, std::size_t row) {
  Mat3 m;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) m(r, c) = t(row, static_cast<std::size_t>(c * 3 + r));
  return m;
}

void mat3_to_row(const Mat3& m, Tensor& t, std::size_t row) {
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) t(row, static_cast<std::size_t>(c * 3 + r)) = m(r, c);
}

Tensor rotations_to_tensor(std::span<const Rotation> rs) {
  Tensor t(rs.size(), 9);
  for (std::size_t i = 0; i < rs.size(); ++i) mat3_to_row(rs[i].matrix(), t, i);
  return t;
}

namespace {

void require_cols(Var v, std::size_t cols, const char* what) {
  if (v.cols() != cols) throw Error(ErrorKind::Shape, std::string(what) + ": expected " + std::to_string(cols) + " columns");
}

}  // namespace

Var orthogonalize_rows(Var m) {
  require_cols(m, 9, "orthogonalize_rows");
  const Tensor& x = m.value();
  const std::size_t n = x.rows();
  Tensor out(n, 9);
  // per row: U' (with det fix folded in), signed singular values, V
  auto cache = std::make_shared<std::vector<std::array<double, 21>>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat3 a = row_to_mat3(x, i);
    if (!a.allFinite()) throw Error(ErrorKind::DegenerateProjection, "non-finite 9D output");
    const Svd3 d = svd3(a);
    if (!(d.s[2] > 1e-9)) throw Error(ErrorKind::DegenerateProjection, "rank-deficient 9D output");
    Mat3 u = d.u;
    Vec3 sigma = d.s;
    if ((d.u * d.v.transpose()).determinant() < 0) {
      u.col(2) = -u.col(2);
      sigma[2] = -sigma[2];
    }
    mat3_to_row(u * d.v.transpose(), out, i);
    auto& c = (*cache)[i];
    for (int k = 0; k < 9; ++k) c[k] = u(k % 3, k / 3);
    for (int k = 0; k < 9; ++k) c[9 + k] = d.v(k % 3, k / 3);
    for (int k = 0; k < 3; ++k) c[18 + k] = sigma[k];
  }
  return m.tape->record(std::move(out), {m}, [m, cache](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& r = tp.value(self);
    Tensor& gm = tp.grad_buffer(m.id);
    for (std::size_t i = 0; i < r.rows(); ++i) {
      const auto& c = (*cache)[i];
      Mat3 u, v;
      for (int k = 0; k < 9; ++k) {
        u(k % 3, k / 3) = c[k];
        v(k % 3, k / 3) = c[9 + k];
      }
      const Mat3 R = row_to_mat3(r, i);
      const Mat3 G = row_to_mat3(g, i);
      const Mat3 H = v.transpose() * R.transpose() * G * v;
      Mat3 K = Mat3::Zero();
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          if (a == b) continue;
          const double den = c[18 + a] + c[18 + b];
          K(a, b) = std::abs(den) > 1e-12 ? (H(a, b) - H(b, a)) / den : 0.0;
        }
      }
      const Mat3 dM = u * K * v.transpose();
      for (int col = 0; col < 3; ++col)
        for (int row = 0; row < 3; ++row) gm(i, col * 3 + row) += dM(row, col);
    }
  });
}

Var rotmul_rows(Var a, Var b) {
  require_cols(a, 9, "rotmul_rows");
  require_cols(b, 9, "rotmul_rows");
  if (a.rows() != b.rows()) throw Error(ErrorKind::Shape, "rotmul_rows: row counts differ");
  Tensor out(a.rows(), 9);
  for (std::size_t i = 0; i < a.rows(); ++i) mat3_to_row(row_to_mat3(a.value(), i) * row_to_mat3(b.value(), i), out, i);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const bool ga = tp.requires_grad(a), gb = tp.requires_grad(b);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const Mat3 G = row_to_mat3(g, i);
      if (ga) {
        const Mat3 d = G * row_to_mat3(tp.value(b), i).transpose();
        Tensor& gx = tp.grad_buffer(a.id);
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) gx(i, c * 3 + r) += d(r, c);
      }
      if (gb) {
        const Mat3 d = row_to_mat3(tp.value(a), i).transpose() * G;
        Tensor& gy = tp.grad_buffer(b.id);
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) gy(i, c * 3 + r) += d(r, c);
      }
    }
  });
}

Var rotmul_tn_rows(Var a, Var b) {
  require_cols(a, 9, "rotmul_tn_rows");
  require_cols(b, 9, "rotmul_tn_rows");
  if (a.rows() != b.rows()) throw Error(ErrorKind::Shape, "rotmul_tn_rows: row counts differ");
  Tensor out(a.rows(), 9);
  for (std::size_t i = 0; i < a.rows(); ++i)
    mat3_to_row(row_to_mat3(a.value(), i).transpose() * row_to_mat3(b.value(), i), out, i);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const bool ga = tp.requires_grad(a), gb = tp.requires_grad(b);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const Mat3 G = row_to_mat3(g, i);
      if (ga) {
        // C = A^T B: dA = B G^T
        const Mat3 d = row_to_mat3(tp.value(b), i) * G.transpose();
        Tensor& gx = tp.grad_buffer(a.id);
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) gx(i, c * 3 + r) += d(r, c);
      }
      if (gb) {
        const Mat3 d = row_to_mat3(tp.value(a), i) * G;
        Tensor& gy = tp.grad_buffer(b.id);
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) gy(i, c * 3 + r) += d(r, c);
      }
    }
  });
}

Var rotvec_rows(Var r, Var v) {
  require_cols(r, 9, "rotvec_rows");
  require_cols(v, 3, "rotvec_rows");
  if (r.rows() != v.rows()) throw Error(ErrorKind::Shape, "rotvec_rows: row counts differ");
  const Tensor& R = r.value();
  const Tensor& x = v.value();
  Tensor out(x.rows(), 3);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (int row = 0; row < 3; ++row) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += R(i, c * 3 + row) * x(i, c);
      out(i, row) = s;
    }
  }
  return r.tape->record(std::move(out), {r, v}, [r, v](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& R = tp.value(r);
    const Tensor& x = tp.value(v);
    if (tp.requires_grad(r)) {
      Tensor& gr = tp.grad_buffer(r.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (int c = 0; c < 3; ++c)
          for (int row = 0; row < 3; ++row) gr(i, c * 3 + row) += g(i, row) * x(i, c);
    }
    if (tp.requires_grad(v)) {
      Tensor& gv = tp.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (int c = 0; c < 3; ++c) {
          double s = 0.0;
          for (int row = 0; row < 3; ++row) s += R(i, c * 3 + row) * g(i, row);
          gv(i, c) += s;
        }
    }
  });
}

Var constrain_omega_rows(Var raw, std::size_t k, double margin) {
  require_cols(raw, 3 * k, "constrain_omega_rows");
  const Tensor& x = raw.value();
  const double keep = 1.0 - margin;
  Tensor out(x.rows(), 3 * k);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double a = x(i, j), b = x(i, k + j), c = x(i, 2 * k + j);
      const double n = std::sqrt(a * a + b * b + c * c);
      const double s = n < 1e-4 ? keep * (1.0 - n * n / 3.0) : keep * std::tanh(n) / n;
      out(i, j) = s * a;
      out(i, k + j) = s * b;
      out(i, 2 * k + j) = s * c;
    }
  }
  return raw.tape->record(std::move(out), {raw}, [raw, k, keep](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(raw);
    Tensor& gx = tp.grad_buffer(raw.id);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double a = x(i, j), b = x(i, k + j), c = x(i, 2 * k + j);
        const double n2 = a * a + b * b + c * c;
        const double n = std::sqrt(n2);
        double s, ds_over_n;
        if (n < 1e-3) {
          s = keep * (1.0 - n2 / 3.0);
          ds_over_n = keep * (-2.0 / 3.0 + 8.0 * n2 / 15.0);
        } else {
          const double th = std::tanh(n);
          s = keep * th / n;
          ds_over_n = keep * (n * (1.0 - th * th) - th) / (n2 * n);
        }
        const double ga = g(i, j), gb = g(i, k + j), gc = g(i, 2 * k + j);
        const double proj = ds_over_n * (a * ga + b * gb + c * gc);
        gx(i, j) += s * ga + proj * a;
        gx(i, k + j) += s * gb + proj * b;
        gx(i, 2 * k + j) += s * gc + proj * c;
      }
    }
  });
}

Var pig_logpdf_rows(Var rotations, const Rotation& mode, double kappa) {
  require_cols(rotations, 9, "pig_logpdf_rows");
  Tensor mode_row(1, 9);
  mat3_to_row(mode.matrix(), mode_row, 0);
  const Tensor& x = rotations.value();
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double tr = 0.0;
    for (std::size_t c = 0; c < 9; ++c) tr += mode_row[c] * x(i, c);
    out[i] = pig_logpdf_cos2(kappa, 0.25 * (1.0 + tr), 0.25 * (3.0 - tr));
  }
  return rotations.tape->record(std::move(out), {rotations}, [rotations, mode_row, kappa](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(rotations);
    Tensor& gx = tp.grad_buffer(rotations.id);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double tr = 0.0;
      for (std::size_t c = 0; c < 9; ++c) tr += mode_row[c] * x(i, c);
      const double d = 0.25 * pig_dlogpdf_dcos2(kappa, 0.25 * (1.0 + tr));
      for (std::size_t c = 0; c < 9; ++c) gx(i, c) += g[i] * d * mode_row[c];
    }
  });
}

Var geodesic_sq_rows(Var a, Var b) {
  require_cols(a, 9, "geodesic_sq_rows");
  require_cols(b, 9, "geodesic_sq_rows");
  if (a.rows() != b.rows()) throw Error(ErrorKind::Shape, "geodesic_sq_rows: row counts differ");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double tr = 0.0;
    for (std::size_t c = 0; c < 9; ++c) tr += x(i, c) * y(i, c);
    const double th = std::acos(std::clamp(0.5 * (tr - 1.0), -1.0, 1.0));
    out[i] = th * th;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(b);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double tr = 0.0;
      for (std::size_t c = 0; c < 9; ++c) tr += x(i, c) * y(i, c);
      const double th = std::acos(std::clamp(0.5 * (tr - 1.0), -1.0, 1.0));
      const double st = std::sin(th);
      // d(theta^2)/d(trace) = -theta / sin(theta), -1 at theta = 0
      double d = th < 1e-6 ? -1.0 : -th / std::max(st, 1e-6);
      d *= g[i];
      if (tp.requires_grad(a)) {
        Tensor& gx = tp.grad_buffer(a.id);
        for (std::size_t c = 0; c < 9; ++c) gx(i, c) += d * y(i, c);
      }
      if (tp.requires_grad(b)) {
        Tensor& gy = tp.grad_buffer(b.id);
        for (std::size_t c = 0; c < 9; ++c) gy(i, c) += d * x(i, c);
      }
    }
  });
}

}  // namespace flowpose
