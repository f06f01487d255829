#include "flowpose/rot3.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace flowpose {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config error";
    case ErrorKind::Load: return "load error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::InvalidRotation: return "invalid rotation";
    case ErrorKind::InvalidFrame: return "invalid frame";
    case ErrorKind::InvalidRig: return "invalid rig";
    case ErrorKind::Quota: return "quota error";
    case ErrorKind::Underdetermined: return "underdetermined system";
    case ErrorKind::BehindCamera: return "behind camera";
    case ErrorKind::NearCutLocus: return "near cut locus";
    case ErrorKind::DegenerateProjection: return "degenerate projection";
    case ErrorKind::DegenerateMean: return "degenerate mean";
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::NonFinite: return "non-finite value";
    case ErrorKind::NotSpd: return "matrix not SPD";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::SolverFailure: return "solver failure";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Alignment: return "alignment error";
    case ErrorKind::TrainingAborted: return "training aborted";
  }
  return "error";
}

bool is_numerical(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NearCutLocus:
    case ErrorKind::DegenerateProjection:
    case ErrorKind::DegenerateMean:
    case ErrorKind::Domain:
    case ErrorKind::NonFinite:
    case ErrorKind::NotSpd:
    case ErrorKind::NonConvergence:
    case ErrorKind::SolverFailure:
    case ErrorKind::Divergence:
    case ErrorKind::Alignment:
    case ErrorKind::TrainingAborted:
      return true;
    default:
      return false;
  }
}

Rotation Rotation::from_quaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 1e-300) || !std::isfinite(n)) {
    throw Error(ErrorKind::InvalidRotation, "quaternion has zero or non-finite norm");
  }
  Rotation r;
  const double s = (w < 0.0 ? -1.0 : 1.0) / n;
  r.q_ = Vec4(w * s, x * s, y * s, z * s);
  return r;
}

Rotation Rotation::from_matrix(const Mat3& m) {
  if (!m.allFinite()) throw Error(ErrorKind::InvalidRotation, "matrix has non-finite entries");
  const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = m.determinant();
  if (ortho > 1e-6 || std::abs(det - 1.0) > 1e-6) {
    throw Error(ErrorKind::InvalidRotation, "matrix is not a proper rotation (orthogonality error " +
                                                std::to_string(ortho) + ", det " + std::to_string(det) + ")");
  }
  // Shepperd's method: pick the largest of (trace, diagonal) for stability.
  const double tr = m.trace();
  double w, x, y, z;
  if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    w = 0.25 * s;
    x = (m(2, 1) - m(1, 2)) / s;
    y = (m(0, 2) - m(2, 0)) / s;
    z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2));
    w = (m(2, 1) - m(1, 2)) / s;
    x = 0.25 * s;
    y = (m(0, 1) + m(1, 0)) / s;
    z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2));
    w = (m(0, 2) - m(2, 0)) / s;
    x = (m(0, 1) + m(1, 0)) / s;
    y = 0.25 * s;
    z = (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = 2.0 * std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1));
    w = (m(1, 0) - m(0, 1)) / s;
    x = (m(0, 2) + m(2, 0)) / s;
    y = (m(1, 2) + m(2, 1)) / s;
    z = 0.25 * s;
  }
  return from_quaternion(w, x, y, z);
}

Mat3 Rotation::matrix() const {
  const double w = q_[0], x = q_[1], y = q_[2], z = q_[3];
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return m;
}

Rotation Rotation::operator*(const Rotation& rhs) const {
  const double w1 = q_[0], x1 = q_[1], y1 = q_[2], z1 = q_[3];
  const double w2 = rhs.q_[0], x2 = rhs.q_[1], y2 = rhs.q_[2], z2 = rhs.q_[3];
  return from_quaternion(w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                         w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                         w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                         w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2);
}

double Rotation::angle() const {
  return 2.0 * std::atan2(q_.tail<3>().norm(), q_[0]);
}

Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(),
       v.z(), 0, -v.x(),
       -v.y(), v.x(), 0;
  return m;
}

Rotation axis_angle_exp(const Vec3& v) {
  const double theta = v.norm();
  const double half = 0.5 * theta;
  // sin(theta/2)/theta, with its Taylor series near zero
  const double k = theta < 1e-8 ? 0.5 - theta * theta / 48.0 : std::sin(half) / theta;
  return Rotation::from_quaternion(std::cos(half), k * v.x(), k * v.y(), k * v.z());
}

Vec3 axis_angle_log(const Rotation& r) {
  const Vec3 vec = r.quat().tail<3>();
  const double n = vec.norm();
  const double theta = 2.0 * std::atan2(n, r.w());
  if (theta >= std::numbers::pi - 1e-6) {
    throw Error(ErrorKind::NearCutLocus, "rotation angle " + std::to_string(theta) + " too close to pi");
  }
  const double scale = n > 1e-12 ? theta / n : 2.0 / r.w();
  return scale * vec;
}

double geodesic_distance(const Rotation& a, const Rotation& b) {
  const Vec4& p = a.quat();
  const Vec4& q = b.quat();
  // relative rotation a^-1 b
  const double w = p[0] * q[0] + p[1] * q[1] + p[2] * q[2] + p[3] * q[3];
  const Vec3 pv = p.tail<3>(), qv = q.tail<3>();
  const Vec3 v = p[0] * qv - q[0] * pv - pv.cross(qv);
  return 2.0 * std::atan2(v.norm(), std::abs(w));
}

namespace {

void fix_column_sign(Mat3& v, int c) {
  for (int r = 0; r < 3; ++r) {
    if (std::abs(v(r, c)) > 1e-12) {
      if (v(r, c) < 0) v.col(c) = -v.col(c);
      return;
    }
  }
}

Vec3 any_orthogonal(const Vec3& a) {
  const Vec3 axis = std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return a.cross(axis).normalized();
}

}  // namespace

Svd3 svd3(const Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(m.transpose() * m);
  const Vec3 evals = es.eigenvalues();  // ascending
  const Mat3 evecs = es.eigenvectors();

  std::array<int, 3> order{2, 1, 0};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return evals[a] > evals[b]; });

  Svd3 out;
  for (int c = 0; c < 3; ++c) out.v.col(c) = evecs.col(order[c]);
  for (int c = 0; c < 3; ++c) fix_column_sign(out.v, c);

  const double scale = std::max(m.cwiseAbs().maxCoeff(), 1e-300);
  const double tiny = 1e-14 * scale;

  // Polar correction: build U by Gram-Schmidt on M V so that U is orthogonal
  // even when M^T M loses precision in its small eigenvalues.
  const Vec3 a1 = m * out.v.col(0);
  const Vec3 a2 = m * out.v.col(1);
  const Vec3 a3 = m * out.v.col(2);

  Vec3 u1, u2, u3;
  if (a1.norm() > tiny) {
    u1 = a1.normalized();
  } else {
    u1 = Vec3::UnitX();
  }
  Vec3 r2 = a2 - u1.dot(a2) * u1;
  if (r2.norm() > tiny) {
    u2 = r2.normalized();
  } else {
    u2 = any_orthogonal(u1);
  }
  u3 = u1.cross(u2);
  if (u3.dot(a3) < 0) u3 = -u3;

  out.u.col(0) = u1;
  out.u.col(1) = u2;
  out.u.col(2) = u3;
  out.s = Vec3(u1.dot(a1), u2.dot(a2), u3.dot(a3));
  for (int i = 0; i < 3; ++i) out.s[i] = std::max(out.s[i], 0.0);
  return out;
}

Mat3 special_orthogonalize_matrix(const Mat3& m) {
  if (!m.allFinite()) throw Error(ErrorKind::DegenerateProjection, "non-finite input matrix");
  const Svd3 d = svd3(m);
  if (!(d.s[2] > 1e-9)) {
    throw Error(ErrorKind::DegenerateProjection,
                "rank-deficient matrix (smallest singular value " + std::to_string(d.s[2]) + ")");
  }
  Mat3 uvt = d.u * d.v.transpose();
  if (uvt.determinant() < 0) {
    Mat3 u = d.u;
    u.col(2) = -u.col(2);
    uvt = u * d.v.transpose();
  }
  return uvt;
}

Rotation special_orthogonalize(const Mat3& m) { return Rotation::from_matrix(special_orthogonalize_matrix(m)); }

Rotation frame_complete(const TwoVectorFrame& f) {
  const double e = std::max({std::abs(f.u1.norm() - 1.0), std::abs(f.u2.norm() - 1.0), std::abs(f.u1.dot(f.u2))});
  if (!(e <= 1e-6)) {
    throw Error(ErrorKind::InvalidFrame, "frame is not orthonormal (error " + std::to_string(e) + ")");
  }
  Mat3 m;
  m.col(0) = f.u1;
  m.col(1) = f.u2;
  m.col(2) = f.u1.cross(f.u2);
  return Rotation::from_matrix(m);
}

TwoVectorFrame first_two_columns(const Rotation& r) {
  const Mat3 m = r.matrix();
  return {m.col(0), m.col(1)};
}

Rotation rotation_mean(std::span<const Rotation> rs, std::span<const double> weights) {
  if (rs.empty()) throw Error(ErrorKind::Contract, "rotation_mean needs at least one rotation");
  if (weights.size() != rs.size()) throw Error(ErrorKind::Shape, "rotation_mean weight count mismatch");
  double total = 0.0;
  Mat3 sum = Mat3::Zero();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw Error(ErrorKind::Contract, "rotation_mean weights must be nonnegative");
    total += weights[i];
    sum += weights[i] * rs[i].matrix();
  }
  if (!(total > 0.0)) throw Error(ErrorKind::Contract, "rotation_mean weights sum to zero");
  try {
    return special_orthogonalize(sum / total);
  } catch (const Error& e) {
    throw Error(ErrorKind::DegenerateMean, "weighted rotation sum is rank deficient");
  }
}

Rotation rotation_mean(std::span<const Rotation> rs) {
  std::vector<double> w(rs.size(), 1.0);
  return rotation_mean(rs, w);
}

}  // namespace flowpose
