#pragma once

// Rotation mathematics on SO(3). Rotations are stored as unit quaternions on
// the canonical hemisphere (w >= 0) so that every rotation has exactly one
// representative.

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "flowpose/error.hpp"

namespace flowpose {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

class Rotation {
 public:
  Rotation() : q_(1.0, 0.0, 0.0, 0.0) {}

  // Normalizes and folds to w >= 0. Throws InvalidRotation on a zero quaternion.
  static Rotation from_quaternion(double w, double x, double y, double z);
  static Rotation from_quaternion(const Vec4& wxyz) {
    return from_quaternion(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
  }
  // Requires an orthogonal matrix with det +1 within 1e-6.
  static Rotation from_matrix(const Mat3& m);

  static Rotation identity() { return Rotation(); }

  const Vec4& quat() const { return q_; }
  double w() const { return q_[0]; }
  double x() const { return q_[1]; }
  double y() const { return q_[2]; }
  double z() const { return q_[3]; }

  Mat3 matrix() const;
  Vec3 apply(const Vec3& v) const { return matrix() * v; }
  Rotation inverse() const { return from_quaternion(q_[0], -q_[1], -q_[2], -q_[3]); }
  Rotation operator*(const Rotation& rhs) const;

  // Rotation angle in [0, pi].
  double angle() const;

 private:
  Vec4 q_;  // (w, x, y, z)
};

struct TwoVectorFrame {
  Vec3 u1;
  Vec3 u2;
};

struct Svd3 {
  Mat3 u;
  Vec3 s;  // descending, nonnegative
  Mat3 v;
};

Mat3 hat(const Vec3& v);

Rotation axis_angle_exp(const Vec3& v);
// Throws NearCutLocus when the angle is >= pi - 1e-6.
Vec3 axis_angle_log(const Rotation& r);

double geodesic_distance(const Rotation& a, const Rotation& b);

Svd3 svd3(const Mat3& m);

// Nearest rotation in Frobenius norm. Throws DegenerateProjection when the
// smallest singular value is <= 1e-9.
Rotation special_orthogonalize(const Mat3& m);
Mat3 special_orthogonalize_matrix(const Mat3& m);

// Columns (u1, u2, u1 x u2). Throws InvalidFrame beyond 1e-6.
Rotation frame_complete(const TwoVectorFrame& f);
TwoVectorFrame first_two_columns(const Rotation& r);

// Chordal L2 mean. Throws DegenerateMean when the weighted sum is rank deficient.
Rotation rotation_mean(std::span<const Rotation> rs, std::span<const double> weights);
Rotation rotation_mean(std::span<const Rotation> rs);

}  // namespace flowpose
