#pragma once

// JSON encodings shared by the file formats. Rotations are [w, x, y, z] on
// the canonical hemisphere; doubles are written with round-trip precision.

#include <nlohmann/json.hpp>
#include <vector>

#include "flowpose/error.hpp"
#include "flowpose/rot3.hpp"

namespace flowpose {

inline nlohmann::json rotation_to_json(const Rotation& r) { return {r.w(), r.x(), r.y(), r.z()}; }

inline Rotation rotation_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorKind::Load, "rotation must be a [w, x, y, z] array");
  return Rotation::from_quaternion(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
}

inline nlohmann::json rotations_to_json(std::span<const Rotation> rs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rs) a.push_back(rotation_to_json(r));
  return a;
}

inline std::vector<Rotation> rotations_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorKind::Load, "expected an array of rotations");
  std::vector<Rotation> out;
  for (const auto& e : j) out.push_back(rotation_from_json(e));
  return out;
}

inline nlohmann::json vec3_to_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::Load, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

template <class Derived>
nlohmann::json rows_to_json(const Eigen::MatrixBase<Derived>& m) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

template <class Matrix>
Matrix rows_from_json(const nlohmann::json& j, Eigen::Index cols) {
  if (!j.is_array()) throw Error(ErrorKind::Load, "expected a nested numeric array");
  Matrix m(static_cast<Eigen::Index>(j.size()), cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (!j[r].is_array() || static_cast<Eigen::Index>(j[r].size()) != cols) {
      throw Error(ErrorKind::Load, "nested array has the wrong row length");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace flowpose
