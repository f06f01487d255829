#pragma once

// Linear-blend-skinned articulated body: shape blending, forward kinematics,
// joint regression and anchor-vertex selection.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <string>
#include <span>
#include <vector>

#include "flowpose/rot3.hpp"

namespace flowpose {

using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct BodyModelDef {
  MatX3 template_vertices;        // N x 3, meters
  Eigen::MatrixXd shape_basis;    // S x 3N, vertex-major (x0 y0 z0 x1 ...)
  Eigen::MatrixXd joint_regressor;  // K x N
  Eigen::MatrixXd blend_weights;    // K x N
  std::vector<int> parents;         // root = -1
  std::vector<int> anchor_indices;
  std::vector<std::string> joint_names;

  std::size_t num_vertices() const { return static_cast<std::size_t>(template_vertices.rows()); }
  std::size_t num_joints() const { return parents.size(); }
  std::size_t shape_dim() const { return static_cast<std::size_t>(shape_basis.rows()); }

  // Joints ordered so that every parent precedes its children.
  std::vector<int> topological_order() const;

  // Throws Load with a description of the first violated invariant.
  void validate() const;

  static BodyModelDef from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

BodyModelDef load_model(const std::string& path);
void save_model(const BodyModelDef& m, const std::string& path);

struct BodyState {
  std::vector<Rotation> pose;  // K relative rotations, pose[root] is the global rotation
  std::vector<double> shape;
  Vec3 translation = Vec3::Zero();
};

struct Posed {
  MatX3 vertices;  // N x 3
  MatX3 joints;    // K x 3
};

MatX3 shape_blend(const BodyModelDef& m, std::span<const double> beta);
MatX3 regress_joints(const BodyModelDef& m, const MatX3& vertices);

// World-space transforms of every joint for a given pose and rest joints.
struct JointTransforms {
  std::vector<Mat3> rotation;
  MatX3 position;  // posed joint locations before translation
};
JointTransforms chain_transforms(const BodyModelDef& m, std::span<const Rotation> pose, const MatX3& rest_joints);

Posed forward_kinematics(const BodyModelDef& m, const BodyState& s);

// Segment of each vertex: argmax blend weight when it exceeds 0.5, else -1.
std::vector<int> vertex_segments(const BodyModelDef& m);

// Farthest-point anchors, quota per segment proportional to its extent with a
// per-segment minimum. Deterministic. Throws Quota when the request cannot be
// met.
std::vector<int> select_anchors(const BodyModelDef& m, std::size_t per_segment_min, std::size_t total);

// The bundled 8-joint, 96-vertex, 4-coefficient toy body with anchors chosen
// by select_anchors(m, anchor_min, anchors).
BodyModelDef make_toy_model(std::size_t anchors = 48, std::size_t anchor_min = 4);

}  // namespace flowpose
