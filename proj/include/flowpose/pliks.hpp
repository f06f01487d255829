#pragma once

// Linearized weighted least-squares recovery of joint rotation updates, shape
// coefficients and translation from 2D anchors under perspective cameras.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "flowpose/bodymodel.hpp"
#include "flowpose/config.hpp"
#include "flowpose/diffgraph.hpp"
#include "flowpose/rot3.hpp"

namespace flowpose {

using Intrinsics = Eigen::Matrix<double, 3, 4>;
using MatX2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;

struct Observation {
  MatX2 anchors_2d;               // N_s x 2, pixels
  Eigen::VectorXd laplace_scale;  // N_s, pixels, > 0
  Eigen::VectorXd aux_weight;     // N_s, >= 0
  Intrinsics intrinsics = Intrinsics::Zero();
  Rotation extrinsic_rotation;
  Vec3 extrinsic_translation = Vec3::Zero();

  std::size_t size() const { return static_cast<std::size_t>(anchors_2d.rows()); }
  void validate() const;  // throws InvalidRig / Contract

  nlohmann::json to_json() const;
  static Observation from_json(const nlohmann::json& j);
};

Intrinsics pinhole(double focal, double cx, double cy);

// Pixel coordinates of world points seen by a camera. Throws BehindCamera for
// depth <= 1e-6 m.
MatX2 project(const Intrinsics& k, const Rotation& r, const Vec3& t, const MatX3& points);

struct SolveConfig {
  double omega_beta = 0.0;
  double gamma = 0.0;
  std::vector<double> beta_prior;    // empty: zeros
  std::vector<Rotation> pose_prior;  // empty: the initial pose
  int max_relinearizations = 0;
  bool optimize_pose = true;
  bool optimize_shape = true;

  static std::vector<KeySpec> schema();
  static SolveConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SolveResult {
  std::vector<Vec3> delta_vectors;    // log of each total update, radians
  std::vector<Rotation> delta_rotations;
  std::vector<Rotation> pose;         // pose_init[k] * delta_rotations[k]
  std::vector<double> beta;
  Vec3 translation = Vec3::Zero();
  double weighted_rms_residual = 0.0;  // pixels
  std::vector<double> per_anchor_residuals;
  int linearizations = 0;

  nlohmann::json to_json() const;
};

// w = aux / (scale + 1e-6)
Eigen::VectorXd anchor_weights(const Eigen::VectorXd& laplace_scale, const Eigen::VectorXd& aux_weight);

struct LinearSystem {
  Eigen::MatrixXd a;  // normal matrix J^T J
  Eigen::VectorXd b;  // J^T r
  std::size_t rows = 0;
  // Unknown layout: delta (3K) | beta (S) | translation (3).
  std::size_t unknowns() const { return static_cast<std::size_t>(b.size()); }
};

// Linearizes about (pose_init, beta_lin) and stacks the weighted DLT rows of
// every observation together with the regularization rows. `pose_anchor` is
// the rotation set the gamma rows pull toward. Throws Underdetermined when
// fewer informative rows than unknowns remain.
LinearSystem assemble_system(const BodyModelDef& model, std::span<const Rotation> pose_init,
                             std::span<const double> beta_lin, std::span<const Observation> obs,
                             const SolveConfig& cfg, std::span<const Rotation> pose_anchor = {});

// Weighted RMS reprojection error and per-anchor pixel errors of a state.
double reprojection_residual(const BodyModelDef& model, const BodyState& state, std::span<const Observation> obs,
                             std::vector<double>* per_anchor = nullptr);

SolveResult solve_single_view(const BodyModelDef& model, std::span<const Rotation> pose_init,
                              const Observation& obs, const SolveConfig& cfg);

// Views are processed in a canonical order, so permuting them does not change
// the result. per_view_poses[v][root] is expressed in view v's camera frame.
SolveResult solve_multi_view(const BodyModelDef& model, const std::vector<std::vector<Rotation>>& per_view_poses,
                             std::span<const Observation> views, const SolveConfig& cfg);

// mean over anchors of log(2 s) + |pred - gt|_1 / s
double laplacian_nll(const MatX2& pred, const Eigen::VectorXd& scale, const MatX2& gt);
// Tape form: pred and gt N x 2, scale N x 1; returns 1 x 1.
dg::Var laplacian_nll(dg::Var pred, dg::Var scale, dg::Var gt);

}  // namespace flowpose
