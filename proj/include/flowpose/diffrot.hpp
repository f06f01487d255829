#pragma once

// Fused tape primitives over batches of rotations. A batch of rotations is an
// N x 9 tensor whose rows hold 3x3 matrices in column-major order
// (first column, second column, third column).

#include "flowpose/diffgraph.hpp"
#include "flowpose/rot3.hpp"

namespace flowpose {

Mat3 row_to_mat3(const dg::Tensor& t, std::size_t row);
void mat3_to_row(const Mat3& m, dg::Tensor& t, std::size_t row);
dg::Tensor rotations_to_tensor(std::span<const Rotation> rs);

// Nearest rotation of each 3x3 row (symmetric orthogonalization with
// det correction); gradient through the polar factor.
dg::Var orthogonalize_rows(dg::Var m);

// Row-wise matrix products A_i B_i.
dg::Var rotmul_rows(dg::Var a, dg::Var b);
// Row-wise A_i^T B_i.
dg::Var rotmul_tn_rows(dg::Var a, dg::Var b);
// Row-wise R_i v_i for v of shape N x 3.
dg::Var rotvec_rows(dg::Var r, dg::Var v);

// omega_j -> omega_j * tanh(|omega_j|) * (1 - margin) / |omega_j| for each of
// the k vectors of a row laid out as [x_0..x_{k-1} | y_0.. | z_0..].
dg::Var constrain_omega_rows(dg::Var raw, std::size_t k, double margin);

// Projected isotropic Gaussian log-density (normalized Haar convention) of
// each rotation row, N x 1.
dg::Var pig_logpdf_rows(dg::Var rotations, const Rotation& mode, double kappa);

// Squared geodesic angle between matching rows, N x 1.
dg::Var geodesic_sq_rows(dg::Var a, dg::Var b);

}  // namespace flowpose
