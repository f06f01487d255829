#pragma once

// Conditional normalizing flow on SO(3)^J built from Möbius coupling layers
// and rotation layers, plus the global-rotation and shape heads.
//
// Direction convention: the analytic Möbius map runs from data to base
// ("normalizing" direction), so log-densities and their gradients never need
// the numerical inverse. Sampling inverts each coupling by bisection.

#include <complex>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "flowpose/config.hpp"
#include "flowpose/diffgraph.hpp"
#include "flowpose/nn.hpp"
#include "flowpose/parallel.hpp"
#include "flowpose/random.hpp"
#include "flowpose/rot3.hpp"
#include "flowpose/so3dist.hpp"

namespace flowpose {

using dg::ResMlp;

inline constexpr double kOmegaMargin = 1e-3;

// raw * tanh(|raw|) * (1 - margin) / |raw|, zero maps to zero.
Vec3 constrain_omega(const Vec3& raw, double margin = kOmegaMargin);

// A convex combination of k Möbius maps on the unit circle.
struct MobiusParams {
  std::vector<Vec3> omegas;     // |omega| <= 1 - margin
  std::vector<double> weights;  // simplex point

  std::size_t k() const { return omegas.size(); }
  // Throws Contract when the omega bound or the simplex constraint fails.
  void validate(double margin = kOmegaMargin) const;
};

struct MobiusResult {
  Vec3 moved;
  double logdet = 0.0;
};

struct MobiusInverseResult {
  Vec3 moving;
  int iterations = 0;
};

// Keeps `held` fixed and turns `moving` about it. Throws InvalidFrame unless
// both are unit and orthogonal within 1e-8.
MobiusResult mobius_forward(const Vec3& held, const Vec3& moving, const MobiusParams& p);

// Solves mobius_forward(held, x, p).moved == moved for x by bisection on the
// angle. Throws NonConvergence after max_iterations.
MobiusInverseResult mobius_inverse(const Vec3& moved, const Vec3& held, const MobiusParams& p, double eps = 1e-4,
                                   int max_iterations = 64);

// Planar picture of the same map: a point at angle phi on the unit circle and
// omegas given as complex numbers in the fixed plane frame. Returns the image
// angle (not wrapped) and d(image)/d(phi).
struct CircleMap {
  double angle = 0.0;
  double derivative = 1.0;
};
CircleMap mobius_circle(double phi, std::span<const std::complex<double>> omegas, std::span<const double> weights);

// Batched bisection inverse. Rows of `moved` and `held` are unit 3-vectors,
// `omega` rows hold [x_0..x_{k-1} | y.. | z..], `weights` rows are simplex
// points. Returns the recovered moving vectors; `iterations` (optional)
// receives the per-row bisection counts.
dg::Tensor mobius_inverse_batch(const dg::Tensor& moved, const dg::Tensor& held, const dg::Tensor& omega,
                                const dg::Tensor& weights, double eps, int max_iterations, Backend backend,
                                std::vector<int>* iterations = nullptr);

struct FlowConfig {
  std::size_t joints = 7;
  std::size_t context_dim = 32;
  std::size_t shape_dim = 4;
  std::size_t layers = 4;
  std::size_t transforms = 16;
  std::size_t hidden = 256;
  std::size_t blocks = 2;
  std::size_t embed_dim = 8;
  std::size_t head_hidden = 64;
  double kappa = 2.0;
  double omega_margin = kOmegaMargin;
  double bisection_eps = 1e-4;
  int bisection_max_iterations = 64;

  static std::vector<KeySpec> schema();
  static FlowConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

// Row layout for batched flow evaluation: row r carries joint joint[r] of
// scene scene[r].
struct RowIndex {
  std::vector<std::uint32_t> scene;
  std::vector<std::uint32_t> joint;

  std::size_t size() const { return scene.size(); }
  // Scene-major grid: row = b * joints + j.
  static RowIndex grid(std::size_t scenes, std::size_t joints);
};

struct PoseSample {
  std::vector<Rotation> joint_rotations;
  Rotation global_rotation;
  std::vector<double> shape;
  double log_prob = 0.0;           // flow log-density of joint_rotations
  double sampling_log_prob = 0.0;  // base log-density of the drawn point plus the logdets at the recovered pose
};

struct CouplingOutput {
  dg::Var moved;
  dg::Var logdet;  // N x 1
};

struct FlowOutput {
  dg::Var base_point;  // N x 9
  dg::Var logdet;      // N x 1
};

class FlowModel {
 public:
  // Registers every parameter under the "flow." prefix. Conditioner output
  // layers start at zero and rotation-layer biases at the identity, so a
  // fresh model is the identity map.
  static FlowModel create(const FlowConfig& cfg, dg::ParamStore& store, Rng& rng);

  const FlowConfig& config() const { return cfg_; }
  ProjectedIsoGaussian base() const { return ProjectedIsoGaussian(Rotation::identity(), cfg_.kappa); }

  // ---- tape-level building blocks (params are store.bind(tape)) ----
  dg::Var context_rows(std::span<const dg::Var> params, dg::Var context, const RowIndex& rows) const;
  CouplingOutput coupling(std::span<const dg::Var> params, const ResMlp& cond, dg::Var held, dg::Var moving,
                          dg::Var cond_input) const;
  // One coupling pair: hold u1 and move u2, then hold the new u2 and move u1.
  FlowOutput coupling_block(std::span<const dg::Var> params, std::size_t layer, dg::Var rotations,
                            dg::Var cond_input) const;
  dg::Var rotation_layer_matrix(std::span<const dg::Var> params, std::size_t layer, dg::Var cond_input) const;
  // Data to base through every layer.
  FlowOutput normalize(std::span<const dg::Var> params, dg::Var rotations, dg::Var context,
                       const RowIndex& rows) const;
  // Per-row joint log-density (N x 1).
  dg::Var log_prob_rows(std::span<const dg::Var> params, dg::Var rotations, dg::Var context,
                        const RowIndex& rows) const;
  dg::Var global_rows(std::span<const dg::Var> params, dg::Var context) const;      // B x 9
  dg::Var shape_rows(std::span<const dg::Var> params, dg::Var context) const;       // B x 2S: mean | log_std

  // ---- batched evaluation without gradients ----
  std::vector<double> log_prob_batch(const dg::ParamStore& store, const dg::Tensor& rotations,
                                     const dg::Tensor& context, const RowIndex& rows, Backend backend,
                                     std::size_t chunk = 2048) const;
  // Base to data by bisection. `iterations` receives the largest count seen.
  dg::Tensor inverse_batch(const dg::ParamStore& store, const dg::Tensor& base_points, const dg::Tensor& context,
                           const RowIndex& rows, Backend backend, double eps, int* max_iterations_seen = nullptr) const;
  // Möbius parameters of one coupling sub-step (0: cond_a, 1: cond_b) for
  // each row's held column (N x 3).
  std::vector<MobiusParams> conditioner_params(const dg::ParamStore& store, std::size_t layer, int sub,
                                               const dg::Tensor& held, const dg::Tensor& context,
                                               const RowIndex& rows) const;

  // ---- per-context convenience ----
  double log_prob(const dg::ParamStore& store, std::span<const Rotation> joint_rotations,
                  std::span<const double> context) const;
  std::vector<PoseSample> sample(const dg::ParamStore& store, std::span<const double> context, std::size_t n,
                                 Rng& rng, Backend backend = Backend::Serial,
                                 std::optional<double> eps = std::nullopt) const;
  PoseSample mode(const dg::ParamStore& store, std::span<const double> context) const;
  Rotation global_rotation(const dg::ParamStore& store, std::span<const double> context) const;
  DiagGaussian shape_distribution(const dg::ParamStore& store, std::span<const double> context) const;

  struct Layer {
    ResMlp cond_a;
    ResMlp cond_b;
    ResMlp rotation;
  };
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  FlowConfig cfg_;
  std::size_t embedding_ = 0;
  std::vector<Layer> layers_;
  ResMlp global_head_;
  ResMlp shape_head_;

  std::vector<PoseSample> finish_samples(const dg::ParamStore& store, std::span<const double> context,
                                         const dg::Tensor& base_points, const dg::Tensor& rotations,
                                         std::size_t n, Rng* rng, Backend backend) const;
};

// Random perturbation of every parameter (tests and benchmarks use it to move
// away from the identity initialization).
void randomize_params(dg::ParamStore& store, Rng& rng, double scale);

}  // namespace flowpose
