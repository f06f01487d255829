#pragma once

// Probability distributions over SO(3) and over shape coefficients.
//
// Every SO(3) density here is expressed with respect to the normalized Haar
// probability measure: the uniform distribution has log-density exactly 0.

#include <cmath>
#include <numbers>
#include <vector>

#include "flowpose/random.hpp"
#include "flowpose/rot3.hpp"

namespace flowpose {

// Direction of X ~ N(kappa * q_mode, I4) on S^3, folded over q -> -q.
struct ProjectedIsoGaussian {
  Rotation mode;
  double kappa = 2.0;

  ProjectedIsoGaussian() = default;
  ProjectedIsoGaussian(Rotation m, double k);
};

Rotation pig_sample(const ProjectedIsoGaussian& d, Rng& rng);
double pig_logpdf(const ProjectedIsoGaussian& d, const Rotation& r);

// Log-density as a function of the squared quaternion cosine s = <q, q_mode>^2.
// `one_minus_s` is passed separately to keep precision near the mode.
double pig_logpdf_cos2(double kappa, double s, double one_minus_s);
// d logpdf / d s for the same parametrization.
double pig_dlogpdf_dcos2(double kappa, double s);

// Isotropic Gaussian on SO(3) (heat kernel), truncated character series in the
// rotation angle; eps is the diffusion scale.
double igso3_density_angle(double angle, double eps);
double igso3_logpdf(const Rotation& r, double eps);
// Number of series terms used for a given eps (tail term < 1e-12, capped at 2000).
int igso3_truncation(double eps);

Rotation uniform_sample(Rng& rng);

// Density of the rotation angle of a Haar-uniform rotation on [0, pi].
inline double haar_angle_density(double angle) { return (1.0 - std::cos(angle)) / std::numbers::pi; }

struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> log_std;

  DiagGaussian() = default;
  DiagGaussian(std::vector<double> m, std::vector<double> ls);
  std::size_t dim() const { return mean.size(); }
};

std::vector<double> diag_gaussian_sample(const DiagGaussian& d, Rng& rng);
double diag_gaussian_logpdf(const DiagGaussian& d, const std::vector<double>& x);

}  // namespace flowpose
