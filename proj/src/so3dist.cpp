#include "flowpose/so3dist.hpp"

#include <cmath>
#include <numbers>

namespace flowpose {

namespace {

constexpr double kSqrt2Pi = 2.5066282746310002;

// erf(a / sqrt 2) / a, finite at a = 0
double erf_ratio(double a) {
  if (a < 1e-4) return std::sqrt(2.0 / std::numbers::pi) * (1.0 - a * a / 6.0);
  return std::erf(a / std::numbers::sqrt2) / a;
}

}  // namespace

ProjectedIsoGaussian::ProjectedIsoGaussian(Rotation m, double k) : mode(m), kappa(k) {
  if (!(kappa > 0.0) || !std::isfinite(kappa)) throw Error(ErrorKind::Contract, "kappa must be positive");
}

Rotation pig_sample(const ProjectedIsoGaussian& d, Rng& rng) {
  const Vec4& m = d.mode.quat();
  for (;;) {
    Vec4 v;
    for (int i = 0; i < 4; ++i) v[i] = d.kappa * m[i] + rng.normal();
    if (v.norm() > 1e-300) return Rotation::from_quaternion(v);
  }
}

// With a = kappa * sqrt(s):
//   p = 1/4 * exp(-kappa^2 (1 - s) / 2) * G(a)
//   G(a) = 2 (a^2 + 2) exp(-a^2/2) + (a^3 + 3a) sqrt(2 pi) erf(a / sqrt 2)
// which is the radial integral of the 4D normal folded over antipodes and
// scaled to the normalized Haar measure.
double pig_logpdf_cos2(double kappa, double s, double one_minus_s) {
  s = std::clamp(s, 0.0, 1.0);
  one_minus_s = std::clamp(one_minus_s, 0.0, 1.0);
  const double a = kappa * std::sqrt(s);
  const double g = 2.0 * (a * a + 2.0) * std::exp(-0.5 * a * a) + (a * a + 3.0) * a * a * kSqrt2Pi * erf_ratio(a);
  return -std::log(4.0) - 0.5 * kappa * kappa * one_minus_s + std::log(g);
}

double pig_dlogpdf_dcos2(double kappa, double s) {
  s = std::clamp(s, 0.0, 1.0);
  const double a = kappa * std::sqrt(s);
  const double x = std::exp(-0.5 * a * a);
  const double h = erf_ratio(a);
  const double g = 2.0 * (a * a + 2.0) * x + (a * a + 3.0) * a * a * kSqrt2Pi * h;
  // G'(a) / a, finite at a = 0
  const double gp_over_a = 6.0 * x + kSqrt2Pi * (3.0 * a * a + 3.0) * h;
  return 0.5 * kappa * kappa + 0.5 * kappa * kappa * gp_over_a / g;
}

double pig_logpdf(const ProjectedIsoGaussian& d, const Rotation& r) {
  const Vec4& q = r.quat();
  const Vec4& m = d.mode.quat();
  const double c = q.dot(m);
  // 1 - c^2 from the relative rotation's vector part, exact near the mode
  const Vec3 qv = q.tail<3>(), mv = m.tail<3>();
  const Vec3 rel = m[0] * qv - q[0] * mv - mv.cross(qv);
  return pig_logpdf_cos2(d.kappa, c * c, rel.squaredNorm());
}

int igso3_truncation(double eps) {
  int l = 1;
  while (l < 2000) {
    const double bound = (2.0 * l + 1.0) * (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * eps);
    if (bound < 1e-12) break;
    ++l;
  }
  return l;
}

double igso3_density_angle(double angle, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::Contract, "igso3 scale must be positive");
  const int lmax = igso3_truncation(eps);
  const double half = 0.5 * std::abs(angle);
  const double sh = std::sin(half);
  double f = 0.0;
  if (sh < 1e-7) {
    for (int l = 0; l <= lmax; ++l) {
      const double d = 2.0 * l + 1.0;
      f += d * d * std::exp(-l * (l + 1.0) * eps);
    }
  } else {
    for (int l = 0; l <= lmax; ++l) {
      f += (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * eps) * std::sin((l + 0.5) * std::abs(angle)) / sh;
    }
  }
  return f;
}

double igso3_logpdf(const Rotation& r, double eps) {
  const double f = igso3_density_angle(r.angle(), eps);
  // truncation can leave tiny negative values far in the tail
  return std::log(std::max(f, 1e-300));
}

Rotation uniform_sample(Rng& rng) {
  for (;;) {
    Vec4 v(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (v.norm() > 1e-300) return Rotation::from_quaternion(v);
  }
}

DiagGaussian::DiagGaussian(std::vector<double> m, std::vector<double> ls) : mean(std::move(m)), log_std(std::move(ls)) {
  if (mean.size() != log_std.size()) throw Error(ErrorKind::Shape, "mean and log_std lengths differ");
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!std::isfinite(mean[i]) || !std::isfinite(log_std[i])) {
      throw Error(ErrorKind::Contract, "diagonal Gaussian parameters must be finite");
    }
  }
}

std::vector<double> diag_gaussian_sample(const DiagGaussian& d, Rng& rng) {
  std::vector<double> x(d.dim());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = d.mean[i] + std::exp(d.log_std[i]) * rng.normal();
  return x;
}

double diag_gaussian_logpdf(const DiagGaussian& d, const std::vector<double>& x) {
  if (x.size() != d.dim()) throw Error(ErrorKind::Shape, "diag Gaussian dimension mismatch");
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - d.mean[i]) * std::exp(-d.log_std[i]);
    lp += -0.5 * z * z - d.log_std[i] - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  return lp;
}

}  // namespace flowpose
