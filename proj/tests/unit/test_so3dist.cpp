#include <doctest.h>

#include <algorithm>

#include "flowpose/so3dist.hpp"
#include "gen.hpp"

using namespace flowpose;
using gen::kPi;

namespace {

// Projected-normal density on S^3 w.r.t. surface measure by radial
// quadrature: p(u) = int_0^inf r^3 phi_4(r u - mu) dr.
double projected_normal_surface_density(const Vec4& u, const Vec4& mu) {
  const double t = u.dot(mu), c = mu.squaredNorm();
  const int n = 20000;
  const double hi = std::max(0.0, t) + 12.0, h = hi / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double r = i * h;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    s += w * r * r * r * std::exp(-0.5 * (r * r - 2.0 * r * t + c));
  }
  return s * h / (4.0 * kPi * kPi);
}

double igso3_series(double angle, double eps, int terms) {
  double f = 0.0;
  for (int l = 0; l < terms; ++l) {
    f += (2 * l + 1) * std::exp(-l * (l + 1) * eps) * std::sin((l + 0.5) * angle) / std::sin(angle / 2);
  }
  return f;
}

// Haar angle CDF, used for equal-probability bins.
double haar_angle_cdf(double a) { return (a - std::sin(a)) / kPi; }

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) ++i; else ++j;
    d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
  }
  return d;
}

}  // namespace

TEST_CASE("projected Gaussian sampling") {
  Rng rng(1);
  const Rotation mode = gen::rotation(rng);
  const ProjectedIsoGaussian tight(mode, 1e6);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) worst = std::max(worst, geodesic_distance(pig_sample(tight, rng), mode));
  CHECK(worst < 0.01);

  double spread1 = 0.0, spread2 = 0.0;
  bool hemisphere = true;
  for (int i = 0; i < 10000; ++i) {
    const Rotation a = pig_sample(ProjectedIsoGaussian(Rotation::identity(), 1.0), rng);
    const Rotation b = pig_sample(ProjectedIsoGaussian(Rotation::identity(), 2.0), rng);
    hemisphere = hemisphere && a.w() >= 0.0 && b.w() >= 0.0;
    spread1 += a.angle();
    spread2 += b.angle();
  }
  CHECK(hemisphere);
  CHECK(spread2 < spread1);
}

TEST_CASE("projected Gaussian density matches radial quadrature") {
  Rng rng(2);
  for (double kappa : {0.5, 1.0, 2.0, 3.0, 6.0}) {
    const Rotation mode = gen::rotation(rng);
    const ProjectedIsoGaussian d(mode, kappa);
    for (int i = 0; i < 10; ++i) {
      const Rotation r = gen::rotation(rng);
      const Vec4 mu = kappa * mode.quat();
      // folded, then scaled from the S^3 surface measure (area 2 pi^2) to the
      // normalized Haar measure on SO(3)
      const double folded = projected_normal_surface_density(r.quat(), mu) +
                            projected_normal_surface_density(-r.quat(), mu);
      CHECK(std::exp(pig_logpdf(d, r)) == doctest::Approx(folded * kPi * kPi).epsilon(1e-6));
    }
  }
}

TEST_CASE("projected Gaussian density shape") {
  Rng rng(3);
  const Rotation probe = gen::rotation(rng);
  CHECK(std::abs(pig_logpdf(ProjectedIsoGaussian(Rotation::identity(), 1e-6), probe)) < 1e-5);
  const ProjectedIsoGaussian d(Rotation::identity(), 2.0);
  const Vec3 axis = gen::unit(rng);
  double prev = pig_logpdf(d, Rotation::identity());
  for (int deg = 1; deg < 180; ++deg) {
    const double cur = pig_logpdf(d, axis_angle_exp(axis * deg * kPi / 180.0));
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("projected Gaussian Monte Carlo normalization") {
  Rng rng(4);
  for (double kappa : {1.0, 2.0, 3.0}) {
    const ProjectedIsoGaussian d(gen::rotation(rng), kappa);
    double total = 0.0;
    const int n = 500000;
    for (int i = 0; i < n; ++i) total += std::exp(pig_logpdf(d, uniform_sample(rng)));
    CHECK(total / n == doctest::Approx(1.0).epsilon(0.02));
  }
}

TEST_CASE("IGSO3 series") {
  CHECK(std::abs(igso3_logpdf(axis_angle_exp(Vec3(0.3, 0.1, 0.0)), 50.0)) < 1e-12);
  const double at_zero = igso3_density_angle(0.0, 0.2);
  CHECK(std::isfinite(at_zero));
  double limit = 0.0;
  for (int l = 0; l < 200; ++l) limit += (2 * l + 1) * (2 * l + 1) * std::exp(-l * (l + 1) * 0.2);
  CHECK(at_zero == doctest::Approx(limit).epsilon(1e-10));
  CHECK(igso3_density_angle(1e-9, 0.2) == doctest::Approx(at_zero).epsilon(1e-8));
  for (double eps : {0.01, 0.1, 0.5}) {
    for (double a : {0.1, 1.0, 2.5}) CHECK(igso3_density_angle(a, eps) == doctest::Approx(igso3_series(a, eps, 1500)).epsilon(1e-9));
    double total = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const double a = (i + 0.5) * kPi / n;
      total += igso3_density_angle(a, eps) * haar_angle_density(a) * kPi / n;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(0.01));
  }
  CHECK(igso3_truncation(1e-8) == 2000);
  CHECK(igso3_truncation(1.0) < igso3_truncation(0.01));
}

TEST_CASE("uniform sampling is Haar") {
  Rng rng(5);
  const int n = 100000;
  Mat3 mean = Mat3::Zero();
  std::vector<double> counts(20, 0.0);
  std::vector<double> plain, shifted;
  const Rotation g = gen::rotation(rng);
  for (int i = 0; i < n; ++i) {
    const Rotation r = uniform_sample(rng);
    mean += r.matrix() / n;
    const double a = r.angle();
    counts[std::min(19, static_cast<int>(20.0 * haar_angle_cdf(a)))] += 1.0;
    if (i < 20000) {
      plain.push_back(a);
      shifted.push_back((g * uniform_sample(rng)).angle());
    }
  }
  CHECK(mean.cwiseAbs().maxCoeff() < 0.02);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - n / 20.0) * (c - n / 20.0) / (n / 20.0);
  CHECK(chi2 < 36.19);  // chi-square, 19 dof, p = 0.01
  CHECK(ks_statistic(plain, shifted) < 1.628 * std::sqrt(2.0 / 20000.0));
}

TEST_CASE("diagonal Gaussian") {
  const DiagGaussian unit({0.0}, {0.0});
  CHECK(diag_gaussian_logpdf(unit, {0.0}) == doctest::Approx(-0.5 * std::log(2 * kPi)).epsilon(1e-15));
  CHECK(gen::throws_kind([&] { diag_gaussian_logpdf(unit, {0.0, 1.0}); }, ErrorKind::Shape));
  CHECK(gen::throws_kind([] { DiagGaussian({0.0, 1.0}, {0.0}); }, ErrorKind::Shape));

  Rng rng(6);
  std::vector<double> m(8), ls(8);
  for (int i = 0; i < 8; ++i) {
    m[i] = rng.normal();
    ls[i] = 0.5 * rng.normal();
  }
  const DiagGaussian d(m, ls);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x(8);
    double product = 0.0;
    for (int i = 0; i < 8; ++i) {
      x[i] = 3.0 * rng.normal();
      const double s = std::exp(ls[i]);
      product += std::log(std::exp(-0.5 * (x[i] - m[i]) * (x[i] - m[i]) / (s * s)) / (s * std::sqrt(2 * kPi)));
    }
    CHECK(diag_gaussian_logpdf(d, x) == doctest::Approx(product).epsilon(1e-12));
    CHECK(diag_gaussian_logpdf(d, x) <= diag_gaussian_logpdf(d, m));
  }
  const int n = 100000;
  std::vector<double> sum(8, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto x = diag_gaussian_sample(d, rng);
    for (int c = 0; c < 8; ++c) sum[c] += x[c] / n;
  }
  for (int c = 0; c < 8; ++c) CHECK(std::abs(sum[c] - m[c]) < 3.0 * std::exp(ls[c]) / std::sqrt(double(n)) + 1e-12);
}
