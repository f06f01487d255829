#include <doctest.h>

#include <Eigen/SVD>

#include "flowpose/rot3.hpp"
#include "gen.hpp"

using namespace flowpose;
using gen::kPi;

namespace {

Mat3 rodrigues(const Vec3& v) {
  const double t = v.norm();
  if (t == 0.0) return Mat3::Identity();
  const Mat3 k = hat(v / t);
  return Mat3::Identity() + std::sin(t) * k + (1.0 - std::cos(t)) * k * k;
}

double chordal_cost(const Mat3& m, std::span<const Rotation> rs, std::span<const double> w) {
  double c = 0.0;
  for (std::size_t i = 0; i < rs.size(); ++i) c += w[i] * (m - rs[i].matrix()).squaredNorm();
  return c;
}

}  // namespace

TEST_CASE("quaternion to matrix by hand") {
  CHECK((Rotation::identity().matrix() - Mat3::Identity()).norm() == 0.0);
  const Mat3 m = Rotation::from_quaternion(0, 0, 0, 1).matrix();
  CHECK((m - Vec3(-1, -1, 1).asDiagonal().toDenseMatrix()).norm() < 1e-15);
}

TEST_CASE("matrix round trip and canonical sign") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = gen::rotation(rng);
    CHECK(r.w() >= 0.0);
    CHECK(std::abs(r.quat().norm() - 1.0) < 1e-12);
    const Mat3 m = r.matrix();
    CHECK((Rotation::from_matrix(m).matrix() - m).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK(Rotation::from_quaternion(-1, 0, 0, 0).w() == 1.0);
}

TEST_CASE("from_matrix rejects non-rotations") {
  CHECK(gen::throws_kind([] { Rotation::from_matrix(2.0 * Mat3::Identity()); }, ErrorKind::InvalidRotation));
  CHECK(gen::throws_kind([] { Rotation::from_matrix(Vec3(1, 1, -1).asDiagonal().toDenseMatrix()); },
                         ErrorKind::InvalidRotation));
  CHECK(gen::throws_kind([] { Rotation::from_quaternion(0, 0, 0, 0); }, ErrorKind::InvalidRotation));
}

TEST_CASE("axis-angle exp matches Rodrigues") {
  CHECK(geodesic_distance(axis_angle_exp(Vec3::Zero()), Rotation::identity()) == 0.0);
  const Vec3 y = axis_angle_exp(Vec3(0, 0, kPi / 2)).apply(Vec3(1, 0, 0));
  CHECK((y - Vec3(0, 1, 0)).norm() < 1e-15);
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const Vec3 v = gen::vec3(rng, 1.5);
    CHECK((axis_angle_exp(v).matrix() - rodrigues(v)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("exp(log(r)) round trip below 3 rad") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = gen::rotation_below(rng, 3.0);
    CHECK(geodesic_distance(axis_angle_exp(axis_angle_log(r)), r) < 1e-9);
  }
}

TEST_CASE("log refuses the cut locus") {
  CHECK(gen::throws_kind([] { axis_angle_log(Rotation::from_quaternion(0, 0, 0, 1)); }, ErrorKind::NearCutLocus));
  CHECK_NOTHROW(axis_angle_log(axis_angle_exp(Vec3(0, kPi - 1e-3, 0))));
}

TEST_CASE("geodesic distance") {
  Rng rng(4);
  const Rotation half_turn = Rotation::from_quaternion(0, 0, 0, 1);
  CHECK(std::abs(geodesic_distance(Rotation::identity(), half_turn) - kPi) < 1e-12);
  for (int i = 0; i < 1000; ++i) {
    const Rotation a = gen::rotation(rng), b = gen::rotation(rng), c = gen::rotation(rng), g = gen::rotation(rng);
    const double dab = geodesic_distance(a, b);
    const double oracle = 2.0 * std::acos(std::min(1.0, std::abs(a.quat().dot(b.quat()))));
    CHECK(std::abs(dab - oracle) < 1e-7);
    CHECK(dab >= 0.0);
    CHECK(dab <= kPi);
    CHECK(geodesic_distance(a, a) < 1e-7);
    CHECK(std::abs(dab - geodesic_distance(b, a)) < 1e-12);
    CHECK(dab <= geodesic_distance(a, c) + geodesic_distance(c, b) + 1e-12);
    CHECK(std::abs(dab - geodesic_distance(g * a, g * b)) < 1e-9);
  }
}

TEST_CASE("svd3 reconstructs and agrees with a general SVD") {
  const Svd3 id = svd3(Mat3::Identity());
  CHECK((id.s - Vec3::Ones()).norm() < 1e-12);
  const Svd3 d = svd3(Vec3(3, 2, 1).asDiagonal().toDenseMatrix());
  CHECK((d.s - Vec3(3, 2, 1)).norm() < 1e-12);
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 m = gen::matrix(rng);
    const Svd3 s = svd3(m);
    CHECK((s.u * s.s.asDiagonal() * s.v.transpose() - m).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(s.s[0] >= s.s[1]);
    CHECK(s.s[1] >= s.s[2]);
    CHECK(s.s[2] >= 0.0);
    CHECK((s.u.transpose() * s.u - Mat3::Identity()).norm() < 1e-10);
    CHECK((s.v.transpose() * s.v - Mat3::Identity()).norm() < 1e-10);
    const Eigen::JacobiSVD<Mat3> ref(m);
    CHECK((ref.singularValues() - s.s).norm() < 1e-9);
  }
}

TEST_CASE("svd3 is deterministic") {
  Rng rng(6);
  const Mat3 m = gen::matrix(rng);
  const Svd3 a = svd3(m), b = svd3(m);
  CHECK(a.u == b.u);
  CHECK(a.v == b.v);
  CHECK(a.s == b.s);
}

TEST_CASE("special orthogonalize") {
  CHECK((special_orthogonalize(Vec3(2, 3, 4).asDiagonal().toDenseMatrix()).matrix() - Mat3::Identity()).norm() <
        1e-12);
  CHECK(gen::throws_kind([] { special_orthogonalize(Vec3(1, 1, 0).asDiagonal().toDenseMatrix()); },
                         ErrorKind::DegenerateProjection));
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const Rotation r = gen::rotation(rng);
    CHECK(geodesic_distance(special_orthogonalize(r.matrix()), r) < 1e-10);
    const Mat3 m = gen::matrix(rng);
    const Mat3 once = special_orthogonalize_matrix(m);
    CHECK(std::abs(once.determinant() - 1.0) < 1e-10);
    CHECK((special_orthogonalize_matrix(once) - once).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("special orthogonalize of a reflection beats a brute-force search") {
  Rng rng(8);
  for (int t = 0; t < 5; ++t) {
    const Mat3 m = gen::rotation(rng).matrix() * Vec3(1.0, 1.2, -0.8).asDiagonal();
    REQUIRE(m.determinant() < 0.0);
    const Mat3 r = special_orthogonalize_matrix(m);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-10);
    const double best = (m - r).squaredNorm();
    double search = 1e300;
    for (int i = 0; i < 20000; ++i) search = std::min(search, (m - gen::rotation(rng).matrix()).squaredNorm());
    for (int i = 0; i < 2000; ++i) {
      const Mat3 near = (Rotation::from_matrix(r) * gen::rotation_below(rng, 0.2)).matrix();
      search = std::min(search, (m - near).squaredNorm());
    }
    CHECK(best <= search + 1e-12);
  }
}

TEST_CASE("frame completion") {
  CHECK((frame_complete({Vec3(1, 0, 0), Vec3(0, 1, 0)}).matrix() - Mat3::Identity()).norm() < 1e-15);
  const Mat3 p = frame_complete({Vec3(0, 1, 0), Vec3(0, 0, 1)}).matrix();
  CHECK((p * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm() < 1e-15);
  CHECK((p * Vec3(0, 1, 0) - Vec3(0, 0, 1)).norm() < 1e-15);
  CHECK((p * Vec3(0, 0, 1) - Vec3(1, 0, 0)).norm() < 1e-15);
  CHECK(gen::throws_kind([] { frame_complete({Vec3(1, 0, 0), Vec3(1, 1, 0).normalized()}); }, ErrorKind::InvalidFrame));
  CHECK(gen::throws_kind([] { frame_complete({Vec3(2, 0, 0), Vec3(0, 1, 0)}); }, ErrorKind::InvalidFrame));
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = gen::rotation(rng);
    CHECK((frame_complete(first_two_columns(r)).matrix() - r.matrix()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("chordal mean") {
  Rng rng(10);
  const Rotation r = gen::rotation(rng);
  const std::vector<Rotation> same{r, r};
  CHECK(geodesic_distance(rotation_mean(same), r) < 1e-10);
  const double t = kPi / 3;
  const std::vector<Rotation> sym{axis_angle_exp(Vec3(0, 0, t)), axis_angle_exp(Vec3(0, 0, -t))};
  CHECK(geodesic_distance(rotation_mean(sym), Rotation::identity()) < 1e-10);
  const std::vector<Rotation> opposite{axis_angle_exp(Vec3(0, 0, kPi / 2)), axis_angle_exp(Vec3(0, 0, -kPi / 2))};
  CHECK(gen::throws_kind([&] { rotation_mean(opposite); }, ErrorKind::DegenerateMean));
}

TEST_CASE("chordal mean minimizes the weighted chordal cost over a grid") {
  Rng rng(11);
  for (int t = 0; t < 5; ++t) {
    const Rotation center = gen::rotation(rng);
    std::vector<Rotation> rs;
    std::vector<double> w;
    for (int i = 0; i < 4; ++i) {
      rs.push_back(center * gen::rotation_below(rng, 1.0));
      w.push_back(rng.uniform(0.1, 2.0));
    }
    const Rotation m = rotation_mean(rs, w);
    const double at_mean = chordal_cost(m.matrix(), rs, w);
    // 5-degree grid in axis-angle coordinates around the mean
    const double step = 5.0 * kPi / 180.0;
    double grid_best = 1e300;
    for (int a = -6; a <= 6; ++a) {
      for (int b = -6; b <= 6; ++b) {
        for (int c = -6; c <= 6; ++c) {
          const Mat3 g = (m * axis_angle_exp(step * Vec3(a, b, c))).matrix();
          grid_best = std::min(grid_best, chordal_cost(g, rs, w));
        }
      }
    }
    CHECK(at_mean <= grid_best + 1e-12);
  }
}
