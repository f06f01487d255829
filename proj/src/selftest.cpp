#include <cmath>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "flowpose/diffrot.hpp"
#include "flowpose/harness.hpp"

namespace flowpose {

using dg::Tape;
using dg::Tensor;
using dg::Var;
using nlohmann::json;

namespace {

class Suite {
 public:
  explicit Suite(std::string name) { r_.name = std::move(name); }

  void check(bool ok, const std::string& what) {
    ++r_.checks;
    if (!ok) {
      ++r_.failures;
      r_.messages.push_back(what);
    }
  }
  // Runs a block; an exception counts as one failed check.
  void guard(const std::string& what, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(false, what + ": " + e.what());
    }
  }
  SuiteResult result() const { return r_; }

 private:
  SuiteResult r_;
};

Vec3 random_vec(Rng& rng, double scale) { return scale * Vec3(rng.normal(), rng.normal(), rng.normal()); }

SuiteResult rot3_suite() {
  Suite s("rot3");
  Rng rng(101);
  s.guard("rot3", [&] {
    double worst_log = 0.0, worst_mat = 0.0;
    bool canonical = true;
    for (int i = 0; i < 500; ++i) {
      const Rotation r = uniform_sample(rng);
      canonical = canonical && r.w() >= 0.0;
      if (r.angle() < std::numbers::pi - 1e-3) {
        worst_log = std::max(worst_log, geodesic_distance(axis_angle_exp(axis_angle_log(r)), r));
      }
      worst_mat = std::max(worst_mat, geodesic_distance(Rotation::from_matrix(r.matrix()), r));
    }
    s.check(canonical, "quaternions are not sign-canonical");
    s.check(worst_log < 1e-10, "exp(log(r)) round trip");
    s.check(worst_mat < 1e-10, "matrix round trip");
    const Rotation a = uniform_sample(rng);
    const std::vector<Rotation> same(5, a);
    s.check(geodesic_distance(rotation_mean(same), a) < 1e-10, "mean of identical rotations");
    const Rotation b = uniform_sample(rng);
    s.check(std::abs(geodesic_distance(a, b) - geodesic_distance(b, a)) < 1e-12, "geodesic symmetry");
  });
  return s.result();
}

SuiteResult diffgraph_suite() {
  Suite s("diffgraph");
  s.guard("gradcheck", [&] {
    Rng rng(202);
    Tensor a(4, 3), b(3, 2);
    for (double& v : a.vec()) v = rng.normal();
    for (double& v : b.vec()) v = rng.normal();
    const std::vector<Tensor> point{a, b};
    const auto report = dg::finite_diff_check(
        [](Tape&, std::span<const Var> p) {
          Var h = dg::tanh(dg::matmul(p[0], p[1]));
          return dg::sum(dg::softmax(h) * dg::exp(0.3 * h)) + dg::mean(dg::square(p[0]));
        },
        point, 1e-6, 1e-5);
    s.check(report.passed, "composite expression gradient");
  });
  s.guard("rotation ops", [&] {
    Rng rng(203);
    Tensor m(3, 9);
    for (double& v : m.vec()) v = rng.normal();
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 9; c += 4) m(r, c) += 3.0;
    }
    Tensor other(3, 9);
    for (std::size_t r = 0; r < 3; ++r) mat3_to_row(uniform_sample(rng).matrix(), other, r);
    const std::vector<Tensor> point{m};
    const auto report = dg::finite_diff_check(
        [&](Tape& tape, std::span<const Var> p) {
          return dg::sum(geodesic_sq_rows(orthogonalize_rows(p[0]), tape.constant(other)));
        },
        point, 1e-6, 1e-5);
    s.check(report.passed, "orthogonalize + geodesic gradient");
  });
  return s.result();
}

SuiteResult so3dist_suite() {
  Suite s("so3dist");
  s.guard("so3dist", [&] {
    Rng rng(303);
    for (double kappa : {1.0, 2.0, 3.0}) {
      const ProjectedIsoGaussian d(Rotation::identity(), kappa);
      bool hemisphere = true;
      for (int i = 0; i < 2000; ++i) hemisphere = hemisphere && pig_sample(d, rng).w() >= 0.0;
      s.check(hemisphere, "samples leave the canonical hemisphere");
      // integral of the density over the angle with the Haar angle weight
      double total = 0.0;
      const int n = 4000;
      for (int i = 0; i < n; ++i) {
        const double w = (i + 0.5) * std::numbers::pi / n;
        const Rotation r = axis_angle_exp(Vec3(w, 0.0, 0.0));
        total += std::exp(pig_logpdf(d, r)) * haar_angle_density(w) * std::numbers::pi / n;
      }
      s.check(std::abs(total - 1.0) < 1e-3, "projected Gaussian normalization");
    }
    double total = 0.0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
      const double w = (i + 0.5) * std::numbers::pi / n;
      total += igso3_density_angle(w, 0.3) * haar_angle_density(w) * std::numbers::pi / n;
    }
    s.check(std::abs(total - 1.0) < 1e-2, "IGSO3 normalization");
  });
  return s.result();
}

SuiteResult mobius_suite() {
  Suite s("mobiusflow");
  s.guard("round trip", [&] {
    Rng rng(404);
    double worst = 0.0;
    int max_iter = 0;
    for (int i = 0; i < 500; ++i) {
      const Rotation f = uniform_sample(rng);
      const Vec3 held = f.matrix().col(0), moving = f.matrix().col(1);
      MobiusParams p;
      double total = 0.0;
      for (int k = 0; k < 4; ++k) {
        p.omegas.push_back(constrain_omega(random_vec(rng, 1.0)));
        p.weights.push_back(-std::log(1.0 - rng.uniform()));
        total += p.weights.back();
      }
      for (double& w : p.weights) w /= total;
      const MobiusResult fwd = mobius_forward(held, moving, p);
      const MobiusInverseResult inv = mobius_inverse(fwd.moved, held, p, 1e-10);
      worst = std::max(worst, std::acos(std::clamp(inv.moving.dot(moving), -1.0, 1.0)));
      max_iter = std::max(max_iter, inv.iterations);
    }
    s.check(worst < 1e-6, "forward/inverse round trip");
    s.check(max_iter <= 64, "bisection iteration cap");
  });
  s.guard("circle derivative", [&] {
    const std::vector<std::complex<double>> om{{0.3, -0.2}, {-0.5, 0.4}};
    const std::vector<double> w{0.4, 0.6};
    double worst = 0.0;
    for (int i = 0; i < 64; ++i) {
      const double phi = -3.0 + 6.0 * i / 64.0, h = 1e-6;
      const double fd = (mobius_circle(phi + h, om, w).angle - mobius_circle(phi - h, om, w).angle) / (2 * h);
      worst = std::max(worst, std::abs(fd - mobius_circle(phi, om, w).derivative));
    }
    s.check(worst < 1e-6, "circle map derivative");
  });
  s.guard("flow densities", [&] {
    FlowConfig cfg;
    cfg.joints = 2;
    cfg.context_dim = 3;
    cfg.shape_dim = 1;
    cfg.layers = 2;
    cfg.transforms = 3;
    cfg.hidden = 8;
    cfg.blocks = 1;
    cfg.embed_dim = 2;
    cfg.head_hidden = 4;
    cfg.bisection_eps = 1e-12;
    dg::ParamStore store;
    Rng rng(405);
    const FlowModel flow = FlowModel::create(cfg, store, rng);
    const std::vector<double> ctx{0.2, -0.4, 0.9};
    const std::vector<Rotation> identity(2, Rotation::identity());
    const double base = pig_logpdf(flow.base(), Rotation::identity());
    s.check(std::abs(flow.log_prob(store, identity, ctx) - 2.0 * base) < 1e-9, "fresh flow equals its base");
    randomize_params(store, rng, 0.1);
    const auto samples = flow.sample(store, ctx, 20, rng);
    double worst = 0.0;
    for (const auto& p : samples) worst = std::max(worst, std::abs(p.log_prob - p.sampling_log_prob));
    s.check(worst < 1e-6, "sample log-density matches the exact log-density");
  });
  return s.result();
}

SuiteResult bodymodel_suite() {
  Suite s("bodymodel");
  s.guard("toy model", [&] {
    const BodyModelDef m = make_toy_model();
    m.validate();
    s.check(m.num_joints() == 8 && m.num_vertices() == 96 && m.shape_dim() == 4, "toy dimensions");
    s.check((m.joint_regressor.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12, "regressor rows sum to 1");
    s.check((m.blend_weights.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12, "blend weights sum to 1");
    const BodyModelDef back = BodyModelDef::from_json(m.to_json());
    s.check((back.template_vertices - m.template_vertices).cwiseAbs().maxCoeff() == 0.0, "JSON round trip");
    BodyState rest;
    rest.pose.assign(m.num_joints(), Rotation::identity());
    rest.shape.assign(m.shape_dim(), 0.0);
    s.check((forward_kinematics(m, rest).vertices - m.template_vertices).cwiseAbs().maxCoeff() < 1e-12,
            "identity pose reproduces the template");
    Rng rng(505);
    BodyState posed = rest;
    for (auto& r : posed.pose) r = axis_angle_exp(random_vec(rng, 0.4));
    posed.translation = Vec3(0.1, 0.2, -0.3);
    BodyState moved = posed;
    moved.translation += Vec3(1.0, -2.0, 0.5);
    const MatX3 d = forward_kinematics(m, moved).vertices - forward_kinematics(m, posed).vertices;
    s.check((d.rowwise() - Eigen::RowVector3d(1.0, -2.0, 0.5)).cwiseAbs().maxCoeff() < 1e-12,
            "translation equivariance");
  });
  return s.result();
}

SuiteResult pliks_suite() {
  Suite s("pliks");
  s.guard("solver", [&] {
    const BodyModelDef m = make_toy_model();
    DatasetConfig dc;
    dc.scenes = 5;
    dc.noise.laplace_scale = 0.0;
    dc.rig.views = 2;
    const auto data = gen_dataset(m, dc, 606);
    SolveConfig cfg;
    double worst_t = 0.0, worst_r = 0.0;
    for (const auto& sc : data) {
      const SolveResult r = solve_single_view(m, sc.gt_state.pose, sc.views[0], cfg);
      worst_t = std::max(worst_t, (r.translation - sc.gt_state.translation).norm());
      worst_r = std::max(worst_r, r.weighted_rms_residual);
    }
    s.check(worst_t < 1e-4, "noiseless translation recovery");
    s.check(worst_r < 1e-6, "noiseless residual");

    DatasetConfig noisy = dc;
    noisy.noise.laplace_scale = 2.0;
    const auto nd = gen_dataset(m, noisy, 607);
    const SceneRecord& sc = nd[0];
    SolveConfig reg;
    reg.omega_beta = 10.0;
    reg.gamma = 10.0;
    const SolveResult base = solve_single_view(m, sc.gt_state.pose, sc.views[0], reg);
    Observation scaled = sc.views[0];
    scaled.aux_weight *= 3.0;
    SolveConfig reg9 = reg;
    reg9.omega_beta *= 9.0;
    reg9.gamma *= 9.0;
    const SolveResult sr = solve_single_view(m, sc.gt_state.pose, scaled, reg9);
    s.check((sr.translation - base.translation).norm() < 1e-9, "weight scale invariance");

    std::vector<std::vector<Rotation>> one{sc.gt_state.pose};
    Observation ident = sc.views[0];
    ident.extrinsic_rotation = Rotation::identity();
    ident.extrinsic_translation = Vec3::Zero();
    SolveResult a, b;
    try {
      a = solve_single_view(m, sc.gt_state.pose, ident, reg);
      b = solve_multi_view(m, one, std::span<const Observation>(&ident, 1), reg);
      s.check(a.translation == b.translation && a.beta == b.beta, "single view equals multi-view with one view");
    } catch (const Error& e) {
      s.check(e.kind() == ErrorKind::SolverFailure, std::string("identity-extrinsic view: ") + e.what());
    }

    std::vector<std::vector<Rotation>> two(2, sc.gt_state.pose);
    for (int v = 0; v < 2; ++v) two[v][0] = sc.views[v].extrinsic_rotation * sc.gt_state.pose[0];
    const SolveResult fwd = solve_multi_view(m, two, sc.views, reg);
    std::vector<Observation> rev{sc.views[1], sc.views[0]};
    std::vector<std::vector<Rotation>> two_rev{two[1], two[0]};
    const SolveResult bwd = solve_multi_view(m, two_rev, rev, reg);
    s.check(fwd.translation == bwd.translation && fwd.beta == bwd.beta, "view order invariance");
  });
  s.guard("laplacian", [&] {
    MatX2 pred(1, 2), gt(1, 2);
    pred << 1.0, 2.0;
    gt << 1.0, 2.0;
    s.check(std::abs(laplacian_nll(pred, Eigen::VectorXd::Constant(1, 0.5), gt)) < 1e-15, "zero residual, scale 0.5");
    gt << 0.0, 0.5;  // L1 residual 2.5
    const double at = laplacian_nll(pred, Eigen::VectorXd::Constant(1, 2.5), gt);
    const double lo = laplacian_nll(pred, Eigen::VectorXd::Constant(1, 2.4), gt);
    const double hi = laplacian_nll(pred, Eigen::VectorXd::Constant(1, 2.6), gt);
    s.check(at < lo && at < hi, "stationary point at scale = residual");
  });
  return s.result();
}

SuiteResult harness_suite() {
  Suite s("harness");
  s.guard("procrustes", [&] {
    Rng rng(707);
    MatX3 p(8, 3);
    for (long i = 0; i < 8; ++i) p.row(i) = random_vec(rng, 1.0).transpose();
    const Mat3 r = uniform_sample(rng).matrix();
    MatX3 g = 2.0 * p * r.transpose();
    g.rowwise() += Eigen::RowVector3d(0.3, -1.0, 2.0);
    s.check((procrustes_align(p, g) - g).cwiseAbs().maxCoeff() < 1e-9, "exact similarity recovery");
  });
  s.guard("determinism", [&] {
    const BodyModelDef m = make_toy_model();
    DatasetConfig dc;
    dc.scenes = 4;
    const auto a = gen_dataset(m, dc, 808);
    const auto b = gen_dataset(m, dc, 808);
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i].to_json().dump() == b[i].to_json().dump();
    s.check(same, "dataset generation is deterministic");
    DatasetConfig clean = dc;
    clean.noise.laplace_scale = 0.0;
    const auto c = gen_dataset(m, clean, 808);
    bool exact = true;
    for (const auto& sc : c) exact = exact && sc.views[0].anchors_2d == sc.gt_anchors[0];
    s.check(exact, "zero noise leaves anchors untouched");
  });
  return s.result();
}

}  // namespace

std::vector<SuiteResult> run_selftest(bool flow_only) {
  if (flow_only) return {mobius_suite()};
  return {rot3_suite(), diffgraph_suite(), so3dist_suite(), mobius_suite(),
          bodymodel_suite(), pliks_suite(),   harness_suite()};
}

json selftest_report(const std::vector<SuiteResult>& suites) {
  json out = json::array();
  bool all = true;
  for (const auto& r : suites) {
    out.push_back({{"suite", r.name}, {"checks", r.checks}, {"failures", r.failures}, {"messages", r.messages},
                   {"passed", r.passed()}});
    all = all && r.passed();
  }
  return {{"passed", all}, {"suites", out}};
}

std::string selftest_table(const std::vector<SuiteResult>& suites) {
  std::ostringstream t;
  t << std::left << std::setw(14) << "suite" << std::right << std::setw(8) << "checks" << std::setw(10) << "failures"
    << "  status\n";
  for (const auto& r : suites) {
    t << std::left << std::setw(14) << r.name << std::right << std::setw(8) << r.checks << std::setw(10) << r.failures
      << "  " << (r.passed() ? "PASS" : "FAIL") << "\n";
    for (const auto& m : r.messages) t << "    - " << m << "\n";
  }
  return t.str();
}

}  // namespace flowpose
