// Acceptance suite: one PASS/FAIL line per criterion.
//
// usage: acceptance <path to flowpose executable>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "flowpose/diffrot.hpp"
#include "flowpose/harness.hpp"

using namespace flowpose;
using dg::Tape;
using dg::Tensor;
using dg::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;
const fs::path kSource = FLOWPOSE_SOURCE_DIR;

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << "\n";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double angle_between(const Vec3& a, const Vec3& b) { return std::atan2(a.cross(b).norm(), a.dot(b)); }

// The trained model and datasets shared by several criteria, built from the
// bundled configs.
struct World {
  BodyModelDef model = make_toy_model();
  std::vector<SceneRecord> train_data, eval_data, ambiguous_data;
  std::optional<Pipeline> pipe;
  double seconds = 0.0;

  void build() {
    const auto t0 = std::chrono::steady_clock::now();
    const json train_cfg = read_json(kSource / "configs/train.json");
    train_data = gen_dataset(model, DatasetConfig::from_json(read_json(kSource / "configs/data_train.json").at("dataset")), 1);
    eval_data = gen_dataset(model, DatasetConfig::from_json(read_json(kSource / "configs/data_eval.json").at("dataset")), 2);
    ambiguous_data =
        gen_dataset(model, DatasetConfig::from_json(read_json(kSource / "configs/data_ambiguous.json").at("dataset")), 3);
    pipe = Pipeline::create(PipelineConfig::from_json(train_cfg.at("pipeline")), model, 1);
    train(*pipe, model, train_data, TrainConfig::from_json(train_cfg.at("train")), 1);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  const FlowModel& flow() const { return pipe->flow(); }
  const dg::ParamStore& store() const { return pipe->store(); }
  std::vector<double> context(std::size_t scene) const { return pipe->context(eval_data[scene].context_features[0]); }
};

// ---------------------------------------------------------------- 1

Outcome mobius_round_trip(const World& w) {
  const FlowModel& flow = w.flow();
  const std::size_t cases = 10000, L = flow.config().layers, J = flow.config().joints;
  Rng rng(1001);
  int worst_iterations = 0;
  double worst_fwd_inv = 0.0, worst_inv_fwd = 0.0, largest_omega = 0.0;
  std::size_t over = 0;
  const std::size_t groups = 2 * L;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t layer = g / 2;
    const int sub = static_cast<int>(g % 2);
    const std::size_t n = cases / groups + (g < cases % groups ? 1 : 0);
    Tensor held(n, 3), ctx(n, flow.config().context_dim);
    RowIndex rows;
    std::vector<Vec3> moving(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Mat3 f = uniform_sample(rng).matrix();
      for (int c = 0; c < 3; ++c) held(i, c) = f(c, 0);
      moving[i] = f.col(1);
      const auto c = w.context(rng.next() % w.eval_data.size());
      for (std::size_t d = 0; d < c.size(); ++d) ctx(i, d) = c[d];
      rows.scene.push_back(static_cast<std::uint32_t>(i));
      rows.joint.push_back(static_cast<std::uint32_t>(rng.next() % J));
    }
    const auto params = flow.conditioner_params(w.store(), layer, sub, held, ctx, rows);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 h(held(i, 0), held(i, 1), held(i, 2));
      for (const Vec3& o : params[i].omegas) largest_omega = std::max(largest_omega, o.norm());
      const Vec3 y = mobius_forward(h, moving[i], params[i]).moved;
      const MobiusInverseResult inv = mobius_inverse(y, h, params[i], 1e-4);
      worst_iterations = std::max(worst_iterations, inv.iterations);
      over += inv.iterations > 18 ? 1 : 0;
      worst_fwd_inv = std::max(worst_fwd_inv, angle_between(mobius_forward(h, inv.moving, params[i]).moved, y));
      worst_inv_fwd = std::max(worst_inv_fwd, angle_between(inv.moving, moving[i]));
    }
  }
  std::ostringstream d;
  d << "trained conditioners, " << cases << " cases: max iterations " << worst_iterations << " (" << over
    << " above 18), forward(inverse) max error " << fmt(worst_fwd_inv) << " rad, inverse(forward) max error "
    << fmt(worst_inv_fwd) << " rad, largest |omega| " << fmt(largest_omega);
  return {worst_iterations <= 18 && worst_fwd_inv < 1e-4, d.str()};
}

// Informational: omegas spread uniformly over the whole admissible ball.
std::string mobius_stress() {
  Rng rng(1002);
  int worst = 0;
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Mat3 f = uniform_sample(rng).matrix();
    MobiusParams p;
    double total = 0.0;
    for (int j = 0; j < 16; ++j) {
      Vec3 dir(rng.normal(), rng.normal(), rng.normal());
      p.omegas.push_back(dir.normalized() * (1.0 - kOmegaMargin) * std::cbrt(rng.uniform()));
      p.weights.push_back(-std::log(1.0 - rng.uniform()));
      total += p.weights.back();
    }
    for (double& v : p.weights) v /= total;
    const Vec3 y = mobius_forward(f.col(0), f.col(1), p).moved;
    const int it = mobius_inverse(y, f.col(0), p, 1e-4).iterations;
    worst = std::max(worst, it);
    mean += it / static_cast<double>(n);
  }
  return "info: |omega| uniform up to " + fmt(1.0 - kOmegaMargin) + ", 16 maps: max iterations " +
         std::to_string(worst) + ", mean " + fmt(mean, 3);
}

// ---------------------------------------------------------------- 2

double block_logdet(const World& w, const Rotation& r, const std::vector<double>& ctx, std::size_t joint,
                    std::size_t layer, Mat3* out) {
  Tape tape(false);
  const auto params = w.store().bind(tape);
  RowIndex rows;
  rows.scene = {0};
  rows.joint = {static_cast<std::uint32_t>(joint)};
  Var ci = w.flow().context_rows(params, tape.constant(Tensor(1, ctx.size(), ctx)), rows);
  Tensor t(1, 9);
  mat3_to_row(r.matrix(), t, 0);
  const FlowOutput o = w.flow().coupling_block(params, layer, tape.constant(t), ci);
  *out = row_to_mat3(o.base_point.value(), 0);
  return o.logdet.item();
}

Outcome volume_element(const World& w) {
  Rng rng(2001);
  double worst = 0.0;
  const double h = 1e-5;
  for (int t = 0; t < 1000; ++t) {
    const Rotation r = uniform_sample(rng);
    const auto ctx = w.context(rng.next() % w.eval_data.size());
    const std::size_t joint = rng.next() % w.flow().config().joints, layer = rng.next() % w.flow().config().layers;
    Mat3 centre;
    const double logdet = block_logdet(w, r, ctx, joint, layer, &centre);
    const Rotation c = Rotation::from_matrix(special_orthogonalize_matrix(centre));
    Mat3 jac;
    for (int d = 0; d < 3; ++d) {
      Vec3 e = Vec3::Zero();
      e[d] = h;
      Mat3 plus, minus;
      block_logdet(w, r * axis_angle_exp(e), ctx, joint, layer, &plus);
      block_logdet(w, r * axis_angle_exp(-e), ctx, joint, layer, &minus);
      const Vec3 wp = axis_angle_log(c.inverse() * Rotation::from_matrix(special_orthogonalize_matrix(plus)));
      const Vec3 wm = axis_angle_log(c.inverse() * Rotation::from_matrix(special_orthogonalize_matrix(minus)));
      jac.col(d) = (wp - wm) / (2 * h);
    }
    const double analytic = std::exp(logdet), numeric = std::abs(jac.determinant());
    worst = std::max(worst, std::abs(analytic - numeric) / numeric);
  }

  std::vector<Tensor> point;
  for (std::size_t i = 0; i < w.store().size(); ++i) point.push_back(w.store().tensor(i));
  Tensor rot(4, 9), ctx(2, w.flow().config().context_dim);
  for (std::size_t i = 0; i < 4; ++i) mat3_to_row(uniform_sample(rng).matrix(), rot, i);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto c = w.context(s);
    for (std::size_t d = 0; d < c.size(); ++d) ctx(s, d) = c[d];
  }
  const RowIndex rows = RowIndex::grid(2, 2);
  double grad_err = 0.0;
  bool grads_ok = true;
  for (std::size_t layer = 0; layer < w.flow().config().layers; ++layer) {
    const auto rep = dg::finite_diff_check(
        [&](Tape& tape, std::span<const Var> p) {
          Var ci = w.flow().context_rows(p, tape.constant(ctx), rows);
          return dg::sum(w.flow().coupling_block(p, layer, tape.constant(rot), ci).logdet);
        },
        point, 1e-6, 1e-5);
    grads_ok = grads_ok && rep.passed;
    grad_err = std::max(grad_err, rep.max_rel_error);
  }
  return {worst < 1e-4 && grads_ok, "1000 cases: max relative |det| error " + fmt(worst) +
                                        "; parameter gradient check max relative error " + fmt(grad_err)};
}

// ---------------------------------------------------------------- 3

double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

// Haar-uniform rotations from a randomly shifted Halton sequence through the
// subgroup algorithm; every point is marginally uniform on SO(3).
Tensor shifted_halton_rotations(std::size_t n, Rng& rng) {
  const double shift[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
  const std::uint64_t bases[3] = {2, 3, 5};
  Tensor out(n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    double u[3];
    for (int d = 0; d < 3; ++d) {
      u[d] = radical_inverse(i + 1, bases[d]) + shift[d];
      u[d] -= std::floor(u[d]);
    }
    const double a = std::sqrt(1.0 - u[0]), b = std::sqrt(u[0]);
    const double t1 = 2.0 * kPi * u[1], t2 = 2.0 * kPi * u[2];
    mat3_to_row(Rotation::from_quaternion(b * std::cos(t2), a * std::sin(t1), a * std::cos(t1), b * std::sin(t2)).matrix(),
                out, i);
  }
  return out;
}

Outcome exact_density(const World& w) {
  const std::size_t n = 500000, n_plain = 100000;
  Rng rng(3001);
  double worst = 0.0;
  std::ostringstream d;
  d << "randomized QMC, " << n << " rotations per (context, joint):";
  std::ostringstream plain;
  plain << "; plain MC on " << n_plain << ":";
  for (std::size_t c = 0; c < 5; ++c) {
    const auto ctx = w.context(rng.next() % w.eval_data.size());
    const std::uint32_t joint = static_cast<std::uint32_t>(c % w.flow().config().joints);
    auto integrate = [&](const Tensor& rot, double* se) {
      RowIndex rows;
      rows.scene.assign(rot.rows(), 0u);
      rows.joint.assign(rot.rows(), joint);
      const auto lp = w.flow().log_prob_batch(w.store(), rot, Tensor(1, ctx.size(), ctx), rows, Backend::Serial);
      double s = 0.0, s2 = 0.0;
      for (double v : lp) {
        s += std::exp(v);
        s2 += std::exp(2.0 * v);
      }
      const double m = s / static_cast<double>(lp.size());
      if (se) *se = std::sqrt((s2 / static_cast<double>(lp.size()) - m * m) / static_cast<double>(lp.size()));
      return m;
    };
    const double z = integrate(shifted_halton_rotations(n, rng), nullptr);
    worst = std::max(worst, std::abs(z - 1.0));
    d << " " << fmt(z, 5);
    Tensor uni(n_plain, 9);
    for (std::size_t i = 0; i < n_plain; ++i) mat3_to_row(uniform_sample(rng).matrix(), uni, i);
    double se = 0.0;
    const double zp = integrate(uni, &se);
    plain << " " << fmt(zp, 4) << "+-" << fmt(se, 2);
  }
  return {worst < 0.02, d.str() + plain.str()};
}

// ---------------------------------------------------------------- 4

Outcome toy_reproduction() {
  const ToyFitConfig cfg = ToyFitConfig::from_json(read_json(kSource / "configs/toy.json").at("toy"));
  const std::uint64_t seed = 4001;
  Rng rng = Rng::stream(seed, 0);
  const auto modes = toy_modes(cfg, rng);
  const ToyFitReport r = fit_toy_distribution(modes, cfg, seed);
  bool per_mode = true;
  std::ostringstream d;
  d << cfg.steps << " steps, " << cfg.eval_samples << " samples: captured " << fmt(r.captured_total, 4) << ", per mode";
  for (double c : r.captured) {
    per_mode = per_mode && std::abs(c - 0.25) <= 0.10;
    d << " " << fmt(c, 3);
  }
  d << ", NLL " << fmt(r.nll_initial) << " -> " << fmt(r.nll_trained);
  return {cfg.steps <= 20000 && cfg.eval_samples >= 10000 && modes.size() == 4 && r.captured_total >= 0.9 && per_mode &&
              r.nll_trained < 0.0,
          d.str()};
}

// ---------------------------------------------------------------- 5

template <class F>
double simpson(F f, double a, double b, int intervals) {
  const double h = (b - a) / intervals;
  double s = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

Outcome base_distributions() {
  Rng rng(5001);
  const int bins = 36, n = 200000;
  double worst_kl = 0.0;
  bool hemisphere = true;
  std::ostringstream d;
  d << "pig histogram KL";
  for (double kappa : {1.0, 2.0, 3.0}) {
    const ProjectedIsoGaussian p(Rotation::identity(), kappa);
    std::vector<double> counts(bins, 0.0);
    for (int i = 0; i < n; ++i) {
      const Rotation r = pig_sample(p, rng);
      hemisphere = hemisphere && r.w() >= 0.0;
      counts[std::min(bins - 1, static_cast<int>(r.angle() / kPi * bins))] += 1.0;
    }
    auto density = [&](double a) {
      return std::exp(pig_logpdf(p, axis_angle_exp(Vec3(0, 0, a)))) * haar_angle_density(a);
    };
    double kl = 0.0;
    for (int b = 0; b < bins; ++b) {
      const double model = simpson(density, kPi * b / bins, kPi * (b + 1) / bins, 200);
      const double emp = counts[b] / n;
      if (emp > 0.0) kl += emp * std::log(emp / model);
    }
    worst_kl = std::max(worst_kl, kl);
    d << " k=" << kappa << ":" << fmt(kl, 3);
  }
  double worst_norm = 0.0;
  d << "; IGSO3 normalization";
  for (double eps : {0.1, 0.25, 0.5, 1.0, 2.0}) {
    const double z = simpson([&](double a) { return igso3_density_angle(a, eps) * haar_angle_density(a); }, 0.0, kPi, 20000);
    worst_norm = std::max(worst_norm, std::abs(z - 1.0));
    d << " eps=" << eps << ":" << fmt(z, 6);
  }
  d << "; hemisphere " << (hemisphere ? "ok" : "violated");
  return {worst_kl < 0.05 && worst_norm < 0.01 && hemisphere, d.str()};
}

// ---------------------------------------------------------------- 6

Outcome solver_exactness(const World& w) {
  DatasetConfig dc = DatasetConfig::from_json(read_json(kSource / "configs/data_eval.json").at("dataset"));
  dc.scenes = 100;
  dc.noise.laplace_scale = 0.0;
  const auto data = gen_dataset(w.model, dc, 6001);
  Rng rng(6002);
  double worst_t = 0.0, worst_res = 0.0, worst_perturbed = 0.0;
  for (const auto& sc : data) {
    const SolveResult r = solve_single_view(w.model, sc.gt_state.pose, sc.views[0], SolveConfig{});
    worst_t = std::max(worst_t, (r.translation - sc.gt_state.translation).norm());
    worst_res = std::max(worst_res, r.weighted_rms_residual);
    std::vector<Rotation> init = sc.gt_state.pose;
    for (auto& q : init) {
      Vec3 axis(rng.normal(), rng.normal(), rng.normal());
      q = q * axis_angle_exp(axis.normalized() * (10.0 * kPi / 180.0));
    }
    SolveConfig cfg;
    cfg.max_relinearizations = 2;
    worst_perturbed = std::max(worst_perturbed, solve_single_view(w.model, init, sc.views[0], cfg).weighted_rms_residual);
  }
  return {worst_t < 1e-4 && worst_res < 1e-6 && worst_perturbed < 1.0,
          "100 scenes: max translation error " + fmt(worst_t) + " m, max residual " + fmt(worst_res) +
              " px; 10 deg init, 2 relinearizations: max residual " + fmt(worst_perturbed) + " px"};
}

// ---------------------------------------------------------------- 7

Outcome multi_view(const World& w) {
  const json j = read_json(kSource / "configs/eval_multiview.json");
  EvalConfig one = EvalConfig::from_json(j.at("eval"));
  one.views = 1;
  EvalConfig two = one;
  two.views = 2;
  const EvalReport a = evaluate(w.model, *w.pipe, w.ambiguous_data, one, 7001);
  const EvalReport b = evaluate(w.model, *w.pipe, w.ambiguous_data, two, 7001);
  const double abs_ratio = b.mean_mode.abs_mpjpe / a.mean_mode.abs_mpjpe;
  const double rel_ratio = b.mean_mode.mpjpe / a.mean_mode.mpjpe;
  std::ostringstream d;
  d << a.scenes.size() << " scenes: abs MPJPE " << fmt(a.mean_mode.abs_mpjpe) << " -> " << fmt(b.mean_mode.abs_mpjpe)
    << " mm (ratio " << fmt(abs_ratio, 3) << "), MPJPE " << fmt(a.mean_mode.mpjpe) << " -> " << fmt(b.mean_mode.mpjpe)
    << " mm, solver failures " << a.solver_failures << "/" << b.solver_failures;
  return {a.scenes.size() == 200 && abs_ratio < 0.5 && rel_ratio <= 1.1, d.str()};
}

// ---------------------------------------------------------------- 8

Outcome sampling_protocol(const World& w) {
  const EvalConfig cfg = EvalConfig::from_json(read_json(kSource / "configs/eval.json").at("eval"));
  const EvalReport r = evaluate(w.model, *w.pipe, w.eval_data, cfg, 8001);
  std::size_t violations = 0;
  for (const auto& s : r.scenes) {
    violations += s.best.mpjpe > s.mode.mpjpe || s.best.pa_mpjpe > s.mode.pa_mpjpe || s.best.abs_mpjpe > s.mode.abs_mpjpe;
  }
  const double margin = r.mean_mode.mpjpe - r.mean_best.mpjpe;
  std::ostringstream d;
  d << r.scenes.size() << " scenes, n=" << cfg.n_samples << ": MPJPE mode " << fmt(r.mean_mode.mpjpe) << " / min "
    << fmt(r.mean_best.mpjpe) << " mm (margin " << fmt(margin) << "), PA " << fmt(r.mean_mode.pa_mpjpe) << " / "
    << fmt(r.mean_best.pa_mpjpe) << ", ordering violations " << violations;
  return {cfg.n_samples == 100 && violations == 0 && margin > 0.0, d.str()};
}

// ---------------------------------------------------------------- 9

Outcome laplacian() {
  Rng rng(9001);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    MatX2 pred(1, 2), gt(1, 2);
    pred << rng.normal(), rng.normal();
    gt << rng.normal(), rng.normal();
    const double r = (pred - gt).cwiseAbs().sum();
    // golden-section search over log scale
    double lo = std::log(r) - 5.0, hi = std::log(r) + 5.0;
    auto f = [&](double ls) { return laplacian_nll(pred, Eigen::VectorXd::Constant(1, std::exp(ls)), gt); };
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int i = 0; i < 200; ++i) {
      const double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
      (f(a) < f(b) ? hi : lo) = f(a) < f(b) ? b : a;
    }
    worst = std::max(worst, std::abs(std::exp(0.5 * (lo + hi)) - r) / r);
  }
  const long n = 16;
  Tensor pred(n, 2), gt(n, 2), scale(n, 1);
  for (double& v : pred.vec()) v = 3.0 * rng.normal();
  for (double& v : gt.vec()) v = 3.0 * rng.normal();
  for (double& v : scale.vec()) v = 0.5 + 2.0 * rng.uniform();
  const auto rep = dg::finite_diff_check(
      [&](Tape& tape, std::span<const Var> p) { return laplacian_nll(p[0], p[1], tape.constant(gt)); },
      std::vector<Tensor>{pred, scale}, 1e-6, 1e-6);
  return {worst < 1e-6 && rep.passed, "numeric argmin vs residual: max relative gap " + fmt(worst) +
                                          "; gradient check max relative error " + fmt(rep.max_rel_error)};
}

// ---------------------------------------------------------------- 10

Outcome determinism(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / "flowpose_acceptance_determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& args, const fs::path& log) {
    const std::string cmd = "\"" + cli + "\" " + args + " --threads 1 > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
  };
  std::vector<std::string> problems;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    write_json(dir / "data.json", {{"dataset", {{"scenes", 24}, {"noise", {{"laplace_scale", 2.0}}}}}});
    write_json(dir / "train.json",
               {{"data", (dir / "dataset.jsonl").string()},
                {"pipeline",
                 {{"encoder_hidden", 16},
                  {"flow",
                   {{"context_dim", 8}, {"layers", 2}, {"transforms", 4}, {"hidden", 16}, {"blocks", 1}, {"embed_dim", 2}, {"head_hidden", 16}}}}},
                {"train", {{"phase1_epochs", 2}, {"phase2_epochs", 1}, {"batch_size", 8}}}});
    write_json(dir / "eval.json", {{"checkpoint", (dir / "checkpoint").string()},
                                   {"data", (dir / "dataset.jsonl").string()},
                                   {"eval", {{"n_samples", 5}, {"scenes", 8}, {"solver", {{"omega_beta", 1e3}, {"gamma", 1e3}}}}}});
    const std::string out = " --out \"" + dir.string() + "\" --seed 10";
    if (run("selftest" + out, dir / "selftest.log") != 0) problems.push_back(std::string(name) + ": selftest failed");
    if (run("gen-data --config \"" + (dir / "data.json").string() + "\"" + out, dir / "gen.log") != 0)
      problems.push_back(std::string(name) + ": gen-data failed");
    if (run("train --config \"" + (dir / "train.json").string() + "\"" + out, dir / "train.log") != 0)
      problems.push_back(std::string(name) + ": train failed");
    if (run("eval --config \"" + (dir / "eval.json").string() + "\"" + out, dir / "eval.log") != 0)
      problems.push_back(std::string(name) + ": eval failed");
  }
  std::size_t compared = 0;
  for (const char* file : {"selftest.json", "dataset.jsonl", "dataset_config.json", "checkpoint.json", "checkpoint.bin",
                           "train_log.csv", "metrics.json"}) {
    const fs::path a = root / "a" / file, b = root / "b" / file;
    if (!fs::exists(a) || !fs::exists(b)) {
      problems.push_back(std::string("missing ") + file);
      continue;
    }
    ++compared;
    if (slurp(a) != slurp(b)) problems.push_back(std::string(file) + " differs");
  }
  std::string d = std::to_string(compared) + " artifacts compared across two runs";
  for (const auto& p : problems) d += "; " + p;
  if (problems.empty()) fs::remove_all(root);
  return {problems.empty() && compared == 7, d};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <flowpose executable>\n";
    return 2;
  }
  const std::string cli = argv[1];
  World world;
  bool built = false;
  std::string build_error;
  try {
    world.build();
    built = true;
    std::cout << "trained the bundled model in " << fmt(world.seconds, 3) << " s\n";
  } catch (const std::exception& e) {
    build_error = e.what();
  }

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    bool needs_world;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "Mobius round trip", 10, true, [&] { return mobius_round_trip(world); }},
      {2, "volume element", 60, true, [&] { return volume_element(world); }},
      {3, "exact density", 300, true, [&] { return exact_density(world); }},
      {4, "toy reproduction", 1800, false, [] { return toy_reproduction(); }},
      {5, "base distributions", 120, false, [] { return base_distributions(); }},
      {6, "solver exactness", 60, true, [&] { return solver_exactness(world); }},
      {7, "multi-view trend", 300, true, [&] { return multi_view(world); }},
      {8, "sampling protocol", 0, true, [&] { return sampling_protocol(world); }},
      {9, "Laplacian NLL", 0, false, [] { return laplacian(); }},
      {10, "determinism", 0, false, [&] { return determinism(cli); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    if (c.needs_world && !built) {
      o = {false, "shared model could not be built: " + build_error};
    } else {
      try {
        o = c.run();
      } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
      }
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0.0 || s < c.budget_s;
    const bool pass = o.pass && in_time;
    failed += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << std::setw(2) << c.id << " " << c.name << ": " << o.detail
              << " [" << fmt(s, 3) << " s" << (c.budget_s > 0.0 ? " of " + fmt(c.budget_s, 4) : std::string()) << "]"
              << std::endl;
    if (c.id == 1) std::cout << "     " << mobius_stress() << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
