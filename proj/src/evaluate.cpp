#include <algorithm>
#include <cmath>

#include "flowpose/harness.hpp"

namespace flowpose {

using nlohmann::json;

MatX3 procrustes_align(const MatX3& pred, const MatX3& gt) {
  if (pred.rows() != gt.rows()) throw Error(ErrorKind::Shape, "procrustes point sets differ in size");
  if (pred.rows() < 3) throw Error(ErrorKind::Alignment, "procrustes needs at least three points");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const MatX3 x = pred.rowwise() - mp;
  const MatX3 y = gt.rowwise() - mg;
  const Svd3 spread = svd3(x.transpose() * x);
  if (!(spread.s[1] > 1e-12 * std::max(spread.s[0], 1e-300)) || !(spread.s[0] > 0.0)) {
    throw Error(ErrorKind::Alignment, "degenerate (collinear) point set");
  }
  const Svd3 d = svd3(x.transpose() * y);  // H = U S V^T
  Mat3 fix = Mat3::Identity();
  if ((d.v * d.u.transpose()).determinant() < 0.0) fix(2, 2) = -1.0;
  const Mat3 r = d.v * fix * d.u.transpose();
  const double s = (d.s.asDiagonal() * fix).trace() / x.squaredNorm();
  MatX3 out = s * (x * r.transpose());
  out.rowwise() += mg;
  return out;
}

PoseMetrics pose_metrics(const BodyModelDef& model, const BodyState& pred, const BodyState& gt, const Camera& view0) {
  const MatX3 p = forward_kinematics(model, pred).joints;
  const MatX3 g = forward_kinematics(model, gt).joints;
  const long k = p.rows();
  PoseMetrics m;
  const MatX3 pa = procrustes_align(p, g);
  const MatX2 pp = project(view0, p), gp = project(view0, g);
  for (long j = 0; j < k; ++j) {
    m.mpjpe += ((p.row(j) - p.row(0)) - (g.row(j) - g.row(0))).norm();
    m.pa_mpjpe += (pa.row(j) - g.row(j)).norm();
    m.abs_mpjpe += (p.row(j) - g.row(j)).norm();
    m.kp2d += (pp.row(j) - gp.row(j)).norm();
  }
  const double inv = 1.0 / static_cast<double>(k);
  m.mpjpe *= 1000.0 * inv;
  m.pa_mpjpe *= 1000.0 * inv;
  m.abs_mpjpe *= 1000.0 * inv;
  m.kp2d *= inv;
  return m;
}

std::vector<KeySpec> EvalConfig::schema() {
  std::vector<KeySpec> keys = {{"n_samples", "int", "flow samples per scene in addition to the mode"},
                               {"use_solver", "bool", "refine every candidate with the least-squares solver"},
                               {"views", "int", "cameras used per scene (the --views flag overrides)"},
                               {"scenes", "int", "evaluate the first N scenes, 0 for all"},
                               {"use_predicted_scales", "bool", "weight anchors by the scale head instead of the dataset scales"},
                               {"solver", "object", "solver settings"}};
  for (const auto& k : SolveConfig::schema()) keys.push_back({"solver." + k.key, k.type, k.help});
  return keys;
}

EvalConfig EvalConfig::from_json(const json& j) {
  const std::vector<KeySpec> keys = {{"n_samples", "", ""}, {"use_solver", "", ""},           {"views", "", ""},
                                     {"scenes", "", ""},    {"use_predicted_scales", "", ""}, {"solver", "", ""}};
  check_keys(j, keys, "eval");
  EvalConfig c;
  read_key(j, "n_samples", c.n_samples, "eval");
  read_key(j, "use_solver", c.use_solver, "eval");
  read_key(j, "views", c.views, "eval");
  read_key(j, "scenes", c.scenes, "eval");
  read_key(j, "use_predicted_scales", c.use_predicted_scales, "eval");
  if (j.contains("solver")) c.solver = SolveConfig::from_json(j.at("solver"));
  require(c.views > 0, "eval.views must be positive");
  return c;
}

json EvalConfig::to_json() const {
  return {{"n_samples", n_samples},
          {"use_solver", use_solver},
          {"views", views},
          {"scenes", scenes},
          {"use_predicted_scales", use_predicted_scales},
          {"solver", solver.to_json()}};
}

namespace {

json metrics_json(const PoseMetrics& m) {
  return {{"mpjpe_mm", m.mpjpe}, {"pa_mpjpe_mm", m.pa_mpjpe}, {"abs_mpjpe_mm", m.abs_mpjpe}, {"kp2d_px", m.kp2d}};
}

PoseMetrics elementwise_min(const PoseMetrics& a, const PoseMetrics& b) {
  return {std::min(a.mpjpe, b.mpjpe), std::min(a.pa_mpjpe, b.pa_mpjpe), std::min(a.abs_mpjpe, b.abs_mpjpe),
          std::min(a.kp2d, b.kp2d)};
}

void accumulate(PoseMetrics& acc, const PoseMetrics& m, double w) {
  acc.mpjpe += w * m.mpjpe;
  acc.pa_mpjpe += w * m.pa_mpjpe;
  acc.abs_mpjpe += w * m.abs_mpjpe;
  acc.kp2d += w * m.kp2d;
}

// Places the body so its anchor centroid projects onto the observed one at
// the depth where the image-plane spreads agree. Always in front of the camera.
Vec3 weak_perspective_translation(const BodyModelDef& model, const BodyState& state, const Observation& obs) {
  BodyState at_origin = state;
  at_origin.translation = Vec3::Zero();
  const MatX3 verts = forward_kinematics(model, at_origin).vertices;
  const Mat3 re = obs.extrinsic_rotation.matrix();
  double wsum = 0.0;
  Vec3 m = Vec3::Zero();
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (std::size_t a = 0; a < model.anchor_indices.size(); ++a) {
    const double w = obs.aux_weight[static_cast<long>(a)];
    m += w * verts.row(model.anchor_indices[a]).transpose();
    c += w * obs.anchors_2d.row(static_cast<long>(a)).transpose();
    wsum += w;
  }
  if (!(wsum > 0.0)) throw Error(ErrorKind::Contract, "no visible anchors");
  m /= wsum;
  c /= wsum;
  double spread3 = 0.0, spread2 = 0.0;
  for (std::size_t a = 0; a < model.anchor_indices.size(); ++a) {
    const double w = obs.aux_weight[static_cast<long>(a)];
    const Vec3 d = re * (verts.row(model.anchor_indices[a]).transpose() - m);
    spread3 += w * d.head<2>().squaredNorm();
    spread2 += w * (obs.anchors_2d.row(static_cast<long>(a)).transpose() - c).squaredNorm();
  }
  const double f = obs.intrinsics(0, 0), cx = obs.intrinsics(0, 2), cy = obs.intrinsics(1, 2);
  const double z = spread2 > 0.0 ? f * std::sqrt(spread3 / spread2) : 1.0;
  const Vec3 centroid_cam(z * (c.x() - cx) / f, z * (c.y() - cy) / f, z);
  return re.transpose() * (centroid_cam - obs.extrinsic_translation) - m;
}

}  // namespace

json EvalReport::to_json(const EvalConfig& cfg) const {
  json per_scene = {{"mode_mpjpe_mm", json::array()},     {"min_mpjpe_mm", json::array()},
                    {"mode_pa_mpjpe_mm", json::array()},  {"min_pa_mpjpe_mm", json::array()},
                    {"mode_abs_mpjpe_mm", json::array()}, {"min_abs_mpjpe_mm", json::array()},
                    {"mode_kp2d_px", json::array()},      {"min_kp2d_px", json::array()}};
  for (const auto& s : scenes) {
    per_scene["mode_mpjpe_mm"].push_back(s.mode.mpjpe);
    per_scene["min_mpjpe_mm"].push_back(s.best.mpjpe);
    per_scene["mode_pa_mpjpe_mm"].push_back(s.mode.pa_mpjpe);
    per_scene["min_pa_mpjpe_mm"].push_back(s.best.pa_mpjpe);
    per_scene["mode_abs_mpjpe_mm"].push_back(s.mode.abs_mpjpe);
    per_scene["min_abs_mpjpe_mm"].push_back(s.best.abs_mpjpe);
    per_scene["mode_kp2d_px"].push_back(s.mode.kp2d);
    per_scene["min_kp2d_px"].push_back(s.best.kp2d);
  }
  return {{"config", cfg.to_json()},
          {"scenes", scenes.size()},
          {"solver_failures", solver_failures},
          {"mode", metrics_json(mean_mode)},
          {"min", metrics_json(mean_best)},
          {"per_scene", per_scene}};
}

BodyState estimate_state(const BodyModelDef& model, const SceneRecord& scene, std::size_t views,
                         const std::vector<std::vector<Rotation>>& per_view_poses,
                         const std::vector<Eigen::VectorXd>& per_view_scales, const std::vector<double>& beta_prior,
                         const EvalConfig& cfg) {
  if (views == 0 || views > scene.views.size()) throw Error(ErrorKind::Contract, "scene has fewer views than requested");
  std::vector<Observation> obs(scene.views.begin(), scene.views.begin() + static_cast<long>(views));
  for (std::size_t v = 0; v < views; ++v) {
    if (v < per_view_scales.size()) obs[v].laplace_scale = per_view_scales[v];
  }
  SolveConfig sc = cfg.solver;
  if (sc.beta_prior.empty()) sc.beta_prior = beta_prior;
  if (!cfg.use_solver) {
    sc.optimize_pose = false;
    sc.optimize_shape = false;
  }
  const SolveResult r = solve_multi_view(model, per_view_poses, obs, sc);
  return {r.pose, r.beta, r.translation};
}

EvalReport evaluate(const BodyModelDef& model, const Pipeline& pipe, const std::vector<SceneRecord>& data,
                    const EvalConfig& cfg, std::uint64_t seed, Backend backend) {
  const std::size_t count = cfg.scenes == 0 ? data.size() : std::min(cfg.scenes, data.size());
  if (count == 0) throw Error(ErrorKind::Contract, "evaluation needs at least one scene");
  const FlowModel& flow = pipe.flow();
  EvalReport report;
  report.scenes.resize(count);
  std::vector<std::size_t> failures(count, 0);

  parallel_for(count, backend, [&](std::size_t i) {
    const SceneRecord& scene = data[i];
    const std::size_t V = cfg.views;
    if (V > scene.views.size()) throw Error(ErrorKind::Contract, "scene has fewer views than requested");
    Rng rng = Rng::stream(seed, i);
    std::vector<Rotation> roots(V);
    std::vector<Eigen::VectorXd> scales(V);
    std::vector<std::vector<Rotation>> modes(V);
    std::vector<std::vector<PoseSample>> samples(V);
    std::vector<double> beta(model.shape_dim(), 0.0);
    for (std::size_t v = 0; v < V; ++v) {
      const std::vector<double> ctx = pipe.context(scene.context_features[v]);
      roots[v] = flow.global_rotation(pipe.store(), ctx);
      scales[v] = cfg.use_predicted_scales ? pipe.anchor_scales(ctx) : scene.views[v].laplace_scale;
      const DiagGaussian shape = flow.shape_distribution(pipe.store(), ctx);
      for (std::size_t c = 0; c < beta.size(); ++c) beta[c] += shape.mean[c] / static_cast<double>(V);
      modes[v] = flow.mode(pipe.store(), ctx).joint_rotations;
      if (cfg.n_samples > 0) samples[v] = flow.sample(pipe.store(), ctx, cfg.n_samples, rng);
    }
    const Camera view0{scene.views[0].intrinsics, scene.views[0].extrinsic_rotation,
                       scene.views[0].extrinsic_translation};

    auto candidate = [&](std::size_t c) {  // c == 0: mode, else sample c - 1
      std::vector<std::vector<Rotation>> poses(V);
      for (std::size_t v = 0; v < V; ++v) {
        poses[v].push_back(roots[v]);
        const auto& joints = c == 0 ? modes[v] : samples[v][c - 1].joint_rotations;
        poses[v].insert(poses[v].end(), joints.begin(), joints.end());
      }
      BodyState est;
      try {
        est = estimate_state(model, scene, V, poses, scales, beta, cfg);
      } catch (const Error& e) {
        if (!cfg.use_solver || !is_numerical(e.kind())) throw;
        ++failures[i];
        EvalConfig fallback = cfg;
        fallback.use_solver = false;
        try {
          est = estimate_state(model, scene, V, poses, scales, beta, fallback);
        } catch (const Error& again) {
          if (!is_numerical(again.kind())) throw;
          est.pose = poses[0];
          est.pose[0] = scene.views[0].extrinsic_rotation.inverse() * roots[0];
          est.shape = beta;
          est.translation = weak_perspective_translation(model, est, scene.views[0]);
        }
      }
      return pose_metrics(model, est, scene.gt_state, view0);
    };

    SceneEval& out = report.scenes[i];
    out.mode = candidate(0);
    out.best = out.mode;
    for (std::size_t c = 1; c <= cfg.n_samples; ++c) {
      const PoseMetrics m = candidate(c);
      out.sample_mpjpe.push_back(m.mpjpe);
      out.best = elementwise_min(out.best, m);
    }
  });

  const double w = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < count; ++i) {
    accumulate(report.mean_mode, report.scenes[i].mode, w);
    accumulate(report.mean_best, report.scenes[i].best, w);
    report.solver_failures += failures[i];
  }
  return report;
}

}  // namespace flowpose
