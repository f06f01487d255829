#include "flowpose/pliks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowpose/jsonio.hpp"

namespace flowpose {

using nlohmann::json;

void Observation::validate() const {
  const long n = anchors_2d.rows();
  if (laplace_scale.size() != n || aux_weight.size() != n) {
    throw Error(ErrorKind::Shape, "observation arrays must all have one entry per anchor");
  }
  if (!anchors_2d.allFinite()) throw Error(ErrorKind::Contract, "observation anchors must be finite");
  for (long i = 0; i < n; ++i) {
    if (!(laplace_scale[i] > 0.0) || !std::isfinite(laplace_scale[i])) {
      throw Error(ErrorKind::Contract, "laplace_scale must be positive and finite");
    }
    if (!(aux_weight[i] >= 0.0) || !std::isfinite(aux_weight[i])) {
      throw Error(ErrorKind::Contract, "aux_weight must be finite and nonnegative");
    }
  }
  const Eigen::Vector4d last = intrinsics.row(2).transpose();
  if ((last - Eigen::Vector4d(0, 0, 1, 0)).cwiseAbs().maxCoeff() > 1e-12 || !intrinsics.allFinite()) {
    throw Error(ErrorKind::InvalidRig, "intrinsics third row must be (0, 0, 1, 0)");
  }
  if (!extrinsic_translation.allFinite()) throw Error(ErrorKind::InvalidRig, "extrinsic translation must be finite");
}

json Observation::to_json() const {
  return {{"anchors_2d", rows_to_json(anchors_2d)},
          {"laplace_scale", vector_to_json(laplace_scale)},
          {"aux_weight", vector_to_json(aux_weight)},
          {"intrinsics", rows_to_json(intrinsics)},
          {"extrinsic_rotation", rotation_to_json(extrinsic_rotation)},
          {"extrinsic_translation", vec3_to_json(extrinsic_translation)}};
}

Observation Observation::from_json(const json& j) {
  Observation o;
  try {
    o.anchors_2d = rows_from_json<MatX2>(j.at("anchors_2d"), 2);
    o.laplace_scale = vector_from_json(j.at("laplace_scale"));
    o.aux_weight = j.contains("aux_weight") ? vector_from_json(j.at("aux_weight"))
                                            : Eigen::VectorXd::Ones(o.anchors_2d.rows()).eval();
    const auto k = rows_from_json<Eigen::MatrixXd>(j.at("intrinsics"), 4);
    if (k.rows() != 3) throw Error(ErrorKind::InvalidRig, "intrinsics must be 3 x 4");
    o.intrinsics = k;
    if (j.contains("extrinsic_rotation")) o.extrinsic_rotation = rotation_from_json(j.at("extrinsic_rotation"));
    if (j.contains("extrinsic_translation")) o.extrinsic_translation = vec3_from_json(j.at("extrinsic_translation"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Load, std::string("observation: ") + e.what());
  }
  o.validate();
  return o;
}

Intrinsics pinhole(double focal, double cx, double cy) {
  Intrinsics k = Intrinsics::Zero();
  k(0, 0) = focal;
  k(1, 1) = focal;
  k(0, 2) = cx;
  k(1, 2) = cy;
  k(2, 2) = 1.0;
  return k;
}

MatX2 project(const Intrinsics& k, const Rotation& r, const Vec3& t, const MatX3& points) {
  const Mat3 rm = r.matrix();
  MatX2 out(points.rows(), 2);
  for (long i = 0; i < points.rows(); ++i) {
    const Vec3 x = rm * points.row(i).transpose() + t;
    const Eigen::Vector3d h = k.leftCols<3>() * x + k.col(3);
    if (!(h.z() > 1e-6)) throw Error(ErrorKind::BehindCamera, "point at or behind the camera plane");
    out(i, 0) = h.x() / h.z();
    out(i, 1) = h.y() / h.z();
  }
  return out;
}

std::vector<KeySpec> SolveConfig::schema() {
  return {{"omega_beta", "float", "weight of the shape prior rows"},
          {"gamma", "float", "weight of the pose prior rows"},
          {"beta_prior", "float[]", "shape the prior pulls toward (default zeros)"},
          {"pose_prior", "quat[]", "rotations the pose prior pulls toward (default the initial pose)"},
          {"max_relinearizations", "int", "extra linearize-and-solve rounds"},
          {"optimize_pose", "bool", "solve for joint rotation updates"},
          {"optimize_shape", "bool", "solve for shape coefficients"}};
}

SolveConfig SolveConfig::from_json(const json& j) {
  const auto keys = schema();
  check_keys(j, keys, "solver");
  SolveConfig c;
  read_key(j, "omega_beta", c.omega_beta, "solver");
  read_key(j, "gamma", c.gamma, "solver");
  read_key(j, "beta_prior", c.beta_prior, "solver");
  if (j.contains("pose_prior")) c.pose_prior = rotations_from_json(j.at("pose_prior"));
  read_key(j, "max_relinearizations", c.max_relinearizations, "solver");
  read_key(j, "optimize_pose", c.optimize_pose, "solver");
  read_key(j, "optimize_shape", c.optimize_shape, "solver");
  require(c.omega_beta >= 0.0 && c.gamma >= 0.0, "solver weights must be nonnegative");
  require(c.max_relinearizations >= 0, "solver.max_relinearizations must be nonnegative");
  return c;
}

json SolveConfig::to_json() const {
  json j = {{"omega_beta", omega_beta},
            {"gamma", gamma},
            {"beta_prior", beta_prior},
            {"max_relinearizations", max_relinearizations},
            {"optimize_pose", optimize_pose},
            {"optimize_shape", optimize_shape}};
  if (!pose_prior.empty()) j["pose_prior"] = rotations_to_json(pose_prior);
  return j;
}

json SolveResult::to_json() const {
  json deltas = json::array();
  for (const auto& d : delta_vectors) deltas.push_back(vec3_to_json(d));
  return {{"delta_vectors", deltas},
          {"delta_rotations", rotations_to_json(delta_rotations)},
          {"pose", rotations_to_json(pose)},
          {"beta", beta},
          {"translation", vec3_to_json(translation)},
          {"weighted_rms_residual", weighted_rms_residual},
          {"per_anchor_residuals", per_anchor_residuals},
          {"linearizations", linearizations}};
}

Eigen::VectorXd anchor_weights(const Eigen::VectorXd& laplace_scale, const Eigen::VectorXd& aux_weight) {
  if (laplace_scale.size() != aux_weight.size()) throw Error(ErrorKind::Shape, "weight inputs differ in length");
  return aux_weight.array() / (laplace_scale.array() + 1e-6);
}

namespace {

// Posed anchor positions (without translation) for a fixed pose.
MatX3 posed_points(const BodyModelDef& m, std::span<const Rotation> pose, std::span<const double> beta) {
  BodyState s;
  s.pose.assign(pose.begin(), pose.end());
  s.shape.assign(beta.begin(), beta.end());
  return forward_kinematics(m, s).vertices;
}

struct Columns {
  std::vector<int> map;  // full index -> active index or -1
  std::size_t active = 0;
};

Columns active_columns(std::size_t k, std::size_t s, const SolveConfig& cfg) {
  Columns c;
  c.map.assign(3 * k + s + 3, -1);
  int next = 0;
  for (std::size_t i = 0; i < c.map.size(); ++i) {
    const bool pose = i < 3 * k;
    const bool shape = i >= 3 * k && i < 3 * k + s;
    if ((pose && !cfg.optimize_pose) || (shape && !cfg.optimize_shape)) continue;
    c.map[i] = next++;
  }
  c.active = static_cast<std::size_t>(next);
  return c;
}

}  // namespace

LinearSystem assemble_system(const BodyModelDef& model, std::span<const Rotation> pose_init,
                             std::span<const double> beta_lin, std::span<const Observation> obs,
                             const SolveConfig& cfg, std::span<const Rotation> pose_anchor) {
  const std::size_t k = model.num_joints();
  const std::size_t s = model.shape_dim();
  if (obs.empty()) throw Error(ErrorKind::Contract, "at least one observation is required");
  if (pose_init.size() != k) throw Error(ErrorKind::Shape, "initial pose length does not match the model");
  if (beta_lin.size() != s) throw Error(ErrorKind::Shape, "shape linearization point has the wrong length");
  if (!pose_anchor.empty() && pose_anchor.size() != k) throw Error(ErrorKind::Shape, "pose prior length mismatch");
  if (!cfg.beta_prior.empty() && cfg.beta_prior.size() != s) throw Error(ErrorKind::Shape, "beta_prior length mismatch");
  const std::size_t na = model.anchor_indices.size();
  for (const auto& o : obs) {
    o.validate();
    if (o.size() != na) throw Error(ErrorKind::Shape, "observation anchor count does not match the model");
  }

  const Columns cols = active_columns(k, s, cfg);
  const std::size_t n = cols.active;
  const std::size_t full = 3 * k + s + 3;

  // linearization: rest geometry and chain at (pose_init, beta_lin)
  const MatX3 rest = shape_blend(model, beta_lin);
  const MatX3 rest_joints = regress_joints(model, rest);
  const JointTransforms chain = chain_transforms(model, pose_init, rest_joints);
  const MatX3 p0 = posed_points(model, pose_init, beta_lin);
  std::vector<MatX3> shape_dir(s);
  for (std::size_t c = 0; c < s; ++c) {
    std::vector<double> b(beta_lin.begin(), beta_lin.end());
    b[c] += 1.0;
    shape_dir[c] = posed_points(model, pose_init, b) - p0;  // exact: positions are linear in beta
  }
  std::vector<std::vector<int>> ancestors(k);
  for (std::size_t j = 0; j < k; ++j) {
    for (int a = static_cast<int>(j); a >= 0; a = model.parents[a]) ancestors[j].push_back(a);
  }

  LinearSystem sys;
  sys.a = Eigen::MatrixXd::Zero(static_cast<long>(n), static_cast<long>(n));
  sys.b = Eigen::VectorXd::Zero(static_cast<long>(n));
  Eigen::VectorXd row(static_cast<long>(full));
  Eigen::VectorXd active(static_cast<long>(n));
  auto push = [&](const Eigen::VectorXd& r, double rhs) {
    for (std::size_t i = 0; i < full; ++i) {
      if (cols.map[i] >= 0) active[cols.map[i]] = r[static_cast<long>(i)];
    }
    sys.a.noalias() += active * active.transpose();
    sys.b += rhs * active;
    ++sys.rows;
  };

  std::size_t informative = 0;
  Eigen::Matrix<double, 3, Eigen::Dynamic> jac(3, static_cast<long>(full));
  for (std::size_t a = 0; a < na; ++a) {
    const int v = model.anchor_indices[a];
    jac.setZero();
    for (std::size_t j = 0; j < k; ++j) {
      const double w = model.blend_weights(static_cast<long>(j), v);
      if (w == 0.0) continue;
      const Vec3 pj = chain.rotation[j] * (rest.row(v) - rest_joints.row(static_cast<long>(j))).transpose() +
                      chain.position.row(static_cast<long>(j)).transpose();
      for (int anc : ancestors[j]) {
        const Vec3 lever = pj - chain.position.row(anc).transpose();
        jac.block<3, 3>(0, 3 * anc) += -w * hat(lever) * chain.rotation[anc];
      }
    }
    for (std::size_t c = 0; c < s; ++c) jac.col(static_cast<long>(3 * k + c)) = shape_dir[c].row(v).transpose();
    jac.block<3, 3>(0, static_cast<long>(3 * k + s)) = Mat3::Identity();
    Vec3 base = p0.row(v).transpose();
    for (std::size_t c = 0; c < s; ++c) base -= beta_lin[c] * shape_dir[c].row(v).transpose();

    for (const auto& o : obs) {
      const double w = o.aux_weight[static_cast<long>(a)] / (o.laplace_scale[static_cast<long>(a)] + 1e-6);
      if (w == 0.0) continue;
      const Mat3 re = o.extrinsic_rotation.matrix();
      for (int axis = 0; axis < 2; ++axis) {
        const Eigen::Matrix<double, 1, 4> dlt =
            o.anchors_2d(static_cast<long>(a), axis) * o.intrinsics.row(2) - o.intrinsics.row(axis);
        const Vec3 a3 = dlt.head<3>().transpose();
        const Vec3 c = re.transpose() * a3;
        row = w * (c.transpose() * jac).transpose();
        const double rhs = -w * (c.dot(base) + a3.dot(o.extrinsic_translation) + dlt(3));
        push(row, rhs);
        ++informative;
      }
    }
  }

  if (cfg.optimize_shape && cfg.omega_beta > 0.0) {
    const double sw = std::sqrt(cfg.omega_beta);
    for (std::size_t c = 0; c < s; ++c) {
      row.setZero();
      row[static_cast<long>(3 * k + c)] = sw;
      push(row, sw * (cfg.beta_prior.empty() ? 0.0 : cfg.beta_prior[c]));
      ++informative;
    }
  }
  if (cfg.optimize_pose && cfg.gamma > 0.0) {
    const double sg = std::sqrt(cfg.gamma);
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 target = pose_anchor.empty() ? Vec3::Zero().eval()
                                              : axis_angle_log(pose_init[j].inverse() * pose_anchor[j]);
      for (int c = 0; c < 3; ++c) {
        row.setZero();
        row[static_cast<long>(3 * j + c)] = sg;
        push(row, sg * target[c]);
        ++informative;
      }
    }
  }
  if (informative < n) {
    throw Error(ErrorKind::Underdetermined, "only " + std::to_string(informative) + " informative rows for " +
                                                std::to_string(n) + " unknowns");
  }
  return sys;
}

double reprojection_residual(const BodyModelDef& model, const BodyState& state, std::span<const Observation> obs,
                             std::vector<double>* per_anchor) {
  const MatX3 verts = forward_kinematics(model, state).vertices;
  MatX3 anchors(static_cast<long>(model.anchor_indices.size()), 3);
  for (std::size_t a = 0; a < model.anchor_indices.size(); ++a) anchors.row(static_cast<long>(a)) = verts.row(model.anchor_indices[a]);
  if (per_anchor) per_anchor->clear();
  double num = 0.0, den = 0.0;
  for (const auto& o : obs) {
    const MatX2 proj = project(o.intrinsics, o.extrinsic_rotation, o.extrinsic_translation, anchors);
    const Eigen::VectorXd w = anchor_weights(o.laplace_scale, o.aux_weight);
    for (long a = 0; a < proj.rows(); ++a) {
      const double e = (proj.row(a) - o.anchors_2d.row(a)).norm();
      if (per_anchor) per_anchor->push_back(e);
      num += w[a] * e * e;
      den += w[a];
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

namespace {

Eigen::VectorXd solve_normal(const LinearSystem& sys) {
  Eigen::LLT<Eigen::MatrixXd> llt(sys.a);
  if (llt.info() == Eigen::Success) {
    Eigen::VectorXd x = llt.solve(sys.b);
    if (x.allFinite()) return x;
  }
  Eigen::MatrixXd jittered = sys.a;
  jittered.diagonal().array() += 1e-10;
  Eigen::LLT<Eigen::MatrixXd> retry(jittered);
  if (retry.info() != Eigen::Success) throw Error(ErrorKind::SolverFailure, "normal matrix is not positive definite");
  Eigen::VectorXd x = retry.solve(sys.b);
  if (!x.allFinite()) throw Error(ErrorKind::SolverFailure, "non-finite solution");
  return x;
}

// The linear system does not enforce positive depth.
double checked_residual(const BodyModelDef& model, const BodyState& st, std::span<const Observation> obs,
                        std::vector<double>* per_anchor) {
  try {
    return reprojection_residual(model, st, obs, per_anchor);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::BehindCamera) throw;
    throw Error(ErrorKind::SolverFailure, "solution places anchors behind a camera");
  }
}

SolveResult solve_impl(const BodyModelDef& model, std::span<const Rotation> pose_init, std::span<const Observation> obs,
                       const SolveConfig& cfg) {
  const std::size_t k = model.num_joints();
  const std::size_t s = model.shape_dim();
  std::vector<Rotation> pose(pose_init.begin(), pose_init.end());
  std::vector<double> beta = cfg.beta_prior.empty() ? std::vector<double>(s, 0.0) : cfg.beta_prior;
  const std::span<const Rotation> anchor = cfg.pose_prior.empty() ? pose_init : std::span<const Rotation>(cfg.pose_prior);
  const Columns cols = active_columns(k, s, cfg);

  SolveResult res;
  double previous = std::numeric_limits<double>::infinity();
  int increases = 0;
  for (int round = 0; round <= cfg.max_relinearizations; ++round) {
    const LinearSystem sys = assemble_system(model, pose, beta, obs, cfg, anchor);
    const Eigen::VectorXd x = solve_normal(sys);
    auto value = [&](std::size_t i) { return cols.map[i] >= 0 ? x[cols.map[i]] : 0.0; };
    double step = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 d(value(3 * j), value(3 * j + 1), value(3 * j + 2));
      step = std::max(step, d.cwiseAbs().maxCoeff());
      pose[j] = pose[j] * axis_angle_exp(d);
    }
    if (cfg.optimize_shape) {
      for (std::size_t c = 0; c < s; ++c) beta[c] = value(3 * k + c);
    }
    res.translation = Vec3(value(3 * k + s), value(3 * k + s + 1), value(3 * k + s + 2));
    res.linearizations = round + 1;

    BodyState st{pose, beta, res.translation};
    const double r = checked_residual(model, st, obs, nullptr);
    if (r > previous) {
      if (++increases >= 2) throw Error(ErrorKind::Divergence, "residual increased on two consecutive relinearizations");
    } else {
      increases = 0;
    }
    previous = r;
    if (step < 1e-6) break;
  }

  res.pose = pose;
  res.beta = beta;
  for (std::size_t j = 0; j < k; ++j) {
    const Rotation d = pose_init[j].inverse() * pose[j];
    res.delta_rotations.push_back(d);
    res.delta_vectors.push_back(axis_angle_log(d));
  }
  BodyState st{pose, beta, res.translation};
  res.weighted_rms_residual = checked_residual(model, st, obs, &res.per_anchor_residuals);
  return res;
}

std::vector<double> view_key(const Observation& o, std::span<const Rotation> pose) {
  std::vector<double> key;
  key.insert(key.end(), o.intrinsics.data(), o.intrinsics.data() + 12);
  for (double v : o.extrinsic_rotation.quat()) key.push_back(v);
  for (double v : o.extrinsic_translation) key.push_back(v);
  key.insert(key.end(), o.anchors_2d.data(), o.anchors_2d.data() + o.anchors_2d.size());
  key.insert(key.end(), o.laplace_scale.data(), o.laplace_scale.data() + o.laplace_scale.size());
  key.insert(key.end(), o.aux_weight.data(), o.aux_weight.data() + o.aux_weight.size());
  for (const auto& r : pose) {
    for (double v : r.quat()) key.push_back(v);
  }
  return key;
}

bool is_identity(const Rotation& r) { return r.w() == 1.0 && r.x() == 0.0 && r.y() == 0.0 && r.z() == 0.0; }

}  // namespace

SolveResult solve_single_view(const BodyModelDef& model, std::span<const Rotation> pose_init, const Observation& obs,
                              const SolveConfig& cfg) {
  return solve_impl(model, pose_init, std::span<const Observation>(&obs, 1), cfg);
}

SolveResult solve_multi_view(const BodyModelDef& model, const std::vector<std::vector<Rotation>>& per_view_poses,
                             std::span<const Observation> views, const SolveConfig& cfg) {
  if (views.empty()) throw Error(ErrorKind::Contract, "at least one view is required");
  if (per_view_poses.size() != views.size()) throw Error(ErrorKind::Shape, "one pose set per view is required");
  const std::size_t k = model.num_joints();
  for (const auto& p : per_view_poses) {
    if (p.size() != k) throw Error(ErrorKind::Shape, "pose set length does not match the model");
  }
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> keys;
  for (std::size_t v = 0; v < views.size(); ++v) keys.push_back(view_key(views[v], per_view_poses[v]));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });

  std::vector<Observation> sorted;
  std::vector<std::vector<Rotation>> world;
  for (std::size_t v : order) {
    sorted.push_back(views[v]);
    std::vector<Rotation> p = per_view_poses[v];
    const int root = 0;
    if (!is_identity(views[v].extrinsic_rotation)) p[root] = views[v].extrinsic_rotation.inverse() * p[root];
    world.push_back(std::move(p));
  }
  std::vector<Rotation> init;
  if (world.size() == 1) {
    init = world.front();
  } else {
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<Rotation> rs;
      for (const auto& p : world) rs.push_back(p[j]);
      init.push_back(rotation_mean(rs));
    }
  }
  return solve_impl(model, init, sorted, cfg);
}

double laplacian_nll(const MatX2& pred, const Eigen::VectorXd& scale, const MatX2& gt) {
  if (pred.rows() != gt.rows() || scale.size() != pred.rows()) throw Error(ErrorKind::Shape, "laplacian_nll shape mismatch");
  if (pred.rows() == 0) throw Error(ErrorKind::Contract, "laplacian_nll needs at least one anchor");
  double total = 0.0;
  for (long i = 0; i < pred.rows(); ++i) {
    if (!(scale[i] > 0.0)) throw Error(ErrorKind::Domain, "laplacian_nll scale must be positive");
    total += std::log(2.0 * scale[i]) + (pred.row(i) - gt.row(i)).cwiseAbs().sum() / scale[i];
  }
  return total / static_cast<double>(pred.rows());
}

dg::Var laplacian_nll(dg::Var pred, dg::Var scale, dg::Var gt) {
  if (pred.cols() != 2 || gt.cols() != 2 || scale.cols() != 1 || pred.rows() != gt.rows() || scale.rows() != pred.rows()) {
    throw Error(ErrorKind::Shape, "laplacian_nll shape mismatch");
  }
  dg::Var l1 = dg::sum_rows(dg::abs(pred - gt));
  return dg::mean(dg::log(2.0 * scale) + l1 / scale);
}

}  // namespace flowpose
