#include <cmath>
#include <fstream>
#include <numbers>

#include "flowpose/harness.hpp"
#include "flowpose/jsonio.hpp"

namespace flowpose {

using nlohmann::json;

std::vector<KeySpec> RigConfig::schema() {
  return {{"views", "int", "number of cameras on the rig"},
          {"focal", "float", "focal length, pixels"},
          {"cx", "float", "principal point x, pixels"},
          {"cy", "float", "principal point y, pixels"},
          {"distance", "float", "camera distance from the target, meters"},
          {"spacing_deg", "float", "azimuth step between consecutive cameras"},
          {"target_height", "float", "height of the point the cameras look at, meters"}};
}

RigConfig RigConfig::from_json(const json& j) {
  const auto keys = schema();
  check_keys(j, keys, "rig");
  RigConfig c;
  read_key(j, "views", c.views, "rig");
  read_key(j, "focal", c.focal, "rig");
  read_key(j, "cx", c.cx, "rig");
  read_key(j, "cy", c.cy, "rig");
  read_key(j, "distance", c.distance, "rig");
  read_key(j, "spacing_deg", c.spacing_deg, "rig");
  read_key(j, "target_height", c.target_height, "rig");
  return c;
}

json RigConfig::to_json() const {
  return {{"views", views},   {"focal", focal},           {"cx", cx},
          {"cy", cy},         {"distance", distance},     {"spacing_deg", spacing_deg},
          {"target_height", target_height}};
}

Camera look_at(const Vec3& position, const Vec3& target, double focal, double cx, double cy) {
  const Vec3 forward = (target - position).normalized();
  const Vec3 down(0.0, -1.0, 0.0);
  if (!forward.allFinite() || std::abs(forward.dot(down)) > 0.999) {
    throw Error(ErrorKind::InvalidRig, "camera forward direction is undefined or vertical");
  }
  const Vec3 right = down.cross(forward).normalized();
  const Vec3 d = forward.cross(right);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = d.transpose();
  r.row(2) = forward.transpose();
  Camera cam;
  cam.intrinsics = pinhole(focal, cx, cy);
  cam.rotation = Rotation::from_matrix(r);
  cam.translation = -(cam.rotation.matrix() * position);
  return cam;
}

std::vector<Camera> RigConfig::cameras() const {
  if (views == 0) throw Error(ErrorKind::InvalidRig, "rig needs at least one view");
  if (!(focal > 0.0) || !(distance > 0.0)) throw Error(ErrorKind::InvalidRig, "focal and distance must be positive");
  const Vec3 target(0.0, target_height, 0.0);
  std::vector<Camera> cams;
  for (std::size_t v = 0; v < views; ++v) {
    const double a = static_cast<double>(v) * spacing_deg * std::numbers::pi / 180.0;
    cams.push_back(look_at(target + distance * Vec3(std::sin(a), 0.0, std::cos(a)), target, focal, cx, cy));
  }
  return cams;
}

MatX2 project(const Camera& cam, const MatX3& points) {
  return project(cam.intrinsics, cam.rotation, cam.translation, points);
}

std::vector<KeySpec> PriorConfig::schema() {
  return {{"joint_sigma", "float", "std of non-root axis-angle components, radians"},
          {"root_sigma", "float", "std of root axis-angle components, radians"},
          {"shape_sigma", "float", "std of shape coefficients"},
          {"translation_box", "float[3]", "half extents of the uniform translation box, meters"}};
}

PriorConfig PriorConfig::from_json(const json& j) {
  const auto keys = schema();
  check_keys(j, keys, "prior");
  PriorConfig c;
  read_key(j, "joint_sigma", c.joint_sigma, "prior");
  read_key(j, "root_sigma", c.root_sigma, "prior");
  read_key(j, "shape_sigma", c.shape_sigma, "prior");
  read_key(j, "translation_box", c.translation_box, "prior");
  require(c.joint_sigma >= 0 && c.root_sigma >= 0 && c.shape_sigma >= 0, "prior sigmas must be nonnegative");
  return c;
}

json PriorConfig::to_json() const {
  return {{"joint_sigma", joint_sigma},
          {"root_sigma", root_sigma},
          {"shape_sigma", shape_sigma},
          {"translation_box", translation_box}};
}

std::vector<KeySpec> NoiseConfig::schema() {
  return {{"laplace_scale", "float", "Laplace scale of anchor pixel noise"},
          {"occlusion_prob", "float", "probability that an anchor is occluded"}};
}

NoiseConfig NoiseConfig::from_json(const json& j) {
  const auto keys = schema();
  check_keys(j, keys, "noise");
  NoiseConfig c;
  read_key(j, "laplace_scale", c.laplace_scale, "noise");
  read_key(j, "occlusion_prob", c.occlusion_prob, "noise");
  require(c.laplace_scale >= 0.0, "noise.laplace_scale must be nonnegative");
  require(c.occlusion_prob >= 0.0 && c.occlusion_prob < 1.0, "noise.occlusion_prob must lie in [0, 1)");
  return c;
}

json NoiseConfig::to_json() const { return {{"laplace_scale", laplace_scale}, {"occlusion_prob", occlusion_prob}}; }

std::vector<KeySpec> DatasetConfig::schema() {
  std::vector<KeySpec> keys = {{"scenes", "int", "number of scenes"},
                               {"rig", "object", "camera rig"},
                               {"prior", "object", "pose, shape and translation prior"},
                               {"noise", "object", "observation noise"}};
  for (const auto& k : RigConfig::schema()) keys.push_back({"rig." + k.key, k.type, k.help});
  for (const auto& k : PriorConfig::schema()) keys.push_back({"prior." + k.key, k.type, k.help});
  for (const auto& k : NoiseConfig::schema()) keys.push_back({"noise." + k.key, k.type, k.help});
  return keys;
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  const std::vector<KeySpec> keys = {{"scenes", "", ""}, {"rig", "", ""}, {"prior", "", ""}, {"noise", "", ""}};
  check_keys(j, keys, "dataset");
  DatasetConfig c;
  read_key(j, "scenes", c.scenes, "dataset");
  if (j.contains("rig")) c.rig = RigConfig::from_json(j.at("rig"));
  if (j.contains("prior")) c.prior = PriorConfig::from_json(j.at("prior"));
  if (j.contains("noise")) c.noise = NoiseConfig::from_json(j.at("noise"));
  return c;
}

json DatasetConfig::to_json() const {
  return {{"scenes", scenes}, {"rig", rig.to_json()}, {"prior", prior.to_json()}, {"noise", noise.to_json()}};
}

json SceneRecord::to_json() const {
  json views_j = json::array(), anchors_j = json::array();
  for (const auto& v : views) views_j.push_back(v.to_json());
  for (const auto& a : gt_anchors) anchors_j.push_back(rows_to_json(a));
  return {{"format_version", kDatasetFormatVersion},
          {"rng_seed", rng_seed},
          {"gt_state",
           {{"pose", rotations_to_json(gt_state.pose)},
            {"shape", gt_state.shape},
            {"translation", vec3_to_json(gt_state.translation)}}},
          {"views", views_j},
          {"gt_anchors", anchors_j},
          {"context_features", context_features}};
}

SceneRecord SceneRecord::from_json(const json& j) {
  SceneRecord s;
  try {
    if (j.at("format_version").get<int>() != kDatasetFormatVersion) {
      throw Error(ErrorKind::Load, "unsupported dataset format_version");
    }
    s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    const json& g = j.at("gt_state");
    s.gt_state.pose = rotations_from_json(g.at("pose"));
    s.gt_state.shape = g.at("shape").get<std::vector<double>>();
    s.gt_state.translation = vec3_from_json(g.at("translation"));
    for (const auto& v : j.at("views")) s.views.push_back(Observation::from_json(v));
    for (const auto& a : j.at("gt_anchors")) s.gt_anchors.push_back(rows_from_json<MatX2>(a, 2));
    s.context_features = j.at("context_features").get<std::vector<std::vector<double>>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Load, std::string("scene record: ") + e.what());
  }
  if (s.gt_anchors.size() != s.views.size() || s.context_features.size() != s.views.size()) {
    throw Error(ErrorKind::Load, "scene record: per-view arrays differ in length");
  }
  return s;
}

std::vector<double> context_features(const Observation& obs) {
  const std::size_t n = obs.size();
  std::vector<double> out(context_feature_dim(n), 0.0);
  const double fx = obs.intrinsics(0, 0), fy = obs.intrinsics(1, 1);
  const double cx = obs.intrinsics(0, 2), cy = obs.intrinsics(1, 2);
  std::vector<Eigen::Vector2d> pts(n);
  Eigen::Vector2d centre = Eigen::Vector2d::Zero();
  std::size_t visible = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<long>(i);
    pts[i] = {(obs.anchors_2d(row, 0) - cx) / fx, (obs.anchors_2d(row, 1) - cy) / fy};
    if (obs.aux_weight[row] > 0.0) {
      centre += pts[i];
      ++visible;
    }
  }
  if (visible == 0) return out;
  centre /= static_cast<double>(visible);
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (obs.aux_weight[static_cast<long>(i)] > 0.0) spread += (pts[i] - centre).squaredNorm();
  }
  spread = std::sqrt(spread / static_cast<double>(visible));
  if (!(spread > 1e-12)) return out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(obs.aux_weight[static_cast<long>(i)] > 0.0)) continue;
    const Eigen::Vector2d p = (pts[i] - centre) / spread;
    out[2 * i] = p.x();
    out[2 * i + 1] = p.y();
    out[2 * n + i] = 1.0;
  }
  return out;
}

SceneRecord generate_scene(const BodyModelDef& model, const DatasetConfig& cfg, const std::vector<Camera>& cams,
                           std::uint64_t seed, std::size_t index) {
  SceneRecord s;
  s.rng_seed = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
  Rng rng(s.rng_seed);
  const PriorConfig& pr = cfg.prior;
  auto gauss3 = [&](double sigma) {
    const double x = rng.normal(), y = rng.normal(), z = rng.normal();
    return axis_angle_exp(sigma * Vec3(x, y, z));
  };
  for (std::size_t j = 0; j < model.num_joints(); ++j) {
    s.gt_state.pose.push_back(gauss3(model.parents[j] < 0 ? pr.root_sigma : pr.joint_sigma));
  }
  for (std::size_t c = 0; c < model.shape_dim(); ++c) s.gt_state.shape.push_back(pr.shape_sigma * rng.normal());
  for (int c = 0; c < 3; ++c) s.gt_state.translation[c] = rng.uniform(-pr.translation_box[c], pr.translation_box[c]);

  const MatX3 verts = forward_kinematics(model, s.gt_state).vertices;
  MatX3 anchors(static_cast<long>(model.anchor_indices.size()), 3);
  for (std::size_t a = 0; a < model.anchor_indices.size(); ++a) {
    anchors.row(static_cast<long>(a)) = verts.row(model.anchor_indices[a]);
  }
  const NoiseConfig& nz = cfg.noise;
  for (const Camera& cam : cams) {
    const MatX2 clean = project(cam, anchors);
    Observation o;
    o.intrinsics = cam.intrinsics;
    o.extrinsic_rotation = cam.rotation;
    o.extrinsic_translation = cam.translation;
    o.anchors_2d = clean;
    o.laplace_scale = Eigen::VectorXd::Constant(clean.rows(), nz.laplace_scale > 0.0 ? nz.laplace_scale : 1.0);
    o.aux_weight = Eigen::VectorXd::Ones(clean.rows());
    for (long a = 0; a < clean.rows(); ++a) {
      if (nz.laplace_scale > 0.0) {
        o.anchors_2d(a, 0) += rng.laplace(nz.laplace_scale);
        o.anchors_2d(a, 1) += rng.laplace(nz.laplace_scale);
      }
      if (nz.occlusion_prob > 0.0 && rng.uniform() < nz.occlusion_prob) o.aux_weight[a] = 0.0;
    }
    s.context_features.push_back(context_features(o));
    s.views.push_back(std::move(o));
    s.gt_anchors.push_back(clean);
  }
  return s;
}

std::vector<SceneRecord> gen_dataset(const BodyModelDef& model, const DatasetConfig& cfg, std::uint64_t seed,
                                     Backend backend) {
  model.validate();
  const std::vector<Camera> cams = cfg.rig.cameras();
  std::vector<SceneRecord> out(cfg.scenes);
  parallel_for(cfg.scenes, backend, [&](std::size_t i) { out[i] = generate_scene(model, cfg, cams, seed, i); });
  return out;
}

void write_dataset(const std::string& path, const std::vector<SceneRecord>& scenes) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Config, "cannot write " + path);
  for (const auto& s : scenes) f << s.to_json().dump() << "\n";
}

std::vector<SceneRecord> read_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Load, "cannot open " + path);
  std::vector<SceneRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Load, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(SceneRecord::from_json(j));
  }
  return out;
}

}  // namespace flowpose
