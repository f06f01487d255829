#include "flowpose/bodymodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace flowpose {

using nlohmann::json;

namespace {

[[noreturn]] void load_error(const std::string& msg) { throw Error(ErrorKind::Load, "body model: " + msg); }

Eigen::MatrixXd matrix_from_json(const json& j, const char* key, long cols_expected = -1) {
  if (!j.contains(key) || !j.at(key).is_array()) load_error(std::string("missing array '") + key + "'");
  const json& a = j.at(key);
  const long rows = static_cast<long>(a.size());
  long cols = rows > 0 && a[0].is_array() ? static_cast<long>(a[0].size()) : 0;
  if (cols_expected >= 0 && rows > 0 && cols != cols_expected) {
    load_error(std::string("'") + key + "' rows must have " + std::to_string(cols_expected) + " entries");
  }
  Eigen::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    if (!a[r].is_array() || static_cast<long>(a[r].size()) != cols) load_error(std::string("ragged array '") + key + "'");
    for (long c = 0; c < cols; ++c) {
      if (!a[r][c].is_number()) load_error(std::string("non-numeric entry in '") + key + "'");
      m(r, c) = a[r][c].get<double>();
    }
  }
  return m;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (long r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

}  // namespace

std::vector<int> BodyModelDef::topological_order() const {
  const int k = static_cast<int>(parents.size());
  std::vector<int> order;
  std::vector<char> done(parents.size(), 0);
  while (static_cast<int>(order.size()) < k) {
    bool progress = false;
    for (int j = 0; j < k; ++j) {
      if (done[j]) continue;
      if (parents[j] < 0 || done[parents[j]]) {
        order.push_back(j);
        done[j] = 1;
        progress = true;
      }
    }
    if (!progress) load_error("parents contain a cycle");
  }
  return order;
}

void BodyModelDef::validate() const {
  const long n = template_vertices.rows();
  const long k = static_cast<long>(parents.size());
  if (n == 0) load_error("template has no vertices");
  if (k == 0) load_error("no joints");
  if (!template_vertices.allFinite()) load_error("template has non-finite entries");
  if (shape_basis.rows() > 0 && shape_basis.cols() != 3 * n) load_error("shape_basis must have 3N columns");
  if (!shape_basis.allFinite()) load_error("shape_basis has non-finite entries");
  if (joint_regressor.rows() != k || joint_regressor.cols() != n) load_error("joint_regressor must be K x N");
  if (blend_weights.rows() != k || blend_weights.cols() != n) load_error("blend_weights must be K x N");
  for (long j = 0; j < k; ++j) {
    if ((joint_regressor.row(j).array() < 0.0).any()) load_error("joint_regressor row " + std::to_string(j) + " has a negative entry");
    if (std::abs(joint_regressor.row(j).sum() - 1.0) > 1e-8) {
      load_error("joint_regressor row " + std::to_string(j) + " does not sum to 1");
    }
  }
  for (long v = 0; v < n; ++v) {
    if ((blend_weights.col(v).array() < 0.0).any()) load_error("blend_weights column " + std::to_string(v) + " has a negative entry");
    if (std::abs(blend_weights.col(v).sum() - 1.0) > 1e-8) {
      load_error("blend_weights column " + std::to_string(v) + " does not sum to 1");
    }
  }
  if (parents[0] != -1) load_error("joint 0 must be the root (parent -1)");
  for (long j = 1; j < k; ++j) {
    if (parents[j] < 0 || parents[j] >= k) load_error("joint " + std::to_string(j) + " has an invalid parent");
  }
  topological_order();
  if (static_cast<long>(anchor_indices.size()) > n) load_error("more anchors than vertices");
  std::vector<char> seen(n, 0);
  for (int a : anchor_indices) {
    if (a < 0 || a >= n) load_error("anchor index out of range");
    if (seen[a]) load_error("duplicate anchor index");
    seen[a] = 1;
  }
  if (!joint_names.empty() && static_cast<long>(joint_names.size()) != k) load_error("joint_names must have K entries");
}

BodyModelDef BodyModelDef::from_json(const json& j) {
  if (!j.is_object()) load_error("expected a JSON object");
  if (j.value("format_version", 0) != 1) load_error("unsupported format_version");
  static const char* kKeys[] = {"format_version", "template",      "shape_basis",    "joint_regressor",
                                "blend_weights",  "parents",       "anchor_indices", "joint_names"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(std::begin(kKeys), std::end(kKeys), it.key()) == std::end(kKeys)) load_error("unknown key '" + it.key() + "'");
  }
  BodyModelDef m;
  m.template_vertices = matrix_from_json(j, "template", 3);
  const long n = m.template_vertices.rows();
  m.shape_basis = matrix_from_json(j, "shape_basis");
  if (m.shape_basis.rows() == 0) m.shape_basis.resize(0, 3 * n);
  m.joint_regressor = matrix_from_json(j, "joint_regressor");
  m.blend_weights = matrix_from_json(j, "blend_weights");
  try {
    m.parents = j.at("parents").get<std::vector<int>>();
    m.anchor_indices = j.value("anchor_indices", std::vector<int>{});
    m.joint_names = j.value("joint_names", std::vector<std::string>{});
  } catch (const json::exception& e) {
    load_error(e.what());
  }
  m.validate();
  return m;
}

json BodyModelDef::to_json() const {
  json j;
  j["format_version"] = 1;
  j["template"] = matrix_to_json(template_vertices);
  j["shape_basis"] = matrix_to_json(shape_basis);
  j["joint_regressor"] = matrix_to_json(joint_regressor);
  j["blend_weights"] = matrix_to_json(blend_weights);
  j["parents"] = parents;
  j["anchor_indices"] = anchor_indices;
  if (!joint_names.empty()) j["joint_names"] = joint_names;
  return j;
}

BodyModelDef load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) load_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    load_error(std::string("malformed JSON: ") + e.what());
  }
  return BodyModelDef::from_json(j);
}

void save_model(const BodyModelDef& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Config, "cannot write " + path);
  out << m.to_json().dump(1) << "\n";
}

MatX3 shape_blend(const BodyModelDef& m, std::span<const double> beta) {
  if (beta.size() != m.shape_dim()) throw Error(ErrorKind::Shape, "shape vector length does not match the model");
  MatX3 x = m.template_vertices;
  for (std::size_t s = 0; s < beta.size(); ++s) {
    if (beta[s] == 0.0) continue;
    for (long v = 0; v < x.rows(); ++v) {
      for (int c = 0; c < 3; ++c) x(v, c) += beta[s] * m.shape_basis(static_cast<long>(s), 3 * v + c);
    }
  }
  return x;
}

MatX3 regress_joints(const BodyModelDef& m, const MatX3& vertices) { return m.joint_regressor * vertices; }

JointTransforms chain_transforms(const BodyModelDef& m, std::span<const Rotation> pose, const MatX3& rest_joints) {
  const std::size_t k = m.num_joints();
  if (pose.size() != k) throw Error(ErrorKind::Shape, "pose length does not match the joint count");
  JointTransforms t;
  t.rotation.assign(k, Mat3::Identity());
  t.position.resize(static_cast<long>(k), 3);
  for (int j : m.topological_order()) {
    const Mat3 r = pose[j].matrix();
    const int p = m.parents[j];
    if (p < 0) {
      t.rotation[j] = r;
      t.position.row(j) = rest_joints.row(j);
    } else {
      t.rotation[j] = t.rotation[p] * r;
      const Vec3 offset = (rest_joints.row(j) - rest_joints.row(p)).transpose();
      t.position.row(j) = (t.position.row(p).transpose() + t.rotation[p] * offset).transpose();
    }
  }
  return t;
}

Posed forward_kinematics(const BodyModelDef& m, const BodyState& s) {
  const MatX3 rest = shape_blend(m, s.shape);
  const MatX3 rest_joints = regress_joints(m, rest);
  const JointTransforms t = chain_transforms(m, s.pose, rest_joints);
  Posed out;
  out.vertices.setZero(rest.rows(), 3);
  for (long v = 0; v < rest.rows(); ++v) {
    Vec3 acc = Vec3::Zero();
    for (std::size_t j = 0; j < m.num_joints(); ++j) {
      const double w = m.blend_weights(static_cast<long>(j), v);
      if (w == 0.0) continue;
      const Vec3 local = (rest.row(v) - rest_joints.row(static_cast<long>(j))).transpose();
      acc += w * (t.rotation[j] * local + t.position.row(static_cast<long>(j)).transpose());
    }
    out.vertices.row(v) = (acc + s.translation).transpose();
  }
  out.joints = t.position;
  out.joints.rowwise() += s.translation.transpose();
  return out;
}

std::vector<int> vertex_segments(const BodyModelDef& m) {
  std::vector<int> seg(m.num_vertices(), -1);
  for (long v = 0; v < static_cast<long>(m.num_vertices()); ++v) {
    Eigen::Index best = 0;
    const double w = m.blend_weights.col(v).maxCoeff(&best);
    if (w > 0.5) seg[v] = static_cast<int>(best);
  }
  return seg;
}

std::vector<int> select_anchors(const BodyModelDef& m, std::size_t per_segment_min, std::size_t total) {
  const std::size_t n = m.num_vertices();
  if (total > n) throw Error(ErrorKind::Quota, "more anchors requested than vertices");
  if (total == n) {
    std::vector<int> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
    return all;
  }
  const std::vector<int> seg = vertex_segments(m);
  std::vector<std::vector<int>> members(m.num_joints());
  for (std::size_t v = 0; v < n; ++v) {
    if (seg[v] >= 0) members[seg[v]].push_back(static_cast<int>(v));
  }
  std::vector<int> segments;
  for (std::size_t s = 0; s < members.size(); ++s) {
    if (!members[s].empty()) segments.push_back(static_cast<int>(s));
  }
  if (total < segments.size() * per_segment_min) {
    throw Error(ErrorKind::Quota, "anchor total below segments x per-segment minimum");
  }
  std::size_t assigned = 0;
  for (int s : segments) assigned += members[s].size();
  if (total > assigned) throw Error(ErrorKind::Quota, "not enough segment vertices for the requested anchors");

  // extent: bounding-box diagonal of the segment's rest vertices
  std::vector<double> extent(members.size(), 0.0);
  for (int s : segments) {
    Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
    for (int v : members[s]) {
      lo = lo.cwiseMin(m.template_vertices.row(v).transpose());
      hi = hi.cwiseMax(m.template_vertices.row(v).transpose());
    }
    extent[s] = std::max((hi - lo).norm(), 1e-9);
  }

  std::vector<std::size_t> quota(members.size(), 0);
  for (int s : segments) quota[s] = std::min(per_segment_min, members[s].size());
  std::size_t given = 0;
  for (int s : segments) given += quota[s];
  // distribute the remainder by extent (largest remainder), respecting capacity
  while (given < total) {
    double weight = 0.0;
    for (int s : segments) {
      if (quota[s] < members[s].size()) weight += extent[s];
    }
    const std::size_t remaining = total - given;
    std::vector<std::pair<double, int>> frac;
    std::size_t placed = 0;
    for (int s : segments) {
      if (quota[s] >= members[s].size()) continue;
      const double share = static_cast<double>(remaining) * extent[s] / weight;
      const std::size_t add = std::min(static_cast<std::size_t>(std::floor(share)), members[s].size() - quota[s]);
      quota[s] += add;
      placed += add;
      frac.emplace_back(share - std::floor(share), s);
    }
    std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [f, s] : frac) {
      if (placed >= remaining) break;
      if (quota[s] < members[s].size()) {
        ++quota[s];
        ++placed;
      }
    }
    given += placed;
    if (placed == 0) break;
  }

  std::vector<int> out;
  for (int s : segments) {
    const auto& vs = members[s];
    std::vector<double> dist(vs.size(), 1e300);
    std::size_t current = 0;  // lowest index in the segment
    for (std::size_t c = 0; c < quota[s]; ++c) {
      out.push_back(vs[current]);
      const Vec3 p = m.template_vertices.row(vs[current]).transpose();
      for (std::size_t i = 0; i < vs.size(); ++i) {
        dist[i] = std::min(dist[i], (m.template_vertices.row(vs[i]).transpose() - p).norm());
      }
      std::size_t best = 0;
      for (std::size_t i = 1; i < vs.size(); ++i) {
        if (dist[i] > dist[best]) best = i;
      }
      current = best;
    }
  }
  return out;
}

BodyModelDef make_toy_model(std::size_t anchors, std::size_t anchor_min) {
  struct Segment {
    const char* name;
    int parent;
    Vec3 start, end;
    double rx, rz;  // ring radii across the segment axis
  };
  const std::vector<Segment> segs = {
      {"pelvis", -1, {0.0, 1.00, 0.0}, {0.0, 1.22, 0.0}, 0.16, 0.11},
      {"spine", 0, {0.0, 1.25, 0.0}, {0.0, 1.45, 0.02}, 0.15, 0.10},
      {"head", 1, {0.0, 1.55, 0.0}, {0.0, 1.80, 0.03}, 0.09, 0.10},
      {"l_arm", 1, {0.20, 1.45, 0.0}, {0.48, 1.43, 0.0}, 0.05, 0.05},
      {"l_forearm", 3, {0.50, 1.43, 0.0}, {0.74, 1.42, 0.02}, 0.04, 0.04},
      {"r_arm", 1, {-0.20, 1.45, 0.0}, {-0.48, 1.43, 0.0}, 0.05, 0.05},
      {"r_forearm", 5, {-0.50, 1.43, 0.0}, {-0.74, 1.42, 0.02}, 0.04, 0.04},
      {"legs", 0, {0.0, 0.95, 0.0}, {0.0, 0.10, 0.05}, 0.20, 0.10},
  };
  const std::size_t k = segs.size();
  constexpr int kRings = 3, kPerRing = 4;
  const double ring_t[kRings] = {0.0, 0.45, 0.9};
  const std::size_t n = k * kRings * kPerRing;

  BodyModelDef m;
  m.template_vertices.resize(static_cast<long>(n), 3);
  m.shape_basis = Eigen::MatrixXd::Zero(4, static_cast<long>(3 * n));
  m.joint_regressor = Eigen::MatrixXd::Zero(static_cast<long>(k), static_cast<long>(n));
  m.blend_weights = Eigen::MatrixXd::Zero(static_cast<long>(k), static_cast<long>(n));
  for (const auto& s : segs) {
    m.parents.push_back(s.parent);
    m.joint_names.emplace_back(s.name);
  }

  long v = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const Segment& s = segs[j];
    const Vec3 axis = (s.end - s.start).normalized();
    // cross-section basis: e1 roughly horizontal, e2 completes the frame
    Vec3 helper = std::abs(axis.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    Vec3 e2 = axis.cross(helper).normalized();
    Vec3 e1 = e2.cross(axis).normalized();
    for (int r = 0; r < kRings; ++r) {
      const Vec3 centre = s.start + ring_t[r] * (s.end - s.start);
      const double taper = 1.0 - 0.15 * r;
      for (int q = 0; q < kPerRing; ++q) {
        const double a = 0.25 * std::numbers::pi + 0.5 * std::numbers::pi * q;
        const Vec3 radial = taper * (s.rx * std::cos(a) * e2 + s.rz * std::sin(a) * e1);
        const Vec3 p = centre + radial;
        m.template_vertices.row(v) = p.transpose();
        if (r == 0) m.joint_regressor(static_cast<long>(j), v) = 1.0 / kPerRing;
        if (r == 0 && s.parent >= 0) {
          m.blend_weights(static_cast<long>(j), v) = 0.6;
          m.blend_weights(s.parent, v) = 0.4;
        } else {
          m.blend_weights(static_cast<long>(j), v) = 1.0;
        }
        // shape directions: stature, girth, arm span, leg length
        const Vec3 d0(0.015 * p.x(), 0.05 * (p.y() - 1.0), 0.015 * p.z());
        const Vec3 d1 = 0.4 * radial;
        const double reach = std::max(std::abs(p.x()) - 0.2, 0.0);
        const Vec3 d2(0.08 * std::copysign(reach, p.x()), 0.0, 0.0);
        const Vec3 d3(0.0, p.y() < 1.0 ? 0.1 * (p.y() - 1.0) : 0.0, 0.0);
        for (int c = 0; c < 3; ++c) {
          m.shape_basis(0, 3 * v + c) = d0[c];
          m.shape_basis(1, 3 * v + c) = d1[c];
          m.shape_basis(2, 3 * v + c) = d2[c];
          m.shape_basis(3, 3 * v + c) = d3[c];
        }
        ++v;
      }
    }
  }
  m.anchor_indices = select_anchors(m, anchor_min, anchors);
  m.validate();
  return m;
}

}  // namespace flowpose
