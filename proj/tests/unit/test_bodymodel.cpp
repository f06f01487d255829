#include <doctest.h>

#include <filesystem>
#include <set>

#include "flowpose/bodymodel.hpp"
#include "gen.hpp"

using namespace flowpose;

namespace {

const BodyModelDef& toy() {
  static const BodyModelDef m = make_toy_model();
  return m;
}

BodyState rest_state(const BodyModelDef& m) {
  BodyState s;
  s.pose.assign(m.num_joints(), Rotation::identity());
  s.shape.assign(m.shape_dim(), 0.0);
  return s;
}

BodyState random_state(const BodyModelDef& m, Rng& rng) {
  BodyState s = rest_state(m);
  for (auto& r : s.pose) r = axis_angle_exp(gen::vec3(rng, 0.5));
  for (double& b : s.shape) b = rng.normal();
  s.translation = gen::vec3(rng, 0.5);
  return s;
}

// joints in the subtree rooted at k
std::set<int> subtree(const BodyModelDef& m, int k) {
  std::set<int> out{k};
  for (bool grew = true; grew;) {
    grew = false;
    for (std::size_t j = 0; j < m.num_joints(); ++j) {
      if (m.parents[j] >= 0 && out.count(m.parents[j]) && !out.count(static_cast<int>(j))) {
        out.insert(static_cast<int>(j));
        grew = true;
      }
    }
  }
  return out;
}

double max_abs(const MatX3& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("bundled toy model") {
  const BodyModelDef& m = toy();
  CHECK(m.num_joints() == 8);
  CHECK(m.num_vertices() == 96);
  CHECK(m.shape_dim() == 4);
  CHECK(m.parents[0] == -1);
  CHECK(m.anchor_indices.size() <= m.num_vertices());
  CHECK((m.joint_regressor.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-8);
  CHECK((m.blend_weights.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-8);
  CHECK(m.blend_weights.minCoeff() >= 0.0);
  const auto order = m.topological_order();
  std::vector<int> pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = static_cast<int>(i);
  for (std::size_t j = 1; j < m.num_joints(); ++j) CHECK(pos[m.parents[j]] < pos[j]);
}

TEST_CASE("model file round trip and rejection") {
  const BodyModelDef& m = toy();
  const std::string path = (std::filesystem::temp_directory_path() / "flowpose_bodymodel_roundtrip.json").string();
  save_model(m, path);
  const BodyModelDef back = load_model(path);
  CHECK(back.template_vertices == m.template_vertices);
  CHECK(back.shape_basis == m.shape_basis);
  CHECK(back.joint_regressor == m.joint_regressor);
  CHECK(back.blend_weights == m.blend_weights);
  CHECK(back.parents == m.parents);
  CHECK(back.anchor_indices == m.anchor_indices);
  CHECK(m.to_json().at("format_version") == 1);

  auto mutate = [&](auto&& edit) {
    nlohmann::json j = m.to_json();
    edit(j);
    return gen::throws_kind([&] { BodyModelDef::from_json(j); }, ErrorKind::Load);
  };
  CHECK(mutate([](nlohmann::json& j) {
    auto& row = j["joint_regressor"][0];
    double s = 0.0;
    for (auto& v : row) s += v.get<double>();
    for (auto& v : row) v = v.get<double>() * 0.9 / s;
  }));
  CHECK(mutate([](nlohmann::json& j) {
    j["parents"][1] = 2;
    j["parents"][2] = 1;
  }));
  CHECK(mutate([](nlohmann::json& j) { j["parents"][0] = 1; }));
  CHECK(mutate([](nlohmann::json& j) { j["blend_weights"][0][0] = -0.5; }));
  CHECK(mutate([](nlohmann::json& j) { j["shape_basis"][0].erase(0); }));
  CHECK(mutate([](nlohmann::json& j) { j["anchor_indices"].push_back(96); }));
  CHECK(mutate([](nlohmann::json& j) { j.erase("template"); }));
  CHECK(gen::throws_kind([] { load_model("does/not/exist.json"); }, ErrorKind::Load));
}

TEST_CASE("shape blending") {
  const BodyModelDef& m = toy();
  const std::vector<double> zero(4, 0.0);
  CHECK(shape_blend(m, zero) == m.template_vertices);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(4), b(4), sum(4);
    for (int i = 0; i < 4; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      sum[i] = a[i] + b[i];
    }
    const MatX3 lhs = shape_blend(m, a) + shape_blend(m, b) - m.template_vertices;
    CHECK(max_abs(lhs - shape_blend(m, sum)) < 1e-12);
  }
  for (int c = 0; c < 4; ++c) {
    std::vector<double> e(4, 0.0);
    e[c] = 1.0;
    const MatX3 d = shape_blend(m, e) - m.template_vertices;
    for (long v = 0; v < d.rows(); ++v) {
      for (int x = 0; x < 3; ++x) CHECK(std::abs(d(v, x) - m.shape_basis(c, 3 * v + x)) < 1e-15);
    }
  }
  CHECK(gen::throws_kind([&] { shape_blend(m, std::vector<double>(3, 0.0)); }, ErrorKind::Shape));
}

TEST_CASE("forward kinematics at rest") {
  const BodyModelDef& m = toy();
  const Posed p = forward_kinematics(m, rest_state(m));
  CHECK(max_abs(p.vertices - m.template_vertices) < 1e-12);
  CHECK(max_abs(p.joints - m.joint_regressor * m.template_vertices) < 1e-12);
  BodyState bad = rest_state(m);
  bad.pose.pop_back();
  CHECK(gen::throws_kind([&] { forward_kinematics(m, bad); }, ErrorKind::Shape));
}

TEST_CASE("root rotation is a rigid motion about the root joint") {
  const BodyModelDef& m = toy();
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    BodyState s = random_state(m, rng);
    const Posed base = forward_kinematics(m, s);
    const Rotation g = gen::rotation(rng);
    BodyState turned = s;
    turned.pose[0] = g * s.pose[0];
    const Posed moved = forward_kinematics(m, turned);
    const Eigen::RowVector3d pivot = base.joints.row(0) - s.translation.transpose();
    const Mat3 gm = g.matrix();
    MatX3 expect = ((base.vertices.rowwise() - s.translation.transpose()).rowwise() - pivot) * gm.transpose();
    expect = (expect.rowwise() + pivot).rowwise() + s.translation.transpose();
    CHECK(max_abs(moved.vertices - expect) < 1e-12);
  }
}

TEST_CASE("joint regression commutes with rigid motion") {
  const BodyModelDef& m = toy();
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Posed p = forward_kinematics(m, random_state(m, rng));
    const Mat3 r = gen::rotation(rng).matrix();
    const Eigen::RowVector3d d = gen::vec3(rng, 1.0).transpose();
    const MatX3 moved = (p.vertices * r.transpose()).rowwise() + d;
    const MatX3 lhs = regress_joints(m, moved);
    const MatX3 rhs = (regress_joints(m, p.vertices) * r.transpose()).rowwise() + d;
    CHECK(max_abs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("leaf rotation only moves its skinned vertices") {
  const BodyModelDef& m = toy();
  Rng rng(4);
  for (std::size_t k = 1; k < m.num_joints(); ++k) {
    const std::set<int> sub = subtree(m, static_cast<int>(k));
    BodyState s = random_state(m, rng);
    const Posed before = forward_kinematics(m, s);
    s.pose[k] = gen::rotation(rng) * s.pose[k];
    const Posed after = forward_kinematics(m, s);
    for (std::size_t v = 0; v < m.num_vertices(); ++v) {
      double carried = 0.0;
      for (int j : sub) carried += m.blend_weights(j, v);
      if (carried == 0.0) CHECK((after.vertices.row(v) - before.vertices.row(v)).norm() < 1e-12);
    }
    for (std::size_t j = 0; j < m.num_joints(); ++j) {
      if (!sub.count(static_cast<int>(j)) || j == k) {
        CHECK((chain_transforms(m, s.pose, regress_joints(m, shape_blend(m, s.shape))).position.row(j) -
               (before.joints.row(j) - s.translation.transpose()))
                  .norm() < 1e-12);
      }
    }
  }
}

TEST_CASE("anchor selection") {
  const BodyModelDef& m = toy();
  const auto all = select_anchors(m, 4, m.num_vertices());
  CHECK(all.size() == m.num_vertices());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == static_cast<int>(i));

  CHECK(select_anchors(m, 4, 48) == select_anchors(m, 4, 48));
  CHECK(select_anchors(m, 4, 48) == m.anchor_indices);
  CHECK(gen::throws_kind([&] { select_anchors(m, 4, 20); }, ErrorKind::Quota));
  CHECK(gen::throws_kind([&] { select_anchors(m, 1, 97); }, ErrorKind::Quota));

  const std::vector<int> seg = vertex_segments(m);
  for (std::size_t total : {16u, 32u, 48u, 64u}) {
    const auto pick = select_anchors(m, 2, total);
    CHECK(pick.size() == total);
    CHECK(std::set<int>(pick.begin(), pick.end()).size() == total);
    for (std::size_t s = 0; s < m.num_joints(); ++s) {
      std::vector<int> chosen, members;
      for (int v : pick) {
        if (seg[v] == static_cast<int>(s)) chosen.push_back(v);
      }
      for (std::size_t v = 0; v < m.num_vertices(); ++v) {
        if (seg[v] == static_cast<int>(s)) members.push_back(static_cast<int>(v));
      }
      if (members.empty()) continue;
      CHECK(chosen.size() >= 2);
      auto at = [&](int v) { return Vec3(m.template_vertices.row(v).transpose()); };
      double radius = 0.0;
      for (int v : members) {
        double nearest = 1e300;
        for (int c : chosen) nearest = std::min(nearest, (at(v) - at(c)).norm());
        radius = std::max(radius, nearest);
      }
      for (std::size_t a = 0; a < chosen.size(); ++a) {
        for (std::size_t b = a + 1; b < chosen.size(); ++b) CHECK((at(chosen[a]) - at(chosen[b])).norm() >= radius - 1e-12);
      }
    }
  }
}
