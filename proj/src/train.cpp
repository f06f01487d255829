#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "flowpose/diffrot.hpp"
#include "flowpose/harness.hpp"

namespace flowpose {

using dg::Tape;
using dg::Tensor;
using dg::Var;
using nlohmann::json;

std::vector<KeySpec> TrainConfig::schema() {
  return {{"lambdas", "float[6]", "weights: anchor lnll, pose nll, shape nll, global geodesic, 2D mode, 3D mode"},
          {"phase1_epochs", "int", "epochs of likelihood training"},
          {"phase2_epochs", "int", "epochs that add the mode 2D/3D losses"},
          {"batch_size", "int", "training samples per step"},
          {"optimizer", "string", "sgd or adam"},
          {"learning_rate", "float", "step size"},
          {"clip_norm", "float", "global gradient-norm clip, <= 0 disables"},
          {"phase2_learning_rate", "float", "phase-2 step size, 0 keeps learning_rate"},
          {"predict_scale", "bool", "train the anchor-scale head"}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  const auto keys = schema();
  check_keys(j, keys, "train");
  TrainConfig c;
  read_key(j, "lambdas", c.lambdas, "train");
  read_key(j, "phase1_epochs", c.phase1_epochs, "train");
  read_key(j, "phase2_epochs", c.phase2_epochs, "train");
  read_key(j, "batch_size", c.batch_size, "train");
  read_key(j, "optimizer", c.optimizer.kind, "train");
  read_key(j, "learning_rate", c.optimizer.learning_rate, "train");
  read_key(j, "clip_norm", c.optimizer.clip_norm, "train");
  read_key(j, "phase2_learning_rate", c.phase2_learning_rate, "train");
  read_key(j, "predict_scale", c.predict_scale, "train");
  for (double l : c.lambdas) require(l >= 0.0, "train.lambdas must be nonnegative");
  require(c.batch_size > 0, "train.batch_size must be positive");
  require(c.optimizer.kind == "sgd" || c.optimizer.kind == "adam", "train.optimizer must be sgd or adam");
  require(c.optimizer.learning_rate > 0.0, "train.learning_rate must be positive");
  return c;
}

json TrainConfig::to_json() const {
  return {{"lambdas", lambdas},
          {"phase1_epochs", phase1_epochs},
          {"phase2_epochs", phase2_epochs},
          {"batch_size", batch_size},
          {"optimizer", optimizer.kind},
          {"learning_rate", optimizer.learning_rate},
          {"clip_norm", optimizer.clip_norm},
          {"phase2_learning_rate", phase2_learning_rate},
          {"predict_scale", predict_scale}};
}

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Tensor features_tensor(const std::vector<SceneRecord>& data, std::span<const TrainSample> batch) {
  const std::size_t f = data[batch[0].scene].context_features[batch[0].view].size();
  Tensor t(batch.size(), f);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& src = data[batch[b].scene].context_features[batch[b].view];
    if (src.size() != f) throw Error(ErrorKind::Shape, "context feature length differs between scenes");
    std::copy(src.begin(), src.end(), t.vec().begin() + static_cast<long>(b * f));
  }
  return t;
}

Rotation camera_root(const SceneRecord& s, std::size_t view) {
  return s.views[view].extrinsic_rotation * s.gt_state.pose[0];
}

// Posed points (anchors then joints) as an affine function of beta for fixed
// non-root rotations and an identity root: p(beta) = base + beta * basis.
struct PosedBasis {
  Eigen::MatrixXd base;   // M x 3
  Eigen::MatrixXd basis;  // S x 3M, row-major point layout
  Vec3 root_base;
  Eigen::MatrixXd root_basis;  // S x 3
};

PosedBasis posed_basis(const BodyModelDef& model, const std::vector<Rotation>& joints) {
  const std::size_t s = model.shape_dim();
  const std::size_t na = model.anchor_indices.size(), k = model.num_joints();
  BodyState st;
  st.pose.push_back(Rotation::identity());
  st.pose.insert(st.pose.end(), joints.begin(), joints.end());
  auto points = [&](const std::vector<double>& beta, Vec3& root) {
    st.shape = beta;
    const Posed p = forward_kinematics(model, st);
    Eigen::MatrixXd m(static_cast<long>(na + k), 3);
    for (std::size_t a = 0; a < na; ++a) m.row(static_cast<long>(a)) = p.vertices.row(model.anchor_indices[a]);
    m.bottomRows(static_cast<long>(k)) = p.joints;
    root = p.joints.row(0).transpose();
    return m;
  };
  PosedBasis out;
  std::vector<double> beta(s, 0.0);
  out.base = points(beta, out.root_base);
  out.basis.resize(static_cast<long>(s), out.base.size());
  out.root_basis.resize(static_cast<long>(s), 3);
  for (std::size_t c = 0; c < s; ++c) {
    beta.assign(s, 0.0);
    beta[c] = 1.0;
    Vec3 root;
    const Eigen::MatrixXd d = points(beta, root) - out.base;
    for (long r = 0; r < d.rows(); ++r)
      for (int q = 0; q < 3; ++q) out.basis(static_cast<long>(c), 3 * r + q) = d(r, q);
    out.root_basis.row(static_cast<long>(c)) = (root - out.root_base).transpose();
  }
  return out;
}

Tensor eigen_tensor(const Eigen::MatrixXd& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) t(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  return t;
}

// Mode 2D (normalized image units) and 3D (meters) L1 losses for one sample.
std::pair<Var, Var> mode_losses(Tape& tape, const BodyModelDef& model, const SceneRecord& scene, std::size_t view,
                                const std::vector<Rotation>& joints, Var global_cam, Var beta) {
  const std::size_t na = model.anchor_indices.size(), k = model.num_joints();
  const Observation& obs = scene.views[view];
  const PosedBasis pb = posed_basis(model, joints);
  const std::size_t m = na + k;

  Var local = dg::reshape(dg::matmul(beta, tape.constant(eigen_tensor(pb.basis))), m, 3) +
              tape.constant(eigen_tensor(pb.base));
  Var root = dg::matmul(beta, tape.constant(eigen_tensor(pb.root_basis))) +
             tape.constant(Tensor::row({pb.root_base.x(), pb.root_base.y(), pb.root_base.z()}));
  // world root = Re^T * camera root; rows hold column-major matrices, so the
  // reshaped row is the transpose of the matrix it encodes
  const Mat3 re = obs.extrinsic_rotation.matrix();
  Var root_t = dg::matmul(dg::reshape(global_cam, 3, 3), tape.constant(eigen_tensor(re)));
  const Vec3& t = scene.gt_state.translation;
  Var world = dg::matmul(local - root, root_t) + root +
              tape.constant(Tensor::row({t.x(), t.y(), t.z()}));

  const Posed gt = forward_kinematics(model, scene.gt_state);
  Var loss3d = dg::mean(dg::abs(dg::slice_rows(world, na, m) - tape.constant(eigen_tensor(gt.joints))));

  Var cam = dg::matmul(dg::slice_rows(world, 0, na), tape.constant(eigen_tensor(re.transpose()))) +
            tape.constant(Tensor::row({obs.extrinsic_translation.x(), obs.extrinsic_translation.y(),
                                       obs.extrinsic_translation.z()}));
  Var z = dg::slice_cols(cam, 2, 3);
  Var uv = dg::concat_cols({dg::slice_cols(cam, 0, 1) / z, dg::slice_cols(cam, 1, 2) / z});
  const MatX2& clean = scene.gt_anchors[view];
  Tensor target(na, 2);
  for (std::size_t a = 0; a < na; ++a) {
    target(a, 0) = (clean(static_cast<long>(a), 0) - obs.intrinsics(0, 2)) / obs.intrinsics(0, 0);
    target(a, 1) = (clean(static_cast<long>(a), 1) - obs.intrinsics(1, 2)) / obs.intrinsics(1, 1);
  }
  Var loss2d = dg::mean(dg::abs(uv - tape.constant(target)));
  return {loss2d, loss3d};
}

}  // namespace

BatchLoss train_step(Pipeline& pipe, const BodyModelDef& model, const std::vector<SceneRecord>& data,
                     std::span<const TrainSample> batch, const TrainConfig& cfg, int phase, dg::Optimizer& opt) {
  if (batch.empty()) throw Error(ErrorKind::Contract, "empty training batch");
  const FlowModel& flow = pipe.flow();
  const std::size_t J = flow.config().joints, S = flow.config().shape_dim, B = batch.size();
  const std::size_t na = pipe.anchors();

  Tape tape;
  const auto params = pipe.store().bind(tape);
  Var ctx = pipe.encode(params, tape.constant(features_tensor(data, batch)));

  Tensor rot(B * J, 9), global(B, 9), beta(B, S);
  for (std::size_t b = 0; b < B; ++b) {
    const SceneRecord& s = data[batch[b].scene];
    if (s.gt_state.pose.size() != J + 1 || s.gt_state.shape.size() != S) {
      throw Error(ErrorKind::Shape, "scene does not match the flow dimensions");
    }
    for (std::size_t j = 0; j < J; ++j) mat3_to_row(s.gt_state.pose[j + 1].matrix(), rot, b * J + j);
    mat3_to_row(camera_root(s, batch[b].view).matrix(), global, b);
    for (std::size_t c = 0; c < S; ++c) beta(b, c) = s.gt_state.shape[c];
  }

  std::array<Var, 6> terms;
  const double inv_b = 1.0 / static_cast<double>(B);
  terms[1] = -inv_b * dg::sum(flow.log_prob_rows(params, tape.constant(rot), ctx, RowIndex::grid(B, J)));

  Var shape = flow.shape_rows(params, ctx);
  Var mu = dg::slice_cols(shape, 0, S), log_std = dg::slice_cols(shape, S, 2 * S);
  Var zs = (tape.constant(beta) - mu) * dg::exp(-log_std);
  terms[2] = inv_b * dg::sum(0.5 * dg::square(zs) + log_std) + static_cast<double>(S) * kHalfLog2Pi;

  Var global_pred = flow.global_rows(params, ctx);
  terms[3] = dg::mean(geodesic_sq_rows(global_pred, tape.constant(global)));

  if (cfg.predict_scale) {
    Var scales = dg::reshape(pipe.anchor_scales(params, ctx), B * na, 1);
    std::vector<std::uint32_t> visible;
    Tensor pred(B * na, 2), gt(B * na, 2);
    for (std::size_t b = 0; b < B; ++b) {
      const SceneRecord& s = data[batch[b].scene];
      const Observation& o = s.views[batch[b].view];
      for (std::size_t a = 0; a < na; ++a) {
        const auto r = static_cast<long>(a);
        const std::size_t i = b * na + a;
        pred(i, 0) = o.anchors_2d(r, 0);
        pred(i, 1) = o.anchors_2d(r, 1);
        gt(i, 0) = s.gt_anchors[batch[b].view](r, 0);
        gt(i, 1) = s.gt_anchors[batch[b].view](r, 1);
        if (o.aux_weight[r] > 0.0) visible.push_back(static_cast<std::uint32_t>(i));
      }
    }
    if (!visible.empty()) {
      terms[0] = laplacian_nll(dg::gather_rows(tape.constant(pred), visible), dg::gather_rows(scales, visible),
                               dg::gather_rows(tape.constant(gt), visible));
    }
  }

  if (phase == 2) {
    std::vector<Var> l2, l3;
    for (std::size_t b = 0; b < B; ++b) {
      const SceneRecord& s = data[batch[b].scene];
      const PoseSample mode = flow.mode(pipe.store(), ctx.value().data().subspan(b * ctx.cols(), ctx.cols()));
      auto [a, c] = mode_losses(tape, model, s, batch[b].view, mode.joint_rotations,
                                dg::slice_rows(global_pred, b, b + 1), dg::slice_rows(mu, b, b + 1));
      l2.push_back(a);
      l3.push_back(c);
    }
    terms[4] = inv_b * dg::sum(dg::concat_rows(l2));
    terms[5] = inv_b * dg::sum(dg::concat_rows(l3));
  }

  BatchLoss out;
  Var total;
  bool first = true;
  for (std::size_t i = 0; i < 6; ++i) {
    if (terms[i].tape == nullptr) continue;
    out.terms[i] = terms[i].item();
    if (cfg.lambdas[i] == 0.0) continue;
    Var weighted = cfg.lambdas[i] * terms[i];
    total = first ? weighted : total + weighted;
    first = false;
  }
  if (first) throw Error(ErrorKind::Contract, "every active loss weight is zero");
  out.total = total.item();
  if (!std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "non-finite loss: lnll=" << out.terms[0] << " pose=" << out.terms[1] << " shape=" << out.terms[2]
        << " global=" << out.terms[3] << " 2d=" << out.terms[4] << " 3d=" << out.terms[5];
    throw Error(ErrorKind::TrainingAborted, msg.str());
  }
  tape.backward(total);
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Var& p : params) grads.push_back(tape.grad(p));
  out.grad_norm = opt.step(pipe.store(), grads);
  if (!std::isfinite(out.grad_norm)) throw Error(ErrorKind::TrainingAborted, "non-finite gradient norm");
  return out;
}

std::vector<EpochLog> train(Pipeline& pipe, const BodyModelDef& model, const std::vector<SceneRecord>& data,
                            const TrainConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw Error(ErrorKind::Contract, "training needs at least one scene");
  std::vector<TrainSample> samples;
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t v = 0; v < data[s].views.size(); ++v) samples.push_back({s, v});

  dg::Optimizer opt(cfg.optimizer, pipe.store());
  Rng rng = Rng::stream(seed, 0x7261696eull);
  std::vector<EpochLog> log;
  const std::size_t total_epochs = cfg.phase1_epochs + cfg.phase2_epochs;
  for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) {
    const int phase = epoch < cfg.phase1_epochs ? 1 : 2;
    if (phase == 2 && epoch == cfg.phase1_epochs && cfg.phase2_learning_rate > 0.0) {
      opt.set_learning_rate(cfg.phase2_learning_rate);
    }
    for (std::size_t i = samples.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.next() % i);
      std::swap(samples[i - 1], samples[j]);
    }
    EpochLog e;
    e.phase = phase;
    e.epoch = epoch + 1;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(samples.size(), begin + cfg.batch_size);
      BatchLoss l;
      try {
        l = train_step(pipe, model, data, std::span(samples).subspan(begin, end - begin), cfg, phase, opt);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::NonFinite) throw;
        throw Error(ErrorKind::TrainingAborted, "epoch " + std::to_string(epoch + 1) + ": " + err.what());
      }
      e.total += l.total;
      e.anchor_nll += l.terms[0];
      e.pose_nll += l.terms[1];
      e.shape_nll += l.terms[2];
      e.global_geodesic += l.terms[3];
      e.mode_2d += l.terms[4];
      e.mode_3d += l.terms[5];
      e.grad_norm += l.grad_norm;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    for (double* v : {&e.total, &e.anchor_nll, &e.pose_nll, &e.shape_nll, &e.global_geodesic, &e.mode_2d, &e.mode_3d,
                      &e.grad_norm}) {
      *v *= inv;
    }
    log.push_back(e);
  }
  return log;
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(10);
  out << "phase,epoch,total,anchor_nll,pose_nll,shape_nll,global_geodesic,mode_2d,mode_3d,grad_norm\n";
  for (const auto& e : log) {
    out << e.phase << ',' << e.epoch << ',' << e.total << ',' << e.anchor_nll << ',' << e.pose_nll << ','
        << e.shape_nll << ',' << e.global_geodesic << ',' << e.mode_2d << ',' << e.mode_3d << ',' << e.grad_norm
        << '\n';
  }
  return out.str();
}

double mean_pose_nll(const Pipeline& pipe, const std::vector<SceneRecord>& data, std::size_t view) {
  if (data.empty()) throw Error(ErrorKind::Contract, "mean_pose_nll needs at least one scene");
  const FlowModel& flow = pipe.flow();
  const std::size_t J = flow.config().joints, C = flow.config().context_dim;
  Tensor rot(data.size() * J, 9), ctx(data.size(), C);
  for (std::size_t s = 0; s < data.size(); ++s) {
    for (std::size_t j = 0; j < J; ++j) mat3_to_row(data[s].gt_state.pose[j + 1].matrix(), rot, s * J + j);
    const auto c = pipe.context(data[s].context_features.at(view));
    std::copy(c.begin(), c.end(), ctx.vec().begin() + static_cast<long>(s * C));
  }
  const auto lp = flow.log_prob_batch(pipe.store(), rot, ctx, RowIndex::grid(data.size(), J), Backend::Serial);
  double total = 0.0;
  for (double v : lp) total += v;
  return -total / static_cast<double>(data.size());
}

}  // namespace flowpose
