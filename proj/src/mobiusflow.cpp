#include "flowpose/mobiusflow.hpp"

#include <cmath>
#include <numbers>

#include "flowpose/diffrot.hpp"

namespace flowpose {

using dg::ParamStore;
using dg::Tape;
using dg::Tensor;
using dg::Var;

Vec3 constrain_omega(const Vec3& raw, double margin) {
  const double n = raw.norm();
  if (n < 1e-4) return raw * ((1.0 - margin) * (1.0 - n * n / 3.0));
  return raw * ((1.0 - margin) * std::tanh(n) / n);
}

void MobiusParams::validate(double margin) const {
  if (omegas.size() != weights.size() || omegas.empty()) {
    throw Error(ErrorKind::Contract, "Möbius parameters need matching, nonempty omega and weight lists");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < omegas.size(); ++j) {
    if (!(omegas[j].norm() <= 1.0 - margin + 1e-12)) throw Error(ErrorKind::Contract, "|omega| exceeds 1 - margin");
    if (!(weights[j] >= 0.0)) throw Error(ErrorKind::Contract, "negative Möbius weight");
    total += weights[j];
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorKind::Contract, "Möbius weights must sum to 1");
}

namespace {

void check_frame(const Vec3& held, const Vec3& moving) {
  if (std::abs(held.norm() - 1.0) > 1e-8 || std::abs(moving.norm() - 1.0) > 1e-8 ||
      std::abs(held.dot(moving)) > 1e-8) {
    throw Error(ErrorKind::InvalidFrame, "held and moving vectors must be orthonormal");
  }
}

// Angle offset sum_j w_j * 2 arg(1 + c_j e^{-iM}) for c_j = a_j + i b_j.
double offset(const double* a, const double* b, const double* w, std::size_t k, std::size_t stride, double m) {
  const double cm = std::cos(m), sm = std::sin(m);
  double t = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double re = a[j * stride] * cm + b[j * stride] * sm;
    const double im = b[j * stride] * cm - a[j * stride] * sm;
    t += w[j * stride] * 2.0 * std::atan2(im, 1.0 + re);
  }
  return t;
}

// Root of M + offset(M) on [-pi, pi].
std::pair<double, int> bisect(const double* a, const double* b, const double* w, std::size_t k, std::size_t stride,
                              double eps, int max_iterations) {
  double lo = -std::numbers::pi, hi = std::numbers::pi;
  for (int it = 1; it <= max_iterations; ++it) {
    const double m = 0.5 * (lo + hi);
    const double r = offset(a, b, w, k, stride, m) + m;
    if (std::abs(r) < eps) return {m, it};
    if (r < 0.0) {
      lo = m;
    } else {
      hi = m;
    }
  }
  throw Error(ErrorKind::NonConvergence, "Möbius bisection did not converge");
}

}  // namespace

MobiusResult mobius_forward(const Vec3& held, const Vec3& moving, const MobiusParams& p) {
  check_frame(held, moving);
  p.validate();
  const Vec3 u3 = moving.cross(held);
  double theta = 0.0, dsum = 0.0;
  for (std::size_t j = 0; j < p.k(); ++j) {
    const double a = p.omegas[j].dot(moving);
    const double b = p.omegas[j].dot(u3);
    theta += p.weights[j] * 2.0 * std::atan2(b, 1.0 + a);
    dsum += p.weights[j] * (1.0 - a * a - b * b) / ((1.0 + a) * (1.0 + a) + b * b);
  }
  return {std::cos(theta) * moving + std::sin(theta) * u3, std::log(dsum)};
}

MobiusInverseResult mobius_inverse(const Vec3& moved, const Vec3& held, const MobiusParams& p, double eps,
                                   int max_iterations) {
  check_frame(held, moved);
  p.validate();
  const Vec3 u3 = moved.cross(held);
  std::vector<double> a(p.k()), b(p.k());
  for (std::size_t j = 0; j < p.k(); ++j) {
    a[j] = p.omegas[j].dot(moved);
    b[j] = p.omegas[j].dot(u3);
  }
  const auto [m, it] = bisect(a.data(), b.data(), p.weights.data(), p.k(), 1, eps, max_iterations);
  return {std::cos(m) * moved + std::sin(m) * u3, it};
}

CircleMap mobius_circle(double phi, std::span<const std::complex<double>> omegas, std::span<const double> weights) {
  if (omegas.size() != weights.size()) throw Error(ErrorKind::Shape, "omega and weight counts differ");
  CircleMap out;
  out.angle = phi;
  out.derivative = 0.0;
  const std::complex<double> rot = std::polar(1.0, -phi);
  for (std::size_t j = 0; j < omegas.size(); ++j) {
    const std::complex<double> c = omegas[j] * rot;
    out.angle += weights[j] * 2.0 * std::arg(1.0 + c);
    out.derivative += weights[j] * (1.0 - std::norm(c)) / std::norm(1.0 + c);
  }
  return out;
}

Tensor mobius_inverse_batch(const Tensor& moved, const Tensor& held, const Tensor& omega, const Tensor& weights,
                            double eps, int max_iterations, Backend backend, std::vector<int>* iterations) {
  const std::size_t n = moved.rows();
  const std::size_t k = weights.cols();
  if (moved.cols() != 3 || held.cols() != 3 || held.rows() != n || omega.rows() != n || weights.rows() != n ||
      omega.cols() != 3 * k) {
    throw Error(ErrorKind::Shape, "mobius_inverse_batch: inconsistent shapes");
  }
  Tensor out(n, 3);
  if (iterations) iterations->assign(n, 0);
  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (n + kBlock - 1) / kBlock;
  parallel_for(blocks, backend, [&](std::size_t blk) {
    std::vector<double> a(k), b(k);
    const std::size_t end = std::min(n, (blk + 1) * kBlock);
    for (std::size_t i = blk * kBlock; i < end; ++i) {
      const Vec3 y(moved(i, 0), moved(i, 1), moved(i, 2));
      const Vec3 h(held(i, 0), held(i, 1), held(i, 2));
      const Vec3 u3 = y.cross(h);
      for (std::size_t j = 0; j < k; ++j) {
        const Vec3 w(omega(i, j), omega(i, k + j), omega(i, 2 * k + j));
        a[j] = w.dot(y);
        b[j] = w.dot(u3);
      }
      const auto [m, it] = bisect(a.data(), b.data(), weights.data().data() + i * k, k, 1, eps, max_iterations);
      const Vec3 x = std::cos(m) * y + std::sin(m) * u3;
      for (int c = 0; c < 3; ++c) out(i, c) = x[c];
      if (iterations) (*iterations)[i] = it;
    }
  });
  return out;
}

// ---------------------------------------------------------------- config

std::vector<KeySpec> FlowConfig::schema() {
  return {
      {"joints", "int", "number of joints modelled by the flow"},
      {"context_dim", "int", "length of the conditioning vector"},
      {"shape_dim", "int", "number of shape coefficients predicted by the shape head"},
      {"layers", "int", "coupling-pair plus rotation-layer sets"},
      {"transforms", "int", "Möbius maps combined per coupling"},
      {"hidden", "int", "conditioner width"},
      {"blocks", "int", "residual blocks per conditioner"},
      {"embed_dim", "int", "learned per-joint embedding length"},
      {"head_hidden", "int", "width of the global-rotation and shape heads"},
      {"kappa", "float", "base distribution concentration"},
      {"omega_margin", "float", "|omega| <= 1 - omega_margin"},
      {"bisection_eps", "float", "inverse tolerance on the angle residual"},
      {"bisection_max_iterations", "int", "bisection iteration cap"},
  };
}

FlowConfig FlowConfig::from_json(const nlohmann::json& j) {
  const auto keys = schema();
  check_keys(j, keys, "flow");
  FlowConfig c;
  read_key(j, "joints", c.joints, "flow");
  read_key(j, "context_dim", c.context_dim, "flow");
  read_key(j, "shape_dim", c.shape_dim, "flow");
  read_key(j, "layers", c.layers, "flow");
  read_key(j, "transforms", c.transforms, "flow");
  read_key(j, "hidden", c.hidden, "flow");
  read_key(j, "blocks", c.blocks, "flow");
  read_key(j, "embed_dim", c.embed_dim, "flow");
  read_key(j, "head_hidden", c.head_hidden, "flow");
  read_key(j, "kappa", c.kappa, "flow");
  read_key(j, "omega_margin", c.omega_margin, "flow");
  read_key(j, "bisection_eps", c.bisection_eps, "flow");
  read_key(j, "bisection_max_iterations", c.bisection_max_iterations, "flow");
  c.validate();
  return c;
}

nlohmann::json FlowConfig::to_json() const {
  return {{"joints", joints},
          {"context_dim", context_dim},
          {"shape_dim", shape_dim},
          {"layers", layers},
          {"transforms", transforms},
          {"hidden", hidden},
          {"blocks", blocks},
          {"embed_dim", embed_dim},
          {"head_hidden", head_hidden},
          {"kappa", kappa},
          {"omega_margin", omega_margin},
          {"bisection_eps", bisection_eps},
          {"bisection_max_iterations", bisection_max_iterations}};
}

void FlowConfig::validate() const {
  require(joints > 0, "flow.joints must be positive");
  require(context_dim > 0, "flow.context_dim must be positive");
  require(transforms > 0, "flow.transforms must be positive");
  require(hidden > 0 && head_hidden > 0, "flow widths must be positive");
  require(kappa > 0.0 && std::isfinite(kappa), "flow.kappa must be positive");
  require(omega_margin > 0.0 && omega_margin < 1.0, "flow.omega_margin must lie in (0, 1)");
  require(bisection_eps > 0.0, "flow.bisection_eps must be positive");
  require(bisection_max_iterations > 0, "flow.bisection_max_iterations must be positive");
}

RowIndex RowIndex::grid(std::size_t scenes, std::size_t joints) {
  RowIndex r;
  r.scene.reserve(scenes * joints);
  r.joint.reserve(scenes * joints);
  for (std::size_t b = 0; b < scenes; ++b) {
    for (std::size_t j = 0; j < joints; ++j) {
      r.scene.push_back(static_cast<std::uint32_t>(b));
      r.joint.push_back(static_cast<std::uint32_t>(j));
    }
  }
  return r;
}

// ---------------------------------------------------------------- model

namespace {

const double kIdentityRow[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

void set_identity_bias(ParamStore& store, const ResMlp& net) {
  Tensor& b = store.tensor(net.output.bias);
  for (std::size_t i = 0; i < 9; ++i) b[i] = kIdentityRow[i];
}

struct ConditionerOutput {
  Var omega;    // N x 3k
  Var weights;  // N x k
};

ConditionerOutput run_conditioner(std::span<const Var> params, const ResMlp& cond, Var held, Var cond_input,
                                  std::size_t k, double margin) {
  Var raw = cond(params, dg::concat_cols({held, cond_input}));
  return {constrain_omega_rows(dg::slice_cols(raw, 0, 3 * k), k, margin), dg::softmax(dg::slice_cols(raw, 3 * k, 4 * k))};
}

Tensor slice_tensor_cols(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out(t.rows(), end - begin);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = t(r, c);
  return out;
}

RowIndex subset(const RowIndex& rows, std::size_t begin, std::size_t end) {
  RowIndex r;
  r.scene.assign(rows.scene.begin() + static_cast<std::ptrdiff_t>(begin), rows.scene.begin() + static_cast<std::ptrdiff_t>(end));
  r.joint.assign(rows.joint.begin() + static_cast<std::ptrdiff_t>(begin), rows.joint.begin() + static_cast<std::ptrdiff_t>(end));
  return r;
}

Tensor row_block(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out(end - begin, t.cols());
  std::copy(t.vec().begin() + static_cast<std::ptrdiff_t>(begin * t.cols()),
            t.vec().begin() + static_cast<std::ptrdiff_t>(end * t.cols()), out.vec().begin());
  return out;
}

void check_rows(const FlowConfig& cfg, const Tensor& rotations, const Tensor& context, const RowIndex& rows) {
  if (rotations.cols() != 9 || rotations.rows() != rows.size() || rows.joint.size() != rows.scene.size()) {
    throw Error(ErrorKind::Shape, "flow rows: rotations must be N x 9 with N row indices");
  }
  if (context.cols() != cfg.context_dim) throw Error(ErrorKind::Shape, "flow rows: context width mismatch");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows.scene[i] >= context.rows() || rows.joint[i] >= cfg.joints) {
      throw Error(ErrorKind::Shape, "flow rows: row index out of range");
    }
  }
}

}  // namespace

FlowModel FlowModel::create(const FlowConfig& cfg, ParamStore& store, Rng& rng) {
  cfg.validate();
  FlowModel m;
  m.cfg_ = cfg;
  Tensor emb(cfg.joints, cfg.embed_dim);
  for (double& v : emb.vec()) v = 0.5 * rng.normal();
  m.embedding_ = store.add("flow.joint_embedding", std::move(emb));
  const std::size_t ci = cfg.context_dim + cfg.embed_dim;
  const std::size_t k = cfg.transforms;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "flow.layer" + std::to_string(l);
    Layer layer;
    layer.cond_a = ResMlp::create(store, p + ".couple_a", 3 + ci, cfg.hidden, cfg.blocks, 4 * k, rng);
    layer.cond_b = ResMlp::create(store, p + ".couple_b", 3 + ci, cfg.hidden, cfg.blocks, 4 * k, rng);
    layer.rotation = ResMlp::create(store, p + ".rotate", ci, cfg.hidden, cfg.blocks, 9, rng);
    set_identity_bias(store, layer.rotation);
    m.layers_.push_back(std::move(layer));
  }
  m.global_head_ = ResMlp::create(store, "flow.global_head", cfg.context_dim, cfg.head_hidden, 1, 9, rng);
  set_identity_bias(store, m.global_head_);
  m.shape_head_ = ResMlp::create(store, "flow.shape_head", cfg.context_dim, cfg.head_hidden, 1, 2 * cfg.shape_dim, rng);
  return m;
}

Var FlowModel::context_rows(std::span<const Var> params, Var context, const RowIndex& rows) const {
  Var ctx = dg::gather_rows(context, rows.scene);
  if (cfg_.embed_dim == 0) return ctx;
  Var emb = dg::gather_rows(params[embedding_], rows.joint);
  return dg::concat_cols({ctx, emb});
}

CouplingOutput FlowModel::coupling(std::span<const Var> params, const ResMlp& cond, Var held, Var moving,
                                   Var cond_input) const {
  const std::size_t k = cfg_.transforms;
  const auto [omega, w] = run_conditioner(params, cond, held, cond_input, k, cfg_.omega_margin);
  Var u3 = dg::cross(moving, held);
  Var ox = dg::slice_cols(omega, 0, k);
  Var oy = dg::slice_cols(omega, k, 2 * k);
  Var oz = dg::slice_cols(omega, 2 * k, 3 * k);
  auto project = [&](Var v) {
    return ox * dg::slice_cols(v, 0, 1) + oy * dg::slice_cols(v, 1, 2) + oz * dg::slice_cols(v, 2, 3);
  };
  Var a = project(moving);
  Var b = project(u3);
  Var ap1 = a + 1.0;
  Var theta = dg::sum_rows(w * (2.0 * dg::atan2(b, ap1)));
  Var moved = dg::cos(theta) * moving + dg::sin(theta) * u3;
  Var num = dg::add_scalar(-(dg::square(a) + dg::square(b)), 1.0);
  Var den = dg::square(ap1) + dg::square(b);
  Var logdet = dg::log(dg::sum_rows(w * (num / den)));
  return {moved, logdet};
}

FlowOutput FlowModel::coupling_block(std::span<const Var> params, std::size_t layer, Var rotations,
                                     Var cond_input) const {
  const Layer& L = layers_.at(layer);
  Var u1 = dg::slice_cols(rotations, 0, 3);
  Var u2 = dg::slice_cols(rotations, 3, 6);
  const CouplingOutput a = coupling(params, L.cond_a, u1, u2, cond_input);
  const CouplingOutput b = coupling(params, L.cond_b, a.moved, u1, cond_input);
  Var u3 = dg::cross(b.moved, a.moved);
  return {dg::concat_cols({b.moved, a.moved, u3}), a.logdet + b.logdet};
}

Var FlowModel::rotation_layer_matrix(std::span<const Var> params, std::size_t layer, Var cond_input) const {
  return orthogonalize_rows(layers_.at(layer).rotation(params, cond_input));
}

FlowOutput FlowModel::normalize(std::span<const Var> params, Var rotations, Var context, const RowIndex& rows) const {
  Tape& tape = *rotations.tape;
  Var ci = context_rows(params, context, rows);
  Var r = rotations;
  Var logdet = tape.constant(Tensor(rotations.rows(), 1));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const FlowOutput c = coupling_block(params, l, r, ci);
    logdet = logdet + c.logdet;
    r = rotmul_rows(rotation_layer_matrix(params, l, ci), c.base_point);
  }
  return {r, logdet};
}

Var FlowModel::log_prob_rows(std::span<const Var> params, Var rotations, Var context, const RowIndex& rows) const {
  const FlowOutput out = normalize(params, rotations, context, rows);
  return pig_logpdf_rows(out.base_point, Rotation::identity(), cfg_.kappa) + out.logdet;
}

Var FlowModel::global_rows(std::span<const Var> params, Var context) const {
  return orthogonalize_rows(global_head_(params, context));
}

Var FlowModel::shape_rows(std::span<const Var> params, Var context) const { return shape_head_(params, context); }

std::vector<double> FlowModel::log_prob_batch(const ParamStore& store, const Tensor& rotations, const Tensor& context,
                                              const RowIndex& rows, Backend backend, std::size_t chunk) const {
  check_rows(cfg_, rotations, context, rows);
  const std::size_t n = rows.size();
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<double> out(n);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  parallel_for(chunks, backend, [&](std::size_t c) {
    const std::size_t begin = c * chunk, end = std::min(n, begin + chunk);
    Tape tape(false);
    const auto params = store.bind(tape);
    Var lp = log_prob_rows(params, tape.constant(row_block(rotations, begin, end)), tape.constant(context),
                           subset(rows, begin, end));
    for (std::size_t i = begin; i < end; ++i) out[i] = lp.value()[i - begin];
  });
  return out;
}

Tensor FlowModel::inverse_batch(const ParamStore& store, const Tensor& base_points, const Tensor& context,
                                const RowIndex& rows, Backend backend, double eps, int* max_iterations_seen) const {
  check_rows(cfg_, base_points, context, rows);
  const std::size_t n = rows.size();
  const std::size_t k = cfg_.transforms;
  constexpr std::size_t kChunk = 1024;
  Tensor out(n, 9);
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<int> worst(chunks, 0);
  parallel_for(chunks, backend, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
    const std::size_t m = end - begin;
    Tape tape(false);
    const auto params = store.bind(tape);
    Var ci = context_rows(params, tape.constant(context), subset(rows, begin, end));
    Tensor r = row_block(base_points, begin, end);
    std::vector<int> its;
    auto track = [&] {
      for (int v : its) worst[c] = std::max(worst[c], v);
    };
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Tensor& q = rotation_layer_matrix(params, l, ci).value();
      for (std::size_t i = 0; i < m; ++i) mat3_to_row(row_to_mat3(q, i).transpose() * row_to_mat3(r, i), r, i);
      const Layer& L = layers_[l];
      // undo sub-step B: u2 is held, u1 was moved
      const Tensor u2 = slice_tensor_cols(r, 3, 6);
      const ConditionerOutput cb = run_conditioner(params, L.cond_b, tape.constant(u2), ci, k, cfg_.omega_margin);
      const Tensor u1 = mobius_inverse_batch(slice_tensor_cols(r, 0, 3), u2, cb.omega.value(), cb.weights.value(), eps,
                                             cfg_.bisection_max_iterations, Backend::Serial, &its);
      track();
      // undo sub-step A: u1 is held, u2 was moved
      const ConditionerOutput ca = run_conditioner(params, L.cond_a, tape.constant(u1), ci, k, cfg_.omega_margin);
      const Tensor u2_prev = mobius_inverse_batch(u2, u1, ca.omega.value(), ca.weights.value(), eps,
                                                  cfg_.bisection_max_iterations, Backend::Serial, &its);
      track();
      for (std::size_t i = 0; i < m; ++i) {
        const Vec3 x(u1(i, 0), u1(i, 1), u1(i, 2));
        const Vec3 y(u2_prev(i, 0), u2_prev(i, 1), u2_prev(i, 2));
        const Vec3 z = x.cross(y);
        for (int j = 0; j < 3; ++j) {
          r(i, j) = x[j];
          r(i, 3 + j) = y[j];
          r(i, 6 + j) = z[j];
        }
      }
    }
    std::copy(r.vec().begin(), r.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(begin * 9));
  });
  if (max_iterations_seen) {
    *max_iterations_seen = 0;
    for (int v : worst) *max_iterations_seen = std::max(*max_iterations_seen, v);
  }
  return out;
}

std::vector<MobiusParams> FlowModel::conditioner_params(const ParamStore& store, std::size_t layer, int sub,
                                                      const Tensor& held, const Tensor& context,
                                                      const RowIndex& rows) const {
  if (held.cols() != 3 || held.rows() != rows.size()) throw Error(ErrorKind::Shape, "held vectors must be N x 3");
  check_rows(cfg_, Tensor(rows.size(), 9), context, rows);
  const std::size_t k = cfg_.transforms;
  Tape tape(false);
  const auto params = store.bind(tape);
  Var ci = context_rows(params, tape.constant(context), rows);
  const Layer& L = layers_.at(layer);
  const ConditionerOutput c = run_conditioner(params, sub == 0 ? L.cond_a : L.cond_b, tape.constant(held), ci, k,
                                              cfg_.omega_margin);
  std::vector<MobiusParams> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out[i].omegas.emplace_back(c.omega.value()(i, j), c.omega.value()(i, k + j), c.omega.value()(i, 2 * k + j));
      out[i].weights.push_back(c.weights.value()(i, j));
    }
  }
  return out;
}

namespace {

Tensor context_tensor(std::span<const double> context, std::size_t dim) {
  if (context.size() != dim) throw Error(ErrorKind::Shape, "context length does not match the flow");
  return Tensor(1, dim, std::vector<double>(context.begin(), context.end()));
}

Rotation rotation_from_row(const Tensor& t, std::size_t i) {
  // rows come from products of rotations; renormalize through the quaternion
  return special_orthogonalize(row_to_mat3(t, i));
}

}  // namespace

double FlowModel::log_prob(const ParamStore& store, std::span<const Rotation> joint_rotations,
                           std::span<const double> context) const {
  if (joint_rotations.size() != cfg_.joints) throw Error(ErrorKind::Shape, "joint count does not match the flow");
  const auto lp = log_prob_batch(store, rotations_to_tensor(joint_rotations), context_tensor(context, cfg_.context_dim),
                                 RowIndex::grid(1, cfg_.joints), Backend::Serial);
  double total = 0.0;
  for (double v : lp) total += v;
  return total;
}

Rotation FlowModel::global_rotation(const ParamStore& store, std::span<const double> context) const {
  Tape tape(false);
  const auto params = store.bind(tape);
  Var g = global_rows(params, tape.constant(context_tensor(context, cfg_.context_dim)));
  return rotation_from_row(g.value(), 0);
}

DiagGaussian FlowModel::shape_distribution(const ParamStore& store, std::span<const double> context) const {
  Tape tape(false);
  const auto params = store.bind(tape);
  const Tensor& s = shape_rows(params, tape.constant(context_tensor(context, cfg_.context_dim))).value();
  std::vector<double> mean(cfg_.shape_dim), log_std(cfg_.shape_dim);
  for (std::size_t i = 0; i < cfg_.shape_dim; ++i) {
    mean[i] = s[i];
    log_std[i] = s[cfg_.shape_dim + i];
  }
  return DiagGaussian(std::move(mean), std::move(log_std));
}

std::vector<PoseSample> FlowModel::finish_samples(const ParamStore& store, std::span<const double> context,
                                                  const Tensor& base_points, const Tensor& rotations, std::size_t n,
                                                  Rng* rng, Backend backend) const {
  const std::size_t J = cfg_.joints;
  const Tensor ctx = context_tensor(context, cfg_.context_dim);
  const RowIndex rows = RowIndex::grid(n, J);
  RowIndex one_scene = rows;
  std::fill(one_scene.scene.begin(), one_scene.scene.end(), 0u);

  // base point and logdet at the recovered rotations
  std::vector<double> base_recovered(n * J), logdet(n * J);
  constexpr std::size_t kChunk = 2048;
  const std::size_t chunks = (n * J + kChunk - 1) / kChunk;
  parallel_for(chunks, backend, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(n * J, begin + kChunk);
    Tape tape(false);
    const auto params = store.bind(tape);
    const FlowOutput f = normalize(params, tape.constant(row_block(rotations, begin, end)), tape.constant(ctx),
                                   subset(one_scene, begin, end));
    Var lb = pig_logpdf_rows(f.base_point, Rotation::identity(), cfg_.kappa);
    for (std::size_t i = begin; i < end; ++i) {
      base_recovered[i] = lb.value()[i - begin];
      logdet[i] = f.logdet.value()[i - begin];
    }
  });
  const ProjectedIsoGaussian base = this->base();
  const Rotation global = global_rotation(store, context);
  const DiagGaussian shape = shape_distribution(store, context);

  std::vector<PoseSample> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    PoseSample& p = out[s];
    p.global_rotation = global;
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t i = s * J + j;
      p.joint_rotations.push_back(rotation_from_row(rotations, i));
      p.log_prob += base_recovered[i] + logdet[i];
      p.sampling_log_prob += pig_logpdf(base, rotation_from_row(base_points, i)) + logdet[i];
    }
    p.shape = rng ? diag_gaussian_sample(shape, *rng) : shape.mean;
  }
  return out;
}

std::vector<PoseSample> FlowModel::sample(const ParamStore& store, std::span<const double> context, std::size_t n,
                                          Rng& rng, Backend backend, std::optional<double> eps) const {
  const std::size_t J = cfg_.joints;
  const ProjectedIsoGaussian base = this->base();
  Tensor z(n * J, 9);
  for (std::size_t i = 0; i < n * J; ++i) mat3_to_row(pig_sample(base, rng).matrix(), z, i);
  RowIndex rows = RowIndex::grid(n, J);
  std::fill(rows.scene.begin(), rows.scene.end(), 0u);
  const Tensor x = inverse_batch(store, z, context_tensor(context, cfg_.context_dim), rows, backend,
                                 eps.value_or(cfg_.bisection_eps));
  return finish_samples(store, context, z, x, n, &rng, backend);
}

PoseSample FlowModel::mode(const ParamStore& store, std::span<const double> context) const {
  const std::size_t J = cfg_.joints;
  Tensor z(J, 9);
  for (std::size_t i = 0; i < J; ++i) mat3_to_row(Mat3::Identity(), z, i);
  RowIndex rows = RowIndex::grid(1, J);
  const Tensor x = inverse_batch(store, z, context_tensor(context, cfg_.context_dim), rows, Backend::Serial,
                                 cfg_.bisection_eps);
  return finish_samples(store, context, z, x, 1, nullptr, Backend::Serial).front();
}

void randomize_params(ParamStore& store, Rng& rng, double scale) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (double& v : store.tensor(i).vec()) v += scale * rng.normal();
  }
}

}  // namespace flowpose
