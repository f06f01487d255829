#include <cmath>

#include "flowpose/harness.hpp"

namespace flowpose {

using dg::Tape;
using dg::Tensor;
using dg::Var;
using nlohmann::json;

std::vector<KeySpec> PipelineConfig::schema() {
  std::vector<KeySpec> keys = {{"encoder_hidden", "int", "width of the residual context encoder"},
                               {"flow", "object", "flow architecture"}};
  for (const auto& k : FlowConfig::schema()) keys.push_back({"flow." + k.key, k.type, k.help});
  return keys;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  const std::vector<KeySpec> keys = {{"encoder_hidden", "", ""}, {"flow", "", ""}};
  check_keys(j, keys, "pipeline");
  PipelineConfig c;
  read_key(j, "encoder_hidden", c.encoder_hidden, "pipeline");
  if (j.contains("flow")) c.flow = FlowConfig::from_json(j.at("flow"));
  require(c.encoder_hidden > 0, "pipeline.encoder_hidden must be positive");
  return c;
}

json PipelineConfig::to_json() const { return {{"encoder_hidden", encoder_hidden}, {"flow", flow.to_json()}}; }

Pipeline Pipeline::create(PipelineConfig cfg, const BodyModelDef& model, std::uint64_t seed) {
  if (model.num_joints() < 2) throw Error(ErrorKind::Contract, "the body model needs a root and at least one joint");
  cfg.flow.joints = model.num_joints() - 1;
  cfg.flow.shape_dim = model.shape_dim();
  cfg.flow.validate();
  Pipeline p;
  p.cfg_ = cfg;
  p.anchors_ = model.anchor_indices.size();
  Rng rng(seed);
  p.flow_ = FlowModel::create(cfg.flow, p.store_, rng);
  const std::size_t f = context_feature_dim(p.anchors_), h = cfg.encoder_hidden, c = cfg.flow.context_dim;
  p.enc_in_ = dg::Linear::create(p.store_, "encoder.input", f, h, rng);
  p.enc_block_ = dg::Linear::create(p.store_, "encoder.block", h, h, rng);
  p.enc_out_ = dg::Linear::create(p.store_, "encoder.output", h, c, rng);
  p.scale_head_ = dg::Linear::create(p.store_, "scale_head", c, p.anchors_, rng, 0.1);
  p.store_.tensor(p.scale_head_.bias).fill(std::log(2.0));
  return p;
}

void Pipeline::save(const std::string& base) const {
  store_.save(base, {{"format_version", kCheckpointFormatVersion}, {"pipeline", cfg_.to_json()}, {"anchors", anchors_}});
}

Pipeline Pipeline::load(const std::string& base) {
  json extra;
  dg::ParamStore loaded = dg::ParamStore::load(base, &extra);
  PipelineConfig cfg;
  std::size_t anchors = 0;
  try {
    if (extra.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw Error(ErrorKind::Load, "unsupported checkpoint format_version");
    }
    cfg = PipelineConfig::from_json(extra.at("pipeline"));
    anchors = extra.at("anchors").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Load, std::string("checkpoint manifest: ") + e.what());
  }
  BodyModelDef shell;
  shell.parents.assign(cfg.flow.joints + 1, 0);
  shell.parents[0] = -1;
  shell.shape_basis.resize(static_cast<long>(cfg.flow.shape_dim), 0);
  shell.anchor_indices.assign(anchors, 0);
  Pipeline p = create(cfg, shell, 0);
  if (loaded.size() != p.store_.size()) throw Error(ErrorKind::Load, "checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const std::size_t k = p.store_.find(loaded.name(i));
    if (!p.store_.tensor(k).same_shape(loaded.tensor(i))) {
      throw Error(ErrorKind::Load, "checkpoint shape mismatch for " + loaded.name(i));
    }
  }
  p.store_.assign_from(loaded);
  return p;
}

Var Pipeline::encode(std::span<const Var> params, Var features) const {
  Var h = dg::tanh(enc_in_(params, features));
  h = h + dg::tanh(enc_block_(params, h));
  return enc_out_(params, h);
}

Var Pipeline::anchor_scales(std::span<const Var> params, Var context) const {
  return dg::exp(scale_head_(params, context));
}

std::vector<double> Pipeline::context(std::span<const double> features) const {
  if (features.size() != context_feature_dim(anchors_)) throw Error(ErrorKind::Shape, "context feature length mismatch");
  Tape tape(false);
  const auto params = store_.bind(tape);
  Var c = encode(params, tape.constant(Tensor::row({features.begin(), features.end()})));
  return c.value().vec();
}

Eigen::VectorXd Pipeline::anchor_scales(std::span<const double> context) const {
  Tape tape(false);
  const auto params = store_.bind(tape);
  Var s = anchor_scales(params, tape.constant(Tensor::row({context.begin(), context.end()})));
  return Eigen::Map<const Eigen::VectorXd>(s.value().data().data(), static_cast<long>(anchors_));
}

}  // namespace flowpose
