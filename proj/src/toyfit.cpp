#include <cmath>
#include <numbers>

#include "flowpose/diffrot.hpp"
#include "flowpose/harness.hpp"
#include "flowpose/jsonio.hpp"

namespace flowpose {

using dg::Tape;
using dg::Tensor;
using dg::Var;
using nlohmann::json;

FlowConfig toy_flow_config() {
  FlowConfig c;
  c.joints = 1;
  c.context_dim = 4;
  c.shape_dim = 1;
  c.layers = 4;
  c.transforms = 8;
  c.hidden = 32;
  c.blocks = 1;
  c.embed_dim = 1;
  c.head_hidden = 4;
  return c;
}

std::vector<KeySpec> ToyFitConfig::schema() {
  std::vector<KeySpec> keys = {{"modes", "int", "number of target rotations"},
                               {"min_separation_deg", "float", "minimum geodesic distance between modes"},
                               {"noise_kappa", "float", "concentration of the noise around each mode"},
                               {"steps", "int", "gradient steps"},
                               {"batch_size", "int", "target samples per step"},
                               {"optimizer", "string", "sgd or adam"},
                               {"learning_rate", "float", "step size"},
                               {"clip_norm", "float", "global gradient-norm clip"},
                               {"eval_samples", "int", "flow samples used for captured mass"},
                               {"capture_deg", "float", "radius around a mode that counts as captured"},
                               {"heldout", "int", "held-out target samples for the NLL"},
                               {"flow", "object", "flow architecture"}};
  for (const auto& k : FlowConfig::schema()) keys.push_back({"flow." + k.key, k.type, k.help});
  return keys;
}

ToyFitConfig ToyFitConfig::from_json(const json& j) {
  std::vector<KeySpec> keys;
  for (const auto& k : schema()) {
    if (k.key.find('.') == std::string::npos) keys.push_back(k);
  }
  check_keys(j, keys, "toy");
  ToyFitConfig c;
  read_key(j, "modes", c.modes, "toy");
  read_key(j, "min_separation_deg", c.min_separation_deg, "toy");
  read_key(j, "noise_kappa", c.noise_kappa, "toy");
  read_key(j, "steps", c.steps, "toy");
  read_key(j, "batch_size", c.batch_size, "toy");
  read_key(j, "optimizer", c.optimizer.kind, "toy");
  read_key(j, "learning_rate", c.optimizer.learning_rate, "toy");
  read_key(j, "clip_norm", c.optimizer.clip_norm, "toy");
  read_key(j, "eval_samples", c.eval_samples, "toy");
  read_key(j, "capture_deg", c.capture_deg, "toy");
  read_key(j, "heldout", c.heldout, "toy");
  if (j.contains("flow")) {
    json merged = c.flow.to_json();
    merged.update(j.at("flow"));
    c.flow = FlowConfig::from_json(merged);
  }
  require(c.modes >= 1, "toy.modes must be at least 1");
  require(c.noise_kappa > 0.0, "toy.noise_kappa must be positive");
  require(c.batch_size > 0 && c.eval_samples > 0 && c.heldout > 0, "toy sample counts must be positive");
  require(c.flow.joints == 1, "toy.flow.joints must be 1");
  return c;
}

json ToyFitConfig::to_json() const {
  return {{"modes", modes},
          {"min_separation_deg", min_separation_deg},
          {"noise_kappa", noise_kappa},
          {"steps", steps},
          {"batch_size", batch_size},
          {"optimizer", optimizer.kind},
          {"learning_rate", optimizer.learning_rate},
          {"clip_norm", optimizer.clip_norm},
          {"eval_samples", eval_samples},
          {"capture_deg", capture_deg},
          {"heldout", heldout},
          {"flow", flow.to_json()}};
}

json ToyFitReport::to_json() const {
  json curve = json::array();
  for (const auto& [step, loss] : loss_curve) curve.push_back({step, loss});
  return {{"modes", rotations_to_json(modes)},
          {"captured", captured},
          {"captured_total", captured_total},
          {"nll_initial", nll_initial},
          {"nll_trained", nll_trained},
          {"nll_uniform", 0.0},
          {"loss_curve", curve},
          {"samples", rotations_to_json(samples)}};
}

std::vector<Rotation> toy_modes(const ToyFitConfig& cfg, Rng& rng) {
  const double min_sep = cfg.min_separation_deg * std::numbers::pi / 180.0;
  std::vector<Rotation> modes;
  for (int attempt = 0; modes.size() < cfg.modes; ++attempt) {
    if (attempt > 100000) throw Error(ErrorKind::Contract, "cannot place the requested number of separated modes");
    const Rotation r = uniform_sample(rng);
    bool ok = true;
    for (const auto& m : modes) ok = ok && geodesic_distance(m, r) >= min_sep;
    if (ok) modes.push_back(r);
  }
  return modes;
}

namespace {

Tensor draw_targets(const std::vector<Rotation>& modes, double kappa, std::size_t n, Rng& rng) {
  const ProjectedIsoGaussian noise(Rotation::identity(), kappa);
  Tensor t(n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = static_cast<std::size_t>(rng.next() % modes.size());
    mat3_to_row((modes[m] * pig_sample(noise, rng)).matrix(), t, i);
  }
  return t;
}

double mean_nll(const FlowModel& flow, const dg::ParamStore& store, const Tensor& targets, const Tensor& ctx) {
  RowIndex rows = RowIndex::grid(targets.rows(), 1);
  std::fill(rows.scene.begin(), rows.scene.end(), 0u);
  const auto lp = flow.log_prob_batch(store, targets, ctx, rows, Backend::Serial);
  double total = 0.0;
  for (double v : lp) total += v;
  return -total / static_cast<double>(lp.size());
}

}  // namespace

ToyFitReport fit_toy_distribution(const std::vector<Rotation>& targets, const ToyFitConfig& cfg, std::uint64_t seed) {
  if (targets.empty()) throw Error(ErrorKind::Contract, "toy fit needs at least one target mode");
  cfg.flow.validate();
  dg::ParamStore store;
  Rng init = Rng::stream(seed, 1);
  const FlowModel flow = FlowModel::create(cfg.flow, store, init);
  std::vector<double> context(cfg.flow.context_dim);
  for (double& c : context) c = init.normal();
  const Tensor ctx(1, context.size(), context);

  Rng held_rng = Rng::stream(seed, 2);
  const Tensor heldout = draw_targets(targets, cfg.noise_kappa, cfg.heldout, held_rng);
  ToyFitReport report;
  report.modes = targets;
  report.nll_initial = mean_nll(flow, store, heldout, ctx);

  dg::Optimizer opt(cfg.optimizer, store);
  Rng rng = Rng::stream(seed, 3);
  RowIndex rows = RowIndex::grid(cfg.batch_size, 1);
  std::fill(rows.scene.begin(), rows.scene.end(), 0u);
  double window = 0.0;
  std::size_t in_window = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Tensor batch = draw_targets(targets, cfg.noise_kappa, cfg.batch_size, rng);
    Tape tape;
    const auto params = store.bind(tape);
    Var loss = -(1.0 / static_cast<double>(cfg.batch_size)) *
               dg::sum(flow.log_prob_rows(params, tape.constant(batch), tape.constant(ctx), rows));
    if (!std::isfinite(loss.item())) throw Error(ErrorKind::TrainingAborted, "non-finite toy loss at step " + std::to_string(step));
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const Var& p : params) grads.push_back(tape.grad(p));
    opt.step(store, grads);
    window += loss.item();
    ++in_window;
    if (step % 100 == 0 || step == cfg.steps) {
      report.loss_curve.emplace_back(step, window / static_cast<double>(in_window));
      window = 0.0;
      in_window = 0;
    }
  }
  report.nll_trained = mean_nll(flow, store, heldout, ctx);

  Rng sample_rng = Rng::stream(seed, 4);
  const auto samples = flow.sample(store, context, cfg.eval_samples, sample_rng);
  const double radius = cfg.capture_deg * std::numbers::pi / 180.0;
  report.captured.assign(targets.size(), 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Rotation& r = samples[i].joint_rotations[0];
    std::size_t best = 0;
    double best_d = geodesic_distance(r, targets[0]);
    for (std::size_t m = 1; m < targets.size(); ++m) {
      const double d = geodesic_distance(r, targets[m]);
      if (d < best_d) {
        best_d = d;
        best = m;
      }
    }
    if (best_d <= radius) report.captured[best] += 1.0 / static_cast<double>(samples.size());
    if (i < 2000) report.samples.push_back(r);
  }
  for (double c : report.captured) report.captured_total += c;
  return report;
}

}  // namespace flowpose
