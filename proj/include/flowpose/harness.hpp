#pragma once

// Synthetic scenes, the context encoder standing in for an image backbone,
// two-phase training, toy-distribution fitting and evaluation metrics.

#include <array>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "flowpose/bodymodel.hpp"
#include "flowpose/config.hpp"
#include "flowpose/mobiusflow.hpp"
#include "flowpose/nn.hpp"
#include "flowpose/parallel.hpp"
#include "flowpose/pliks.hpp"

namespace flowpose {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

// ---------------------------------------------------------------- cameras

struct Camera {
  Intrinsics intrinsics = Intrinsics::Zero();
  Rotation rotation;  // world to camera
  Vec3 translation = Vec3::Zero();
};

// Cameras on a horizontal circle around `target`, all looking at it. View v
// sits at azimuth v * spacing_deg; view 0 faces the body's front.
struct RigConfig {
  std::size_t views = 1;
  double focal = 1000.0;
  double cx = 500.0;
  double cy = 500.0;
  double distance = 4.0;
  double spacing_deg = 90.0;
  double target_height = 1.0;

  static std::vector<KeySpec> schema();
  static RigConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::vector<Camera> cameras() const;  // throws InvalidRig
};

// x-right, y-down, z-forward camera at `position` looking at `target`.
Camera look_at(const Vec3& position, const Vec3& target, double focal, double cx, double cy);

// Pixels of world points; throws BehindCamera.
MatX2 project(const Camera& cam, const MatX3& points);

// ---------------------------------------------------------------- dataset

struct PriorConfig {
  double joint_sigma = 0.3;  // radians, per axis-angle component
  double root_sigma = 0.3;
  double shape_sigma = 1.0;
  std::array<double, 3> translation_box{0.3, 0.1, 0.3};  // half extents, meters

  static std::vector<KeySpec> schema();
  static PriorConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct NoiseConfig {
  double laplace_scale = 2.0;  // pixels, per coordinate
  double occlusion_prob = 0.0;

  static std::vector<KeySpec> schema();
  static NoiseConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct DatasetConfig {
  std::size_t scenes = 500;
  RigConfig rig;
  PriorConfig prior;
  NoiseConfig noise;

  static std::vector<KeySpec> schema();
  static DatasetConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SceneRecord {
  std::uint64_t rng_seed = 0;
  BodyState gt_state;
  std::vector<Observation> views;
  std::vector<MatX2> gt_anchors;                     // noise-free, per view
  std::vector<std::vector<double>> context_features;  // per view

  nlohmann::json to_json() const;
  static SceneRecord from_json(const nlohmann::json& j);
};

// Flattened anchors of one view, centered on the visible anchors and scaled
// by their RMS radius in normalized image coordinates, followed by one
// visibility flag per anchor. Occluded anchors contribute zeros.
std::vector<double> context_features(const Observation& obs);
inline std::size_t context_feature_dim(std::size_t anchors) { return 3 * anchors; }

SceneRecord generate_scene(const BodyModelDef& model, const DatasetConfig& cfg, const std::vector<Camera>& cams,
                           std::uint64_t seed, std::size_t index);
std::vector<SceneRecord> gen_dataset(const BodyModelDef& model, const DatasetConfig& cfg, std::uint64_t seed,
                                     Backend backend = Backend::Serial);
void write_dataset(const std::string& path, const std::vector<SceneRecord>& scenes);
std::vector<SceneRecord> read_dataset(const std::string& path);

// ---------------------------------------------------------------- pipeline

struct PipelineConfig {
  FlowConfig flow;
  std::size_t encoder_hidden = 64;

  static std::vector<KeySpec> schema();
  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Context encoder, anchor-scale head and flow sharing one parameter store.
class Pipeline {
 public:
  // Adjusts flow.joints and flow.shape_dim to the body model.
  static Pipeline create(PipelineConfig cfg, const BodyModelDef& model, std::uint64_t seed);
  static Pipeline load(const std::string& base);
  void save(const std::string& base) const;

  const PipelineConfig& config() const { return cfg_; }
  const FlowModel& flow() const { return flow_; }
  dg::ParamStore& store() { return store_; }
  const dg::ParamStore& store() const { return store_; }
  std::size_t anchors() const { return anchors_; }

  dg::Var encode(std::span<const dg::Var> params, dg::Var features) const;       // B x context_dim
  dg::Var anchor_scales(std::span<const dg::Var> params, dg::Var context) const;  // B x anchors, pixels

  std::vector<double> context(std::span<const double> features) const;
  Eigen::VectorXd anchor_scales(std::span<const double> context) const;

 private:
  PipelineConfig cfg_;
  std::size_t anchors_ = 0;
  dg::ParamStore store_;
  FlowModel flow_;
  dg::Linear enc_in_;
  dg::Linear enc_block_;
  dg::Linear enc_out_;
  dg::Linear scale_head_;
};

// ---------------------------------------------------------------- training

struct TrainConfig {
  // anchor lnll, pose nll, shape nll, global geodesic, 2D mode, 3D mode
  std::array<double, 6> lambdas{0.01, 0.001, 0.0001, 1.0, 0.1, 0.1};
  std::size_t phase1_epochs = 10;
  std::size_t phase2_epochs = 0;
  std::size_t batch_size = 32;
  dg::OptimizerConfig optimizer;
  double phase2_learning_rate = 0.0;  // 0: keep the phase-1 rate
  bool predict_scale = true;

  static std::vector<KeySpec> schema();
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct EpochLog {
  int phase = 1;
  std::size_t epoch = 0;
  double total = 0.0;
  double anchor_nll = 0.0;
  double pose_nll = 0.0;
  double shape_nll = 0.0;
  double global_geodesic = 0.0;
  double mode_2d = 0.0;
  double mode_3d = 0.0;
  double grad_norm = 0.0;
};

struct TrainSample {
  std::size_t scene = 0;
  std::size_t view = 0;
};

// One optimization step worth of losses; exposed for tests.
struct BatchLoss {
  std::array<double, 6> terms{};
  double total = 0.0;
  double grad_norm = 0.0;
};
BatchLoss train_step(Pipeline& pipe, const BodyModelDef& model, const std::vector<SceneRecord>& data,
                     std::span<const TrainSample> batch, const TrainConfig& cfg, int phase, dg::Optimizer& opt);

// Throws TrainingAborted on a non-finite loss.
std::vector<EpochLog> train(Pipeline& pipe, const BodyModelDef& model, const std::vector<SceneRecord>& data,
                            const TrainConfig& cfg, std::uint64_t seed);
std::string training_log_csv(const std::vector<EpochLog>& log);

// Mean negative flow log-density of the ground-truth joint rotations.
double mean_pose_nll(const Pipeline& pipe, const std::vector<SceneRecord>& data, std::size_t view = 0);

// ---------------------------------------------------------------- toy fit

// Small single-joint flow with a 4-dimensional context.
FlowConfig toy_flow_config();

struct ToyFitConfig {
  std::size_t modes = 4;
  double min_separation_deg = 60.0;
  double noise_kappa = 30.0;
  std::size_t steps = 8000;
  std::size_t batch_size = 64;
  dg::OptimizerConfig optimizer{"adam", 3e-3, 1.0, 0.9, 0.999, 1e-8};
  std::size_t eval_samples = 10000;
  double capture_deg = 20.0;
  std::size_t heldout = 5000;
  FlowConfig flow = toy_flow_config();

  static std::vector<KeySpec> schema();
  static ToyFitConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct ToyFitReport {
  std::vector<Rotation> modes;
  std::vector<double> captured;  // fraction of samples nearest to and within capture_deg of each mode
  double captured_total = 0.0;
  double nll_initial = 0.0;  // identity flow on held-out targets
  double nll_trained = 0.0;
  std::vector<std::pair<std::size_t, double>> loss_curve;
  std::vector<Rotation> samples;  // a few thousand for plotting

  nlohmann::json to_json() const;
};

// Modes drawn uniformly with rejection below min_separation_deg.
std::vector<Rotation> toy_modes(const ToyFitConfig& cfg, Rng& rng);
ToyFitReport fit_toy_distribution(const std::vector<Rotation>& targets, const ToyFitConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------- evaluation

struct PoseMetrics {
  double mpjpe = 0.0;      // root-aligned, mm
  double pa_mpjpe = 0.0;   // similarity-aligned, mm
  double abs_mpjpe = 0.0;  // no alignment, mm
  double kp2d = 0.0;       // projected joints in view 0, pixels
};

// Optimal similarity transform of pred onto gt. Throws Alignment for fewer
// than three or collinear points.
MatX3 procrustes_align(const MatX3& pred, const MatX3& gt);

PoseMetrics pose_metrics(const BodyModelDef& model, const BodyState& pred, const BodyState& gt, const Camera& view0);

struct EvalConfig {
  std::size_t n_samples = 100;
  bool use_solver = true;
  std::size_t views = 1;
  std::size_t scenes = 0;  // 0: all
  bool use_predicted_scales = true;
  SolveConfig solver;

  static std::vector<KeySpec> schema();
  static EvalConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SceneEval {
  PoseMetrics mode;
  PoseMetrics best;  // min over the mode and every sample, per metric
  std::vector<double> sample_mpjpe;
};

struct EvalReport {
  std::vector<SceneEval> scenes;
  PoseMetrics mean_mode;
  PoseMetrics mean_best;
  std::size_t solver_failures = 0;

  nlohmann::json to_json(const EvalConfig& cfg) const;
};

// Estimates a body state for one scene from per-view joint-rotation sets,
// per-view global rotations in camera frames and a shape prior. With
// use_solver false only translation is solved.
BodyState estimate_state(const BodyModelDef& model, const SceneRecord& scene, std::size_t views,
                         const std::vector<std::vector<Rotation>>& per_view_poses,
                         const std::vector<Eigen::VectorXd>& per_view_scales, const std::vector<double>& beta_prior,
                         const EvalConfig& cfg);

EvalReport evaluate(const BodyModelDef& model, const Pipeline& pipe, const std::vector<SceneRecord>& data,
                    const EvalConfig& cfg, std::uint64_t seed, Backend backend = Backend::Serial);

// ---------------------------------------------------------------- self tests

struct SuiteResult {
  std::string name;
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::vector<std::string> messages;
  bool passed() const { return failures == 0; }
};

std::vector<SuiteResult> run_selftest(bool flow_only = false);
nlohmann::json selftest_report(const std::vector<SuiteResult>& suites);
std::string selftest_table(const std::vector<SuiteResult>& suites);

}  // namespace flowpose
