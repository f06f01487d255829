#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "flowpose/harness.hpp"
#include "flowpose/jsonio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flowpose;

namespace {

struct Options {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t views = 0;
};

// Relative paths inside a config resolve against the config file's directory.
struct ConfigFile {
  json doc = json::object();
  fs::path dir = fs::current_path();

  std::string path(const char* key) const {
    const fs::path p = doc.at(key).get<std::string>();
    return (p.is_absolute() ? p : dir / p).string();
  }
  bool has(const char* key) const { return doc.contains(key) && !doc.at(key).is_null(); }
  json section(const char* key) const { return doc.value(key, json::object()); }
};

ConfigFile read_config(const Options& o, std::span<const KeySpec> keys, const std::string& where) {
  ConfigFile c;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw Error(ErrorKind::Config, "cannot open config " + o.config);
    try {
      c.doc = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Config, o.config + ": " + e.what());
    }
    c.dir = fs::absolute(o.config).parent_path();
  }
  check_keys(c.doc, keys, where);
  return c;
}

BodyModelDef model_from(const ConfigFile& c) { return c.has("model") ? load_model(c.path("model")) : make_toy_model(); }

fs::path out_dir(const Options& o) {
  fs::create_directories(o.out);
  return o.out;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw Error(ErrorKind::Config, "cannot write " + p.string());
  f << j.dump(2) << "\n";
}

Backend backend(const Options& o) {
  if (o.threads > 1) {
    set_thread_count(o.threads);
    return Backend::OpenMP;
  }
  return Backend::Serial;
}

std::string footer(const std::string& title, std::span<const KeySpec> keys) {
  std::ostringstream s;
  s << "\n" << title << "\n";
  for (const auto& k : keys) s << "  " << k.key << " (" << k.type << "): " << k.help << "\n";
  return s.str();
}

template <class Cfg>
std::vector<KeySpec> nested(const std::string& prefix) {
  std::vector<KeySpec> out;
  for (const auto& k : Cfg::schema()) out.push_back({prefix + "." + k.key, k.type, k.help});
  return out;
}

std::vector<KeySpec> concat(std::vector<KeySpec> a, const std::vector<KeySpec>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---------------------------------------------------------------- schemas

const std::vector<KeySpec> kModelKeys = {{"anchors", "int", "anchor vertices to select"},
                                         {"anchor_min", "int", "minimum anchors per body part"}};
const std::vector<KeySpec> kDataTop = {{"model", "path", "body model JSON, omitted for the built-in toy model"},
                                       {"dataset", "object", "dataset settings"}};
const std::vector<KeySpec> kTrainTop = {{"model", "path", "body model JSON, omitted for the built-in toy model"},
                                        {"data", "path", "training dataset (JSON lines)"},
                                        {"pipeline", "object", "network architecture"},
                                        {"train", "object", "optimization settings"}};
const std::vector<KeySpec> kSampleTop = {{"checkpoint", "path", "checkpoint base path written by train"},
                                         {"data", "path", "dataset providing the context"},
                                         {"scene", "int", "scene index"},
                                         {"view", "int", "view index"},
                                         {"n", "int", "number of samples"}};
const std::vector<KeySpec> kSolveTop = {{"model", "path", "body model JSON, omitted for the built-in toy model"},
                                        {"observations", "array", "Observation objects, one per view"},
                                        {"pose_init", "array", "per view, K rotations [w, x, y, z] with the root in that camera's frame"},
                                        {"config", "object", "solver settings"}};
const std::vector<KeySpec> kEvalTop = {{"model", "path", "body model JSON, omitted for the built-in toy model"},
                                       {"checkpoint", "path", "checkpoint base path written by train"},
                                       {"data", "path", "evaluation dataset (JSON lines)"},
                                       {"eval", "object", "evaluation settings"}};
const std::vector<KeySpec> kToyTop = {{"toy", "object", "toy fit settings"}};

// ---------------------------------------------------------------- commands

int cmd_gen_model(const Options& o) {
  const ConfigFile c = read_config(o, kModelKeys, "gen-model");
  const auto anchors = c.doc.value("anchors", std::size_t{48});
  const auto anchor_min = c.doc.value("anchor_min", std::size_t{4});
  const fs::path p = out_dir(o) / "model.json";
  save_model(make_toy_model(anchors, anchor_min), p.string());
  std::cout << "wrote " << p.string() << "\n";
  return 0;
}

int cmd_gen_data(const Options& o) {
  const ConfigFile c = read_config(o, kDataTop, "gen-data");
  const BodyModelDef model = model_from(c);
  const DatasetConfig cfg = DatasetConfig::from_json(c.section("dataset"));
  const auto scenes = gen_dataset(model, cfg, o.seed, backend(o));
  const fs::path dir = out_dir(o);
  write_dataset((dir / "dataset.jsonl").string(), scenes);
  write_json(dir / "dataset_config.json",
             {{"format_version", kDatasetFormatVersion}, {"seed", o.seed}, {"dataset", cfg.to_json()}});
  std::cout << "wrote " << scenes.size() << " scenes to " << (dir / "dataset.jsonl").string() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const ConfigFile c = read_config(o, kTrainTop, "train");
  const BodyModelDef model = model_from(c);
  const auto data = read_dataset(c.path("data"));
  const PipelineConfig pc = PipelineConfig::from_json(c.section("pipeline"));
  const TrainConfig tc = TrainConfig::from_json(c.section("train"));
  Pipeline pipe = Pipeline::create(pc, model, o.seed);
  const auto log = train(pipe, model, data, tc, o.seed);
  const fs::path dir = out_dir(o);
  pipe.save((dir / "checkpoint").string());
  std::ofstream(dir / "train_log.csv") << training_log_csv(log);
  if (!log.empty()) {
    std::cout << "final epoch: total " << log.back().total << ", pose nll " << log.back().pose_nll << "\n";
  }
  std::cout << "wrote " << (dir / "checkpoint").string() << "\n";
  return 0;
}

int cmd_sample(const Options& o) {
  const ConfigFile c = read_config(o, kSampleTop, "sample");
  const Pipeline pipe = Pipeline::load(c.path("checkpoint"));
  const auto data = read_dataset(c.path("data"));
  const auto scene = c.doc.value("scene", std::size_t{0});
  const auto view = c.doc.value("view", std::size_t{0});
  const auto n = c.doc.value("n", std::size_t{10});
  if (scene >= data.size() || view >= data[scene].views.size()) {
    throw Error(ErrorKind::Contract, "scene or view index out of range");
  }
  const std::vector<double> ctx = pipe.context(data[scene].context_features[view]);
  Rng rng(o.seed);
  const FlowModel& flow = pipe.flow();
  const DiagGaussian shape = flow.shape_distribution(pipe.store(), ctx);
  json samples = json::array();
  for (const auto& s : flow.sample(pipe.store(), ctx, n, rng)) {
    samples.push_back({{"joint_rotations", rotations_to_json(s.joint_rotations)}, {"log_prob", s.log_prob}});
  }
  const PoseSample mode = flow.mode(pipe.store(), ctx);
  const Eigen::VectorXd scales = pipe.anchor_scales(ctx);
  const json out = {{"scene", scene},
                    {"view", view},
                    {"global_rotation", rotation_to_json(flow.global_rotation(pipe.store(), ctx))},
                    {"shape_mean", shape.mean},
                    {"mode", {{"joint_rotations", rotations_to_json(mode.joint_rotations)}, {"log_prob", mode.log_prob}}},
                    {"anchor_scales", std::vector<double>(scales.data(), scales.data() + scales.size())},
                    {"samples", samples}};
  const fs::path p = out_dir(o) / "samples.json";
  write_json(p, out);
  std::cout << "wrote " << n << " samples to " << p.string() << "\n";
  return 0;
}

int cmd_solve(const Options& o) {
  const ConfigFile c = read_config(o, kSolveTop, "solve");
  const BodyModelDef model = model_from(c);
  if (!c.has("observations") || !c.has("pose_init")) {
    throw Error(ErrorKind::Config, "solve: 'observations' and 'pose_init' are required");
  }
  std::vector<Observation> obs;
  for (const auto& v : c.doc.at("observations")) obs.push_back(Observation::from_json(v));
  std::vector<std::vector<Rotation>> poses;
  for (const auto& p : c.doc.at("pose_init")) poses.push_back(rotations_from_json(p));
  const SolveConfig cfg = SolveConfig::from_json(c.section("config"));
  const SolveResult r = solve_multi_view(model, poses, obs, cfg);
  const fs::path p = out_dir(o) / "solve.json";
  write_json(p, r.to_json());
  std::cout << "weighted rms residual " << r.weighted_rms_residual << " px, wrote " << p.string() << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const ConfigFile c = read_config(o, kEvalTop, "eval");
  const BodyModelDef model = model_from(c);
  const Pipeline pipe = Pipeline::load(c.path("checkpoint"));
  const auto data = read_dataset(c.path("data"));
  EvalConfig cfg = EvalConfig::from_json(c.section("eval"));
  if (o.views > 0) cfg.views = o.views;
  const EvalReport r = evaluate(model, pipe, data, cfg, o.seed, backend(o));
  const fs::path p = out_dir(o) / "metrics.json";
  write_json(p, r.to_json(cfg));
  std::cout << "views " << cfg.views << ", scenes " << r.scenes.size() << "\n"
            << "mpjpe mm      mode " << r.mean_mode.mpjpe << "  min " << r.mean_best.mpjpe << "\n"
            << "pa-mpjpe mm   mode " << r.mean_mode.pa_mpjpe << "  min " << r.mean_best.pa_mpjpe << "\n"
            << "abs-mpjpe mm  mode " << r.mean_mode.abs_mpjpe << "  min " << r.mean_best.abs_mpjpe << "\n"
            << "2dkp px       mode " << r.mean_mode.kp2d << "  min " << r.mean_best.kp2d << "\n"
            << "solver failures " << r.solver_failures << "\n";
  return 0;
}

int cmd_toy_fit(const Options& o) {
  const ConfigFile c = read_config(o, kToyTop, "toy-fit");
  const ToyFitConfig cfg = ToyFitConfig::from_json(c.section("toy"));
  Rng rng = Rng::stream(o.seed, 0);
  const auto targets = toy_modes(cfg, rng);
  const ToyFitReport r = fit_toy_distribution(targets, cfg, o.seed);
  const fs::path p = out_dir(o) / "toy_report.json";
  json out = r.to_json();
  out["config"] = cfg.to_json();
  write_json(p, out);
  std::cout << "captured " << r.captured_total << " (";
  for (std::size_t m = 0; m < r.captured.size(); ++m) std::cout << (m ? " " : "") << r.captured[m];
  std::cout << "), nll " << r.nll_initial << " -> " << r.nll_trained << "\n";
  return 0;
}

int cmd_selftest(const Options& o, bool flow_only) {
  const auto suites = run_selftest(flow_only);
  const json report = selftest_report(suites);
  if (flow_only) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << selftest_table(suites);
  }
  if (o.out != ".") write_json(out_dir(o) / (flow_only ? "flow_selftest.json" : "selftest.json"), report);
  return report.at("passed").get<bool>() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic articulated pose estimation with rotation flows"};
  app.require_subcommand(1);
  app.set_version_flag("--version",
                       std::string("flowpose ") + FLOWPOSE_VERSION + "\ndataset format " +
                           std::to_string(kDatasetFormatVersion) + "\ncheckpoint format " +
                           std::to_string(kCheckpointFormatVersion));
  Options o;
  std::string command;

  auto add = [&](const std::string& name, const std::string& desc, const std::string& help_footer, bool config = true) {
    CLI::App* sub = app.add_subcommand(name, desc);
    if (config) sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--threads", o.threads, "worker threads for scene-level parallelism")->check(CLI::PositiveNumber);
    if (!help_footer.empty()) sub->footer(help_footer);
    sub->callback([&command, name] { command = name; });
    return sub;
  };

  add("gen-model", "write the built-in toy body model", footer("config keys:", kModelKeys));
  add("gen-data", "generate a synthetic dataset",
      footer("config keys:", concat(kDataTop, nested<DatasetConfig>("dataset"))));
  add("train", "train the context encoder, scale head and flow",
      footer("config keys:", concat(concat(kTrainTop, nested<PipelineConfig>("pipeline")), nested<TrainConfig>("train"))));
  add("sample", "draw poses from a trained flow", footer("config keys:", kSampleTop));
  add("solve", "run the pose/shape/translation solver on a problem file",
      footer("config keys:", concat(concat(kSolveTop, nested<SolveConfig>("config")),
                                    {{"observations[]." + std::string("*"), "object", "see Observation JSON"}})));
  CLI::App* eval = add("eval", "evaluate a checkpoint", footer("config keys:", concat(kEvalTop, nested<EvalConfig>("eval"))));
  eval->add_option("--views", o.views, "views per scene, overrides eval.views")->check(CLI::PositiveNumber);
  add("toy-fit", "fit a flow to a few noisy target rotations",
      footer("config keys:", concat(kToyTop, nested<ToyFitConfig>("toy"))));
  add("selftest", "run every invariant suite", "", false);
  add("flow-selftest", "run the flow invariant suite and print a JSON report", "", false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (command == "gen-model") return cmd_gen_model(o);
    if (command == "gen-data") return cmd_gen_data(o);
    if (command == "train") return cmd_train(o);
    if (command == "sample") return cmd_sample(o);
    if (command == "solve") return cmd_solve(o);
    if (command == "eval") return cmd_eval(o);
    if (command == "toy-fit") return cmd_toy_fit(o);
    if (command == "selftest") return cmd_selftest(o, false);
    if (command == "flow-selftest") return cmd_selftest(o, true);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_numerical(e.kind()) ? 2 : 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << app.help();
  return 1;
}
