// Serial reference vs OpenMP kernels on the scene- and row-parallel paths.

#include <benchmark/benchmark.h>

#include "flowpose/diffrot.hpp"
#include "flowpose/harness.hpp"

using namespace flowpose;

namespace {

Backend backend_of(const benchmark::State& state) { return state.range(0) == 0 ? Backend::Serial : Backend::OpenMP; }

const BodyModelDef& toy() {
  static const BodyModelDef m = make_toy_model();
  return m;
}

PipelineConfig bench_pipeline() {
  PipelineConfig p;
  p.flow.context_dim = 16;
  p.flow.layers = 4;
  p.flow.transforms = 8;
  p.flow.hidden = 32;
  p.flow.blocks = 1;
  p.flow.embed_dim = 4;
  p.flow.head_hidden = 32;
  return p;
}

const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline q = Pipeline::create(bench_pipeline(), toy(), 1);
    Rng rng(2);
    randomize_params(q.store(), rng, 0.1);
    return q;
  }();
  return p;
}

void BM_GenDataset(benchmark::State& state) {
  DatasetConfig dc;
  dc.scenes = 256;
  for (auto _ : state) benchmark::DoNotOptimize(gen_dataset(toy(), dc, 3, backend_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(dc.scenes));
}

void BM_LogProbBatch(benchmark::State& state) {
  const FlowModel& flow = pipeline().flow();
  const std::size_t scenes = 512, joints = flow.config().joints;
  Rng rng(4);
  dg::Tensor rot(scenes * joints, 9), ctx(scenes, flow.config().context_dim);
  for (std::size_t i = 0; i < rot.rows(); ++i) mat3_to_row(uniform_sample(rng).matrix(), rot, i);
  for (double& v : ctx.vec()) v = rng.normal();
  const RowIndex rows = RowIndex::grid(scenes, joints);
  for (auto _ : state) benchmark::DoNotOptimize(flow.log_prob_batch(pipeline().store(), rot, ctx, rows, backend_of(state), 256));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(rot.rows()));
}

void BM_Evaluate(benchmark::State& state) {
  DatasetConfig dc;
  dc.scenes = 16;
  const auto data = gen_dataset(toy(), dc, 5);
  EvalConfig cfg;
  cfg.n_samples = 10;
  cfg.solver.omega_beta = 1e3;
  cfg.solver.gamma = 1e3;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(toy(), pipeline(), data, cfg, 6, backend_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(dc.scenes));
}

}  // namespace

BENCHMARK(BM_GenDataset)->ArgName("openmp")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LogProbBatch)->ArgName("openmp")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Evaluate)->ArgName("openmp")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
