#include <benchmark/benchmark.h>

#include "vfm/metrics.hpp"
#include "vfm/runtime.hpp"
#include "vfm/sampling.hpp"
#include "vfm/training.hpp"

using namespace vfm;
using ad::Tensor;

namespace {

TrainConfig bench_config(DatasetKind kind, Architecture arch, std::size_t hidden) {
  TrainConfig c;
  c.dataset.kind = kind;
  c.head.architecture = arch;
  c.head.hidden = {hidden, hidden};
  c.head.rounds = 3;
  c.head.zero_init_output = false;
  c.head.space = ToyDataset(c.dataset).space();
  return c;
}

// One loss evaluation plus the full parameter gradient.
void BM_LossAndGradient(benchmark::State& state, DatasetKind kind, Architecture arch) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const TrainConfig c = bench_config(kind, arch, static_cast<std::size_t>(state.range(1)));
  const ToyDataset ds(c.dataset);
  auto head = make_head(c.head);
  Rng rng = make_stream(0, 0);
  const auto couplings = ds.sample_couplings(batch, rng);
  for (auto _ : state) {
    head->params().zero_grad();
    benchmark::DoNotOptimize(loss_and_gradient(*head, couplings, rng, false));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK_CAPTURE(BM_LossAndGradient, mlp_ring, DatasetKind::gauss_mixture_2d, Architecture::mlp)
    ->Args({256, 128})
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_LossAndGradient, egnn_polygon, DatasetKind::typed_polygon_cloud, Architecture::equivariant)
    ->Args({64, 32})
    ->Args({64, 64})
    ->Unit(benchmark::kMillisecond);

void BM_VelocityBatch(benchmark::State& state) {
  const TrainConfig c = bench_config(DatasetKind::typed_polygon_cloud, Architecture::equivariant, 32);
  const ToyDataset ds(c.dataset);
  const auto head = make_head(c.head);
  const ad::Tensor x = prior_batch(ds.prior(), ds.space(), 0, 0, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(velocity_batch(*head, x, 0.5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_VelocityBatch)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_GuidedSampling(benchmark::State& state) {
  const TrainConfig c = bench_config(DatasetKind::typed_polygon_cloud, Architecture::equivariant, 32);
  const ToyDataset ds(c.dataset);
  const auto head = make_head(c.head);
  SampleConfig sc;
  sc.prior = ds.prior();
  sc.integrator.steps = 20;
  if (state.range(0) > 0) {
    sc.mode = SampleMode::guided;
    sc.likelihood.emplace(PropertyFunction({PropertyKind::circumradius}, ds.space()), 0.3, 1.5);
    sc.guidance.inner_steps = static_cast<std::size_t>(state.range(0));
  }
  for (auto _ : state) benchmark::DoNotOptimize(sample(*head, 64, sc));
}
BENCHMARK(BM_GuidedSampling)->Arg(0)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_SlicedW2(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng = make_stream(1, 0);
  Tensor a(n, 2), b(n, 2);
  for (double& v : a.data) v = standard_normal(rng);
  for (double& v : b.data) v = standard_normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(sliced_w2(a, b, 64, rng));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SlicedW2)->RangeMultiplier(4)->Range(256, 4096)->Complexity(benchmark::oNLogN)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  vfm::tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
