// Throughput of the hot paths: convolution, the UNet forward and
// forward+backward, and one full training step per method.

#include <benchmark/benchmark.h>

#include <filesystem>
#include <optional>
#include <vector>

#include "pixeldino/augment.hpp"
#include "pixeldino/config.hpp"
#include "pixeldino/ops.hpp"
#include "pixeldino/rng.hpp"
#include "pixeldino/runtime.hpp"
#include "pixeldino/synthetic.hpp"
#include "pixeldino/trainer.hpp"
#include "pixeldino/unet.hpp"

namespace {

using namespace pixeldino;

Tensor random_tensor(Shape shape, uint64_t key, bool requires_grad = false) {
  Rng rng = make_rng(key, Stream::kHeldOut);
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<float> v(static_cast<size_t>(n));
  for (float& x : v) x = static_cast<float>(normal(rng, 0.0, 1.0));
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Args: channels in/out, spatial size.
void BM_Conv3x3Forward(benchmark::State& state) {
  const int64_t c = state.range(0), s = state.range(1);
  const Tensor x = random_tensor({8, c, s, s}, 1);
  const Tensor w = random_tensor({c, c, 3, 3}, 2);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, 1, 1));
  state.SetItemsProcessed(state.iterations() * 8 * c * c * 9 * s * s);
}
BENCHMARK(BM_Conv3x3Forward)->Args({16, 32})->Args({32, 16})->Args({64, 8})->Unit(benchmark::kMicrosecond);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const int64_t c = state.range(0), s = state.range(1);
  const Tensor x = random_tensor({8, c, s, s}, 1, true);
  const Tensor w = random_tensor({c, c, 3, 3}, 2, true);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::conv2d(x, w, 1, 1)));
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({16, 32})->Args({32, 16})->Unit(benchmark::kMicrosecond);

UNetConfig bench_model() {
  UNetConfig m;
  m.base_width = 16;
  m.depth = 3;
  m.out_channels = 16;
  return m;
}

void BM_UNetForward(benchmark::State& state) {
  const UNetConfig m = bench_model();
  const ModelParams p = init_params(m, 0);
  const Tensor x = random_tensor({8, m.in_channels, 32, 32}, 3);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(unet_forward(m, p, x));
}
BENCHMARK(BM_UNetForward)->Unit(benchmark::kMillisecond);

void BM_UNetForwardBackward(benchmark::State& state) {
  const UNetConfig m = bench_model();
  ModelParams p = init_params(m, 0);
  const Tensor x = random_tensor({8, m.in_channels, 32, 32}, 3);
  for (auto _ : state) {
    p.zero_grads();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::mean(unet_forward(m, p, x)));
  }
}
BENCHMARK(BM_UNetForwardBackward)->Unit(benchmark::kMillisecond);

// Small synthetic stores written once per process; tiles are held in memory
// after opening, so step timings exclude I/O.
const std::filesystem::path& bench_stores() {
  static const std::filesystem::path dir = [] {
    const auto d = std::filesystem::temp_directory_path() / "pixeldino_bench_stores";
    std::filesystem::remove_all(d);
    SyntheticConfig sc;
    sc.labelled_tiles = 4;
    sc.unlabelled_tiles = 4;
    sc.eval_tiles = 1;
    sc.eval_in_tiles = 1;
    generate_synthetic(sc, d);
    return d;
  }();
  return dir;
}

struct StepFixture {
  explicit StepFixture(Method method)
      : labelled(TileStore::open(bench_stores() / "labelled")),
        unlabelled(TileStore::open(bench_stores() / "unlabelled")) {
    cfg.method = method;
    cfg.model = bench_model();
    cfg.model.out_channels = method == Method::kPixelDino ? 16 : 2;
    cfg.data.patch_size = 32;
    BatchSettings bs;
    bs.patch_size = 32;
    bs.batch_size_unlabelled = cfg.semi_supervised() ? 8 : 0;
    bs.augment_labelled = cfg.augments_labelled();
    source.emplace(&labelled, &unlabelled, labelled.manifest().normalization, bs);
    st = init_state(cfg);
  }
  RunConfig cfg;
  TileStore labelled, unlabelled;
  std::optional<BatchSource> source;
  TrainState st;
};

void BM_TrainStep(benchmark::State& state) {
  retain_heap_for_training();
  StepFixture f(static_cast<Method>(state.range(0)));
  const StepBatch batch = f.source->make(0);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(f.st, f.cfg, batch));
  state.SetLabel(method_name(f.cfg.method));
}
BENCHMARK(BM_TrainStep)
    ->Arg(static_cast<int>(Method::kBaseline))
    ->Arg(static_cast<int>(Method::kBaselineAug))
    ->Arg(static_cast<int>(Method::kFixMatchSeg))
    ->Arg(static_cast<int>(Method::kPixelDino))
    ->Unit(benchmark::kMillisecond);

void BM_BatchBuild(benchmark::State& state) {
  StepFixture f(Method::kPixelDino);
  int64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(f.source->make(step++));
}
BENCHMARK(BM_BatchBuild)->Unit(benchmark::kMillisecond);

void BM_StrongAugment(benchmark::State& state) {
  Rng rng = make_rng(4, Stream::kHeldOut);
  const AugmentConfig cfg;
  const AugmentSample s = AugmentSample::with_soft(4, 32, 32, std::vector<float>(4 * 1024, 0.5f), 16,
                                                   std::vector<float>(16 * 1024, 1.0f / 16));
  for (auto _ : state) benchmark::DoNotOptimize(strong_augment(s, rng, cfg));
}
BENCHMARK(BM_StrongAugment)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
