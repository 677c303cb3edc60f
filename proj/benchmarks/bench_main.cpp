#include <benchmark/benchmark.h>

#include <vector>

#include "segkit/autograd.hpp"
#include "segkit/metrics.hpp"
#include "segkit/models.hpp"
#include "segkit/nn.hpp"
#include "segkit/ops.hpp"

using namespace segkit;

namespace {

Tensor random(nn::Rng& rng, Shape shape) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// 3x3 conv, 32 -> 32 channels at 64x64, over atrous rates 1, 2, 6.
void BM_Conv2d(benchmark::State& state) {
  nn::Rng rng(1);
  const Tensor x = random(rng, {1, 32, 64, 64});
  const Tensor w = random(rng, {32, 32, 3, 3});
  nn::ConvSpec spec;
  spec.out_channels = 32;
  spec.kernel_h = spec.kernel_w = 3;
  spec.dilation_rate = static_cast<std::size_t>(state.range(0));
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, w, Tensor(), spec));
  state.SetItemsProcessed(state.iterations() * 32 * 32 * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(2)->Arg(6)->Unit(benchmark::kMillisecond);

void BM_Conv2dStandard(benchmark::State& state) {
  nn::Rng rng(1);
  const Tensor x = random(rng, {1, 32, 64, 64});
  const Tensor w = random(rng, {32, 32, 3, 3});
  nn::ConvSpec spec;
  spec.out_channels = 32;
  spec.kernel_h = spec.kernel_w = 3;
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d_standard(x, w, Tensor(), spec));
  state.SetItemsProcessed(state.iterations() * 32 * 32 * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2dStandard)->Unit(benchmark::kMillisecond);

// Inference forward, default widths, 22 classes, one 64x64 image.
void BM_ModelForward(benchmark::State& state) {
  models::ModelConfig c;
  c.architecture = models::kAllArchitectures[static_cast<std::size_t>(state.range(0))];
  c.num_classes = 22;
  auto model = models::build_model(c, 1);
  model->set_training(false);
  nn::Rng rng(2);
  const Tensor x = random(rng, {1, 3, 64, 64});
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(x));
  state.SetLabel(std::string(models::to_string(c.architecture)));
}
BENCHMARK(BM_ModelForward)->DenseRange(0, 4)->Unit(benchmark::kMillisecond);

// Forward + backward for one small training step.
void BM_TrainStep(benchmark::State& state) {
  models::ModelConfig c;
  c.architecture = models::kAllArchitectures[static_cast<std::size_t>(state.range(0))];
  c.backbone.base_width = 8;
  c.num_classes = 2;
  c.pyramid_bins = {1, 2, 3, 4};
  auto model = models::build_model(c, 1);
  model->set_training(true);
  nn::Rng rng(3);
  const Tensor x = random(rng, {4, 3, 32, 32});
  for (auto _ : state) {
    Tape tape;
    const Tensor loss = ops::mean(model->forward(x));
    benchmark::DoNotOptimize(tape.backward(loss));
  }
  state.SetLabel(std::string(models::to_string(c.architecture)));
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 4)->Unit(benchmark::kMillisecond);

void BM_ConfusionAccumulate(benchmark::State& state) {
  const std::size_t pixels = 512 * 512;
  nn::Rng rng(4);
  std::vector<int> pred(pixels), truth(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    pred[i] = static_cast<int>(rng.below(22));
    truth[i] = static_cast<int>(rng.below(22));
  }
  for (auto _ : state) {
    metrics::ConfusionMatrix cm(22);
    cm.accumulate(pred, truth);
    benchmark::DoNotOptimize(cm.total());
  }
  state.SetItemsProcessed(state.iterations() * pixels);
}
BENCHMARK(BM_ConfusionAccumulate);

}  // namespace

BENCHMARK_MAIN();
