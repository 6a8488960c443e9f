#include <benchmark/benchmark.h>

#include "qart/calib.hpp"
#include "qart/losses.hpp"
#include "qart/model.hpp"
#include "qart/synthetic.hpp"

namespace {

using namespace qart;

const Dataset& data() {
  static const Dataset d = io::make_synthetic_set({.count = 4, .hr_size = 128, .seed = 0});
  return d;
}

Tensor batch() {
  std::vector<Tensor> lr;
  for (const auto& p : data()) lr.push_back(p.lr);
  return stack_batch(lr);
}

void BM_ModelForwardFp(benchmark::State& state) {
  const auto m = model::ToyOSDSR::create({});
  const Tensor x = batch();
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_fp(x, 1));
}
BENCHMARK(BM_ModelForwardFp)->Unit(benchmark::kMillisecond);

void BM_ModelForwardQuantized(benchmark::State& state) {
  auto m = model::ToyOSDSR::create({});
  calib::prepare_quantizers(m, data(), 1, {4, 4}, {}, 4);
  calib::activate_all(m, data(), 4);
  const Tensor x = batch();
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x, 1));
}
BENCHMARK(BM_ModelForwardQuantized)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto m = model::ToyOSDSR::create({});
  model::TrainOptions opt;
  opt.max_steps = 1;
  for (auto _ : state) model::train_backbone(m, data(), 1, opt);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
