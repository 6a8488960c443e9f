#include <benchmark/benchmark.h>

#include <random>

#include "qart/image_ops.hpp"
#include "qart/ops.hpp"
#include "qart/quant.hpp"
#include "qart/reparam.hpp"

namespace {

using namespace qart;

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(288);

void BM_Conv2d(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({32, 4, hw, hw}, 3), w = random_tensor({32, 32 * 9}, 4), b = random_tensor({32}, 5);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 3, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  const Tensor x = random_tensor({32, 4, 8, 8}, 3);
  Tensor w = random_tensor({32, 32 * 9}, 4).set_requires_grad(true);
  for (auto _ : state) {
    w.zero_grad();
    sum(conv2d(x, w, Tensor(), 3, 1, 1)).backward();
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_FakeQuant(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({n}, 6);
  const auto qp = quant::QuantParams::make(4, false, {0.1}, {-0.8});
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(quant::fake_quant(x, qp));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_FakeQuant)->Arg(1 << 12)->Arg(1 << 16);

void BM_FinetuneQuantizerForward(benchmark::State& state) {
  const Tensor w = random_tensor({32, 288}, 7), b = random_tensor({32}, 8);
  const Tensor x = random_tensor({288, 256}, 9);
  const auto fq = reparam::FinetuneQuantizer::init(w, b, std::span<const Tensor>(&x, 1), 4, 4, {});
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(fq.forward(x));
}
BENCHMARK(BM_FinetuneQuantizerForward);

}  // namespace
