#include <gtest/gtest.h>

#include "qart/errors.hpp"
#include "qart/image_ops.hpp"
#include "qart/image_io.hpp"
#include "qart/optim.hpp"
#include "qart/reparam.hpp"
#include "testing.hpp"

namespace qart::reparam {
namespace {

using testing::Gen;

Tensor dense(const Tensor& w, const Tensor& b, const Tensor& x) {
  return add(matmul(w, x), reshape(b, Shape{b.numel(), 1}));
}

std::vector<Tensor> samples(Gen& gen, std::size_t n, std::size_t count = 3) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen.tensor({n, 10}, -1.0, 2.0));
  return out;
}

std::uint64_t digest(const Tensor& t) {
  return io::fnv1a(reinterpret_cast<const std::uint8_t*>(t.data().data()), t.numel() * sizeof(double));
}

TEST(EquivalentTransform, FullPrecisionOutputUnchanged) {
  Gen gen(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = gen.index(1, 6), n = gen.index(1, 6);
    const Tensor w = gen.tensor({m, n}), b = gen.tensor({m}), x = gen.tensor({n, 5}, -3, 3);
    EquivalentTransform et = EquivalentTransform::identity(n);
    for (auto& v : et.log_phi.mutable_data()) v = gen.uniform(-2.0, 2.0);
    for (auto& v : et.gamma.mutable_data()) v = gen.uniform(-1.0, 1.0);
    const Tensor ref = dense(w, b, x);
    const Tensor got = add(matmul(et.transform_weight(w), et.transform_input(x)), et.compensate_bias(b, w));
    EXPECT_LE(testing::max_abs_diff(got, ref), 1e-9);
  }
}

TEST(EquivalentTransform, IdentityLeavesInputsAlone) {
  const auto et = EquivalentTransform::identity(3);
  EXPECT_EQ(et.size(), 3u);
  const Tensor phi = et.phi();
  for (double v : phi.data()) EXPECT_EQ(v, 1.0);
  const Tensor x(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(testing::max_abs_diff(et.transform_input(x), x), 0.0);
}

TEST(FinetuneQuantizer, PassthroughWithZeroFinetunerIsTheDenseLayer) {
  Gen gen(32);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = gen.index(2, 8), n = gen.index(2, 8);
    const Tensor w = gen.tensor({m, n}), b = gen.tensor({m});
    const auto acts = samples(gen, n);
    FinetuneOptions opt;
    opt.rank = 1;
    opt.finetune_rank = 1;
    auto fq = FinetuneQuantizer::init(w, b, acts, 4, 4, opt);
    fq.set_passthrough();
    for (auto& v : Tensor(fq.f1()).mutable_data()) v = 0.0;
    const Tensor x = gen.tensor({n, 7}, -2, 2);
    EXPECT_LE(testing::max_abs_diff(fq.forward(x), dense(w, b, x)), 1e-9);
  }
}

TEST(FinetuneQuantizer, FullPrecisionBitsMatchDenseLayer) {
  Gen gen(33);
  const Tensor w = gen.tensor({5, 4}), b = gen.tensor({5}), x = gen.tensor({4, 3});
  const auto fq = FinetuneQuantizer::init(w, b, {}, 32, 32, {.rank = 1, .finetune_rank = 0});
  EXPECT_LE(testing::max_abs_diff(fq.forward(x), dense(w, b, x)), 1e-12);
}

TEST(FinetuneQuantizer, RankZeroIsPlainQuantization) {
  Gen gen(34);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor w = gen.tensor({6, 5}), b = gen.tensor({6});
    const auto acts = samples(gen, 5);
    FinetuneOptions opt;
    opt.rank = 0;
    opt.finetune_rank = 0;
    opt.bias_bits = 32;
    opt.mode = quant::QuantizerMode::MaxMinStatic;
    const auto fq = FinetuneQuantizer::init(w, b, acts, 4, 4, opt);
    const auto qw = quant::calibrate_maxmin(std::span<const Tensor>(&w, 1), 4, true, quant::Granularity::PerChannel,
                                            true);
    const auto qa = quant::calibrate_maxmin(acts, 4, false, quant::Granularity::PerTensor);
    const Tensor x = gen.tensor({5, 4}, -1, 2);
    const Tensor expect = dense(quant::fake_quant(w, qw), b, quant::fake_quant(x, qa));
    EXPECT_LE(testing::max_abs_diff(fq.forward(x), expect), 1e-12);
  }
}

TEST(FinetuneQuantizer, FullRankSkipLeavesNoResidual) {
  Gen gen(35);
  const Tensor w = gen.tensor({4, 6});
  const auto fq = FinetuneQuantizer::init(w, gen.tensor({4}), samples(gen, 6), 4, 4,
                                          {.rank = 4, .finetune_rank = 0});
  const Tensor residual = fq.residual();
  for (double v : residual.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(FinetuneQuantizer, LowRankSkipBeatsPlainQuantizationAtTwoBits) {
  Gen gen(36);
  int wins = 0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> v(16 * 16);
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = 0; j < 16; ++j) v[i * 16 + j] = 0.05 * gen.normal();
    }
    for (std::size_t i = 0; i < 16; ++i) v[i * 16 + i] += 3.0 * (i < 2);
    const Tensor w(Shape{16, 16}, v), b = gen.tensor({16});
    const auto acts = samples(gen, 16);
    auto error = [&](std::size_t r) {
      FinetuneOptions opt;
      opt.rank = r;
      opt.finetune_rank = 0;
      const auto fq = FinetuneQuantizer::init(w, b, acts, 2, 2, opt);
      double e = 0;
      for (const auto& x : acts) {
        const Tensor d = sub(fq.forward(x), dense(w, b, x));
        for (double y : d.data()) e += y * y;
      }
      return e;
    };
    wins += error(2) < error(0);
  }
  EXPECT_EQ(wins, 10);
}

TEST(FinetuneQuantizer, TrainableGradientsMatchFiniteDifferences) {
  Gen gen(37);
  const Tensor w = gen.tensor({4, 5}), b = gen.tensor({4});
  const auto acts = samples(gen, 5);
  FinetuneOptions opt;
  opt.rank = 1;
  opt.finetune_rank = 1;
  opt.finetune_init_std = 0.1;
  auto fq = FinetuneQuantizer::init(w, b, acts, 32, 32, opt);
  for (auto& v : Tensor(fq.f2()).mutable_data()) v = gen.uniform();
  for (auto& v : fq.transform().log_phi.mutable_data()) v = gen.uniform(-0.5, 0.5);
  const Tensor x = gen.tensor({5, 3});
  const Tensor weights = gen.tensor({4, 3}, 0.5, 1.5);
  auto objective = [&] { return sum(mul(fq.forward(x), weights)); };
  for (Tensor t : {fq.l1(), fq.f1(), fq.transform().log_phi}) {
    for (auto& p : fq.trainable()) p.zero_grad();
    objective().backward();
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i], eps = 1e-6;
      NoGradGuard ng;
      data[i] = keep + eps;
      const double plus = objective().item();
      data[i] = keep - eps;
      const double minus = objective().item();
      data[i] = keep;
      EXPECT_LE(testing::rel_error(analytic[i], (plus - minus) / (2 * eps)), 1e-4);
    }
  }
}

TEST(FinetuneQuantizer, OptimizerLeavesFrozenWeightsUntouched) {
  Gen gen(38);
  const Tensor w = gen.tensor({6, 8}), b = gen.tensor({6});
  const auto acts = samples(gen, 8);
  auto fq = FinetuneQuantizer::init(w, b, acts, 4, 4, {});
  const auto dw = digest(w), db = digest(b);
  Adam adam({{fq.trainable(), 1e-2}});
  const Tensor target = gen.tensor({6, 10});
  for (int step = 0; step < 100; ++step) {
    adam.zero_grad();
    mean(square(sub(fq.forward(acts[step % acts.size()]), target))).backward();
    adam.step();
    fq.clamp_scales();
  }
  EXPECT_EQ(digest(fq.weight()), dw);
  EXPECT_EQ(digest(fq.bias()), db);
  EXPECT_FALSE(w.has_grad() && std::any_of(w.grad().begin(), w.grad().end(), [](double g) { return g != 0; }));
}

TEST(FinetuneQuantizer, OverheadCountsFollowRanks) {
  Gen gen(39);
  const auto fq = FinetuneQuantizer::init(gen.tensor({6, 10}), gen.tensor({6}), samples(gen, 10), 4, 4,
                                          {.rank = 2, .finetune_rank = 3});
  EXPECT_EQ(fq.overhead_params(), 5u * 16u + 20u + 6u + 2u + 1u);
  EXPECT_EQ(fq.overhead_macs_per_column(), 2u * 16u + 10u);
}

TEST(FinetuneQuantizer, DefaultRankIsOneSixteenth) {
  EXPECT_EQ(default_rank(32, 288), 2u);
  EXPECT_EQ(default_rank(3, 144), 1u);
  EXPECT_EQ(default_rank(17, 40), 2u);
}

TEST(FinetuneQuantizer, OversizedRanksThrow) {
  Gen gen(40);
  EXPECT_THROW(FinetuneQuantizer::init(gen.tensor({3, 4}), Tensor(), samples(gen, 4), 4, 4,
                                       {.rank = 2, .finetune_rank = 2}),
               ParameterError);
  EXPECT_THROW(FinetuneQuantizer::init(gen.tensor({3, 4}), Tensor(), {}, 4, 4, {.rank = 1, .finetune_rank = 1}),
               CalibrationError);
}

Tensor nested_loop_conv(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t k, std::size_t stride,
                        std::size_t pad) {
  const std::size_t c_in = x.dim(0), batch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = weight.dim(0);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Tensor out(Shape{c_out, batch, ho, wo});
  auto o = out.mutable_data();
  const auto xs = x.data();
  const auto ws = weight.data();
  for (std::size_t co = 0; co < c_out; ++co)
    for (std::size_t nb = 0; nb < batch; ++nb)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias.defined() ? bias.data()[co] : 0.0;
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += ws[co * c_in * k * k + (ci * k + ky) * k + kx] *
                       xs[((ci * batch + nb) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
              }
          o[((co * batch + nb) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

TEST(ConvAsMatmul, MatchesNestedLoops) {
  Gen gen(41);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c_in = gen.index(1, 3), c_out = gen.index(1, 4), k = gen.coin() ? 3 : 1;
    const std::size_t stride = gen.index(1, 2), pad = k / 2;
    const Tensor x = gen.tensor({c_in, 2, 6, 5});
    const Tensor w = gen.tensor({c_out, c_in * k * k}), b = gen.tensor({c_out});
    EXPECT_LE(testing::max_abs_diff(conv2d(x, w, b, k, stride, pad), nested_loop_conv(x, w, b, k, stride, pad)),
              1e-12);
  }
}

TEST(ConvAsMatmul, FinetuneLayerOnColumnsMatchesConvolution) {
  Gen gen(42);
  const Tensor x = gen.tensor({3, 2, 5, 5});
  const Tensor w = gen.tensor({4, 27}), b = gen.tensor({4});
  const Tensor cols = im2col(x, 3, 1, 1);
  const auto fq = FinetuneQuantizer::init(w, b, {}, 32, 32, {.rank = 2, .finetune_rank = 0});
  const Tensor y = columns_to_map(fq.forward(cols), 2, 5, 5);
  EXPECT_LE(testing::max_abs_diff(y, nested_loop_conv(x, w, b, 3, 1, 1)), 1e-10);
}

TEST(ConvAsMatmul, CenterTapKernelIsIdentity) {
  Gen gen(43);
  const Tensor x = gen.tensor({2, 1, 4, 4});
  Tensor w(Shape{2, 18});
  w.mutable_data()[0 * 18 + 4] = 1.0;
  w.mutable_data()[1 * 18 + 9 + 4] = 1.0;
  EXPECT_EQ(testing::max_abs_diff(conv2d(x, w, Tensor(), 3, 1, 1), x), 0.0);
}

TEST(ConvAsMatmul, KernelLayoutConversion) {
  Tensor kernel(Shape{3, 3, 2, 1});
  kernel.mutable_data()[((1 * 3 + 2) * 2 + 1) * 1 + 0] = 5.0;
  const Tensor m = kernel_to_matrix(kernel);
  ASSERT_EQ(m.shape(), (Shape{1, 18}));
  EXPECT_EQ(m.data()[(1 * 3 + 1) * 3 + 2], 5.0);
}

}  // namespace
}  // namespace qart::reparam
