#include <gtest/gtest.h>

#include "qart/errors.hpp"
#include "qart/ops.hpp"
#include "qart/quant.hpp"
#include "testing.hpp"

namespace qart::quant {
namespace {

using testing::Gen;

QuantParams per_tensor(int bits, bool is_signed, double s, double z) { return QuantParams::make(bits, is_signed, {s}, {z}); }

TEST(ClipBounds, SignedAndUnsignedWindows) {
  EXPECT_EQ(clip_bounds(2, false), (std::pair<int, int>{0, 3}));
  EXPECT_EQ(clip_bounds(4, true), (std::pair<int, int>{-8, 7}));
  EXPECT_EQ(clip_bounds(8, false), (std::pair<int, int>{0, 255}));
  EXPECT_THROW(clip_bounds(1, false), ParameterError);
  EXPECT_THROW(clip_bounds(9, true), ParameterError);
}

TEST(Quantize, ForcedRoundingAndClipping) {
  const auto qp = per_tensor(2, false, 1.0, 0.0);
  const Tensor x(Shape{3}, {0.0, 2.7, 5.0});
  const Tensor q = quantize(x, qp);
  EXPECT_EQ(q.data()[0], 0.0);
  EXPECT_EQ(q.data()[1], 3.0);
  EXPECT_EQ(q.data()[2], 3.0);
}

TEST(Quantize, NonPositiveScaleIsRejected) {
  EXPECT_THROW(per_tensor(4, false, 0.0, 0.0), ParameterError);
  auto qp = per_tensor(4, false, 1.0, 0.0);
  qp.scale.mutable_data()[0] = -1.0;
  EXPECT_THROW(quantize(Tensor(Shape{1}, 0.5), qp), ParameterError);
}

TEST(Dequantize, ForcedArithmeticAndRangeCheck) {
  EXPECT_EQ(dequantize(Tensor(Shape{1}, 0.0), per_tensor(4, false, 0.3, 0.0)).item(), 0.0);
  EXPECT_EQ(dequantize(Tensor(Shape{1}, 3.0), per_tensor(4, false, 0.5, -1.0)).item(), 0.5);
  EXPECT_THROW(dequantize(Tensor(Shape{1}, 16.0), per_tensor(4, false, 1.0, 0.0)), ParameterError);
  EXPECT_THROW(dequantize(Tensor(Shape{1}, 1.5), per_tensor(4, false, 1.0, 0.0)), ParameterError);
}

TEST(Quantize, RoundTripErrorWithinHalfStepInsideWindow) {
  Gen gen(21);
  for (int bits : {2, 3, 4, 8}) {
    for (bool is_signed : {false, true}) {
      const double s = gen.uniform(0.01, 0.5);
      const double z = gen.uniform(-1.0, 1.0);
      const auto qp = per_tensor(bits, is_signed, s, z);
      const Tensor x = gen.tensor({1000}, z + (qp.clip_lo - 2) * s, z + (qp.clip_hi + 2) * s);
      const Tensor back = dequantize(quantize(x, qp), qp);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x.data()[i];
        if (v < z + qp.clip_lo * s || v > z + qp.clip_hi * s) continue;
        EXPECT_LE(std::abs(back.data()[i] - v), s / 2 + 1e-12);
      }
    }
  }
}

TEST(Quantize, GridProjectionIsIdempotent) {
  Gen gen(22);
  const auto qp = per_tensor(3, true, 0.25, 0.1);
  const Tensor x = gen.tensor({200}, -3, 3);
  const Tensor q = quantize(x, qp);
  EXPECT_EQ(testing::max_abs_diff(quantize(dequantize(q, qp), qp), q), 0.0);
}

TEST(FakeQuant, InteriorGradientIsOne) {
  const auto qp = per_tensor(4, false, 0.1, 0.0);
  Tensor x = Tensor(Shape{4}, {0.12, 0.5, 0.77, 1.3}).set_requires_grad(true);
  sum(fake_quant(x, qp)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(FakeQuant, GradientVanishesFarAboveWindow) {
  const auto qp = per_tensor(4, false, 0.1, 0.0);
  Tensor x = Tensor(Shape{2}, {10.0, 50.0}).set_requires_grad(true);
  sum(fake_quant(x, qp)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(FakeQuant, MaskMatchesFiniteDifferencesOfClipEnvelope) {
  Gen gen(23);
  const auto qp = per_tensor(3, false, 0.2, -0.3);
  const double lo = -0.3, hi = -0.3 + 7 * 0.2;
  std::vector<double> v(64);
  for (auto& x : v) {
    do {
      x = gen.uniform(-1.5, 2.5);
    } while (std::abs(x - lo) < 1e-3 || std::abs(x - hi) < 1e-3);
  }
  Tensor x = Tensor(Shape{64}, v).set_requires_grad(true);
  sum(fake_quant(x, qp)).backward();
  const double eps = 1e-5;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double envelope = (std::clamp(v[i] + eps, lo, hi) - std::clamp(v[i] - eps, lo, hi)) / (2 * eps);
    EXPECT_NEAR(x.grad()[i], envelope, 1e-9);
  }
}

TEST(LearnedStep, ScaleGradientOnGridIsZero) {
  auto qp = per_tensor(4, false, 0.5, 0.0);
  enable_learned_step(qp, false);
  const Tensor x(Shape{3}, {0.5, 1.0, 2.5});
  sum(fake_quant(x, qp)).backward();
  EXPECT_EQ(qp.scale.grad()[0], 0.0);
}

TEST(LearnedStep, ScaleGradientBelowWindowIsLowerBound) {
  auto qp = per_tensor(4, true, 0.5, 0.0);
  enable_learned_step(qp, true);
  const Tensor x(Shape{1}, {-100.0});
  sum(fake_quant(x, qp)).backward();
  EXPECT_EQ(qp.scale.grad()[0], -8.0);
  EXPECT_EQ(qp.zero_point.grad()[0], 1.0);
}

TEST(LearnedStep, GradientIsFiniteDifferencePlusStraightThroughTerm) {
  Gen gen(24);
  for (int trial = 0; trial < 20; ++trial) {
    auto qp = per_tensor(4, false, gen.uniform(0.05, 0.2), gen.uniform(-0.2, 0.2));
    enable_learned_step(qp, true);
    const double s = qp.scale.item(), z = qp.zero_point.item();
    std::vector<double> v;
    while (v.size() < 16) {
      const double x = gen.uniform(z - 4 * s, z + 19 * s);
      const double u = (x - z) / s;
      const double frac = u - std::floor(u);
      if (std::abs(frac - 0.5) < 0.05 || std::abs(u) < 0.05 || std::abs(u - 15) < 0.05) continue;
      v.push_back(x);
    }
    const Tensor x(Shape{16}, v);
    sum(fake_quant(x, qp)).backward();
    const double eps = 1e-7;
    auto objective = [&](double ds, double dz) {
      const auto p = per_tensor(4, false, s + ds, z + dz);
      return sum(fake_quant(x, p)).item();
    };
    const double num_s = (objective(eps, 0) - objective(-eps, 0)) / (2 * eps);
    const double num_z = (objective(0, eps) - objective(0, -eps)) / (2 * eps);
    // round() has slope 1 under the STE, which the finite difference of x_hat cannot see.
    double ste_s = 0.0, ste_z = 0.0;
    for (double xv : v) {
      const double u = (xv - z) / s;
      if (u < 0 || u > 15) continue;
      ste_s += u;
      ste_z += 1.0;
    }
    EXPECT_LE(testing::rel_error(qp.scale.grad()[0], num_s - ste_s), 1e-4);
    EXPECT_LE(testing::rel_error(qp.zero_point.grad()[0], num_z - ste_z), 1e-4);
  }
}

TEST(LearnedStep, ClampKeepsScalePositive) {
  auto qp = per_tensor(4, false, 0.5, 0.0);
  qp.scale.mutable_data()[0] = -3.0;
  clamp_scale(qp);
  EXPECT_EQ(qp.scale.item(), kScaleFloor);
}

TEST(MaxMin, ForcedUnsignedRange) {
  const Tensor x(Shape{4}, {0.0, 1.0, 2.5, 3.0});
  const auto qp = calibrate_maxmin(std::span<const Tensor>(&x, 1), 2, false, Granularity::PerTensor);
  EXPECT_NEAR(qp.scale.item(), 1.0, 1e-15);
  EXPECT_NEAR(qp.zero_point.item(), 0.0, 1e-15);
}

TEST(MaxMin, ConstantChannelUsesScaleFloor) {
  const Tensor x(Shape{2, 3}, {0.7, 0.7, 0.7, -1.0, 0.0, 1.0});
  const auto qp = calibrate_maxmin(std::span<const Tensor>(&x, 1), 4, false, Granularity::PerChannel);
  EXPECT_EQ(qp.scale.data()[0], kScaleFloor);
  EXPECT_EQ(qp.zero_point.data()[0], 0.7);
  const Tensor back = fake_quant(x, qp);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.data()[i], 0.7);
}

TEST(MaxMin, EmptyStreamThrows) {
  EXPECT_THROW(calibrate_maxmin({}, 4, false, Granularity::PerTensor), CalibrationError);
}

TEST(MaxMin, StreamEndpointsMapToWindowEdges) {
  Gen gen(25);
  std::vector<Tensor> stream;
  for (int i = 0; i < 5; ++i) stream.push_back(gen.tensor({40}, -2.0, 3.0));
  for (int bits : {2, 4, 8}) {
    const auto qp = calibrate_maxmin(stream, bits, false, Granularity::PerTensor);
    const double s = qp.scale.item(), z = qp.zero_point.item();
    double mn = 1e9, mx = -1e9;
    for (const auto& t : stream) {
      for (double v : t.data()) {
        const double u = (v - z) / s;
        EXPECT_GE(u, qp.clip_lo - 1e-9);
        EXPECT_LE(u, qp.clip_hi + 1e-9);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    }
    EXPECT_EQ(quantize(Tensor(Shape{1}, mn), qp).item(), qp.clip_lo);
    EXPECT_EQ(quantize(Tensor(Shape{1}, mx), qp).item(), qp.clip_hi);
  }
}

TEST(MaxMin, SymmetricSignedHasZeroOffset) {
  const Tensor x(Shape{3}, {-0.8, 0.1, 0.4});
  const auto qp = calibrate_maxmin(std::span<const Tensor>(&x, 1), 4, true, Granularity::PerTensor, true);
  EXPECT_EQ(qp.zero_point.item(), 0.0);
  EXPECT_NEAR(qp.scale.item(), 0.1, 1e-15);
}

double sq_error(const Tensor& x, const QuantParams& qp) {
  const Tensor y = fake_quant(x, qp);
  double e = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) e += std::pow(x.data()[i] - y.data()[i], 2);
  return e;
}

TEST(Properties, ErrorNonIncreasingInBits) {
  Gen gen(26);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = gen.tensor({6, 20}, -2, 2);
    double prev = 1e18;
    for (int bits = 2; bits <= 8; ++bits) {
      const auto qp = calibrate_maxmin(std::span<const Tensor>(&x, 1), bits, false, Granularity::PerTensor);
      const double e = sq_error(x, qp);
      EXPECT_LE(e, prev + 1e-12);
      prev = e;
    }
  }
}

TEST(Properties, PerChannelNoWorseThanPerTensor) {
  Gen gen(27);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> v;
    for (int c = 0; c < 4; ++c) {
      const double scale = gen.uniform(0.1, 3.0);
      for (int i = 0; i < 25; ++i) v.push_back(scale * gen.uniform(-1, 1));
    }
    const Tensor x(Shape{4, 25}, v);
    const auto pt = calibrate_maxmin(std::span<const Tensor>(&x, 1), 3, false, Granularity::PerTensor);
    const auto pc = calibrate_maxmin(std::span<const Tensor>(&x, 1), 3, false, Granularity::PerChannel);
    EXPECT_LE(sq_error(x, pc), sq_error(x, pt) + 1e-12);
  }
}

TEST(Passthrough, OutputIsTheInputTensor) {
  const Quantizer q = Quantizer::passthrough();
  const Tensor x(Shape{3}, {0.1234567, -9.0, 1e-300});
  EXPECT_TRUE(q(x).same_storage(x));
  EXPECT_TRUE(q.trainable().empty());
}

}  // namespace
}  // namespace qart::quant
