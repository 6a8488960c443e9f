#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "qart/errors.hpp"
#include "qart/image_ops.hpp"
#include "qart/linalg.hpp"
#include "qart/losses.hpp"
#include "qart/ops.hpp"
#include "qart/optim.hpp"
#include "testing.hpp"

namespace qart {
namespace {

using testing::Gen;
using testing::gradient_error;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Matmul, IdentityAndForcedProducts) {
  const Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  const Tensor m(Shape{2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  const Tensor row(Shape{1, 2}, {1, 2});
  const Tensor col(Shape{2, 1}, {3, 4});
  EXPECT_EQ(matmul(row, col).item(), 11.0);
  EXPECT_THROW(matmul(row, row), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Gen gen(1);
  Tensor a = gen.param({4, 3});
  const Tensor b = gen.tensor({3, 5});
  sum(matmul(a, b)).backward();
  const std::vector<double> analytic(a.grad().begin(), a.grad().end());
  const double eps = 1e-4;
  auto data = a.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    NoGradGuard ng;
    const double keep = data[i];
    data[i] = keep + eps;
    const double plus = sum(matmul(a, b)).item();
    data[i] = keep - eps;
    const double minus = sum(matmul(a, b)).item();
    data[i] = keep;
    EXPECT_LE(std::abs(analytic[i] - (plus - minus) / (2 * eps)), 1e-6);
  }
}

TEST(Elementwise, ForcedValues) {
  EXPECT_EQ(values(clip(Tensor(Shape{3}, {-1, 0.5, 9}), 0, 3)), (std::vector<double>{0, 0.5, 3}));
  EXPECT_EQ(values(round(Tensor(Shape{2}, {2.5, -2.5}))), (std::vector<double>{3, -3}));
  EXPECT_EQ(sqrt(Tensor(Shape{1}, {4.0})).item(), 2.0);
  EXPECT_THROW(div(Tensor(Shape{1}, 1.0), Tensor(Shape{1}, 0.0)), NumericError);
  EXPECT_THROW(sqrt(Tensor(Shape{1}, -1.0)), NumericError);
  EXPECT_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{4})), DimensionError);
}

TEST(Elementwise, BroadcastingFollowsNumpyRules) {
  const Tensor a(Shape{2, 1}, {1, 2});
  const Tensor b(Shape{1, 3}, {10, 20, 30});
  EXPECT_EQ(add(a, b).shape(), (Shape{2, 3}));
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{11, 21, 31, 12, 22, 32}));
}

TEST(CustomGrad, IdentityRuleOnRoundPassesGradient) {
  Tensor x = Tensor(Shape{3}, {0.2, 1.7, -2.4}).set_requires_grad(true);
  auto fwd = [](std::span<const double> v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = round_half_away(v[i]);
    return out;
  };
  const Tensor y = custom_grad(x, fwd, [](std::span<const double> g, std::span<const double>) {
    return std::vector<double>(g.begin(), g.end());
  });
  EXPECT_EQ(values(y), (std::vector<double>{0, 2, -2}));
  sum(mul(y, Tensor(Shape{3}, {1, 2, 3}))).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 2, 3}));
}

TEST(CustomGrad, ZeroRuleGivesZeroGradient) {
  Tensor x = Tensor(Shape{2}, {0.3, -0.6}).set_requires_grad(true);
  const Tensor y = custom_grad(
      x, [](std::span<const double> v) { return std::vector<double>(v.begin(), v.end()); },
      [](std::span<const double> g, std::span<const double>) { return std::vector<double>(g.size(), 0.0); });
  sum(y).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(CustomGrad, MaskedRuleOnClipZeroesOutsideWindow) {
  Tensor x = Tensor(Shape{4}, {-2.0, 0.5, 1.5, 4.0}).set_requires_grad(true);
  sum(clip(x, 0.0, 3.0)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 1, 0}));
}

TEST(CustomGrad, RuleWithWrongLengthThrows) {
  Tensor x = Tensor(Shape{2}, 1.0).set_requires_grad(true);
  const Tensor y = custom_grad(
      x, [](std::span<const double> v) { return std::vector<double>(v.begin(), v.end()); },
      [](std::span<const double>, std::span<const double>) { return std::vector<double>(5, 0.0); });
  EXPECT_THROW(sum(y).backward(), DimensionError);
}

struct OpCase {
  const char* name;
  testing::TensorFn fn;
  std::vector<Shape> shapes;
  double lo, hi;
};

class DifferentiableOps : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  return {
      {"add", [](const V& v) { return add(v[0], v[1]); }, {{3, 4}, {1, 4}}, -1, 1},
      {"sub", [](const V& v) { return sub(v[0], v[1]); }, {{3, 4}, {3, 1}}, -1, 1},
      {"mul", [](const V& v) { return mul(v[0], v[1]); }, {{2, 3}, {2, 3}}, -1, 1},
      {"div", [](const V& v) { return div(v[0], v[1]); }, {{2, 3}, {1, 3}}, 0.5, 2},
      {"sqrt", [](const V& v) { return sqrt(v[0]); }, {{5}}, 0.5, 2},
      {"exp", [](const V& v) { return exp(v[0]); }, {{5}}, -1, 1},
      {"square", [](const V& v) { return square(v[0]); }, {{5}}, -1, 1},
      {"silu", [](const V& v) { return silu(v[0]); }, {{6}}, -2, 2},
      {"matmul", [](const V& v) { return matmul(v[0], v[1]); }, {{3, 4}, {4, 2}}, -1, 1},
      {"transpose", [](const V& v) { return transpose(v[0]); }, {{3, 4}}, -1, 1},
      {"reshape", [](const V& v) { return reshape(v[0], Shape{6, 2}); }, {{3, 4}}, -1, 1},
      {"mean", [](const V& v) { return mean(v[0]); }, {{3, 4}}, -1, 1},
      {"conv2d",
       [](const V& v) { return conv2d(v[0], v[1], v[2], 3, 1, 1); },
       {{2, 1, 5, 5}, {3, 18}, {3}},
       -1,
       1},
      {"conv2d_stride2",
       [](const V& v) { return conv2d(v[0], v[1], v[2], 3, 2, 1); },
       {{2, 2, 6, 6}, {2, 18}, {2}},
       -1,
       1},
      {"upsample", [](const V& v) { return upsample_bilinear(v[0], 4); }, {{2, 1, 3, 3}}, -1, 1},
      {"blur_down", [](const V& v) { return blur_downsample2(v[0]); }, {{1, 2, 6, 6}}, -1, 1},
      {"diff_x", [](const V& v) { return diff_x(v[0]); }, {{2, 1, 3, 4}}, -1, 1},
      {"diff_y", [](const V& v) { return diff_y(v[0]); }, {{2, 1, 4, 3}}, -1, 1},
      {"mse", [](const V& v) { return mse_loss(v[0], v[1]); }, {{3, 1, 4, 4}, {3, 1, 4, 4}}, -1, 1},
      {"shared_subexpression",
       [](const V& v) {
         const Tensor s = mul(v[0], v[1]);
         return add(mul(s, s), s);
       },
       {{4}, {4}},
       -1,
       1},
  };
}

TEST_P(DifferentiableOps, MatchFiniteDifferencesOnRandomTensors) {
  const auto c = op_cases()[static_cast<std::size_t>(GetParam())];
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Gen gen(100 * static_cast<std::uint64_t>(GetParam()) + trial);
    std::vector<Tensor> in;
    for (const auto& s : c.shapes) in.push_back(gen.param(s, c.lo, c.hi));
    EXPECT_LE(gradient_error(c.fn, in, trial), 1e-5) << c.name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(All, DifferentiableOps, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(Kinks, AbsReluClipMatchAwayFromBreakpoints) {
  Gen gen(3);
  std::vector<double> v(12);
  for (auto& x : v) x = (gen.coin() ? 1 : -1) * gen.uniform(0.1, 1.0);
  const Tensor base(Shape{12}, v);
  using V = std::vector<Tensor>;
  EXPECT_LE(gradient_error([](const V& in) { return abs(in[0]); }, {base.clone().set_requires_grad(true)}), 1e-5);
  EXPECT_LE(gradient_error([](const V& in) { return relu(in[0]); }, {base.clone().set_requires_grad(true)}), 1e-5);
  EXPECT_LE(gradient_error([](const V& in) { return clip(in[0], -0.05, 0.5); }, {base.clone().set_requires_grad(true)}),
            1e-5);
}

TEST(Tape, BackwardVisitsOperationsInReverseOrder) {
  Tensor a = Tensor(Shape{2}, {1, 2}).set_requires_grad(true);
  const Tensor b = exp(a);
  const Tensor c = mul(b, a);
  const Tensor d = sum(c);
  const auto tape = GradTape::record(d);
  std::vector<std::uint64_t> seen;
  tape.backward([&](const TapeEntry& e) { seen.push_back(e.sequence); });
  ASSERT_EQ(seen.size(), tape.entries().size());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], tape.entries()[seen.size() - 1 - i].sequence);
  for (std::size_t i = 1; i < tape.entries().size(); ++i) {
    EXPECT_LT(tape.entries()[i - 1].sequence, tape.entries()[i].sequence);
  }
}

TEST(Tape, EveryAncestorReceivesGradient) {
  Gen gen(4);
  Tensor a = gen.param({3});
  Tensor b = gen.param({3});
  Tensor c = gen.param({3});
  sum(mul(add(a, b), c)).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_TRUE(c.has_grad());
  EXPECT_EQ(a.grad().size(), a.numel());
}

TEST(Tape, NoGradGuardRecordsNothing) {
  Tensor a = Tensor(Shape{2}, 1.0).set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard ng;
    y = mul(a, a);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Tape, ForwardIsBitIdenticalAcrossRuns) {
  auto run = [] {
    Gen gen(11);
    const Tensor x = gen.tensor({2, 1, 6, 6});
    const Tensor w = gen.tensor({4, 18});
    return values(silu(conv2d(x, w, Tensor(), 3, 1, 1)));
  };
  EXPECT_EQ(run(), run());
}

TEST(Svd, DiagonalCase) {
  const Tensor w(Shape{3, 3}, {3, 0, 0, 0, 2, 0, 0, 0, 1});
  const auto f = svd_truncated(w, 2);
  EXPECT_NEAR(f.s[0], 3.0, 1e-12);
  EXPECT_NEAR(f.s[1], 2.0, 1e-12);
  const Tensor r = svd_reconstruct(f);
  double err = 0;
  for (std::size_t i = 0; i < 9; ++i) err += std::pow(r.data()[i] - w.data()[i], 2);
  EXPECT_NEAR(err, 1.0, 1e-10);
}

TEST(Svd, FullRankReconstructs) {
  Gen gen(5);
  const Tensor w = gen.tensor({5, 4});
  EXPECT_LE(testing::max_abs_diff(svd_reconstruct(svd_truncated(w, 4)), w), 1e-8);
}

TEST(Svd, FactorsAreOrthonormalAndOrdered) {
  Gen gen(6);
  const auto f = svd_truncated(gen.tensor({7, 5}), 3);
  for (std::size_t i = 0; i + 1 < f.s.size(); ++i) EXPECT_GE(f.s[i], f.s[i + 1]);
  for (double s : f.s) EXPECT_GE(s, 0.0);
  const Tensor utu = matmul(transpose(f.u), f.u);
  const Tensor vvt = matmul(f.v, transpose(f.v));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(utu.data()[i * 3 + j], i == j ? 1.0 : 0.0, 1e-8);
      EXPECT_NEAR(vvt.data()[i * 3 + j], i == j ? 1.0 : 0.0, 1e-8);
    }
  }
}

TEST(Svd, TruncationErrorMatchesGramEigenvalues) {
  Gen gen(8);
  const Tensor w = gen.tensor({8, 6});
  const Tensor r = svd_reconstruct(svd_truncated(w, 3));
  double err = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) err += std::pow(r.data()[i] - w.data()[i], 2);
  Eigen::MatrixXd m(8, 6);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 6; ++j) m(i, j) = w.data()[static_cast<std::size_t>(i * 6 + j)];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m.transpose() * m);
  const auto ev = eig.eigenvalues();  // ascending
  const double oracle = ev(0) + ev(1) + ev(2);
  EXPECT_NEAR(err, oracle, 1e-9);
}

TEST(Svd, RankOutOfRangeThrows) {
  EXPECT_THROW(svd_truncated(Tensor(Shape{3, 2}, 1.0), 0), ParameterError);
  EXPECT_THROW(svd_truncated(Tensor(Shape{3, 2}, 1.0), 3), ParameterError);
}

TEST(Optim, SgdForcedUpdate) {
  Tensor p = Tensor(Shape{1}, 1.0).set_requires_grad(true);
  sum(mul_scalar(p, 2.0)).backward();
  Sgd opt({{{p}, 0.1}});
  opt.step();
  EXPECT_NEAR(p.item(), 0.8, 1e-15);
}

TEST(Optim, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor(Shape{2}, {0.3, -0.4}).set_requires_grad(true);
  sum(mul_scalar(p, 0.0)).backward();
  Adam adam({{{p}, 0.1}});
  adam.step();
  EXPECT_EQ(values(p), (std::vector<double>{0.3, -0.4}));
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
  Tensor p = Tensor(Shape{1}, 1.0).set_requires_grad(true);
  Tensor frozen = Tensor(Shape{1}, 5.0).set_requires_grad(true);
  sum(add(p, frozen)).backward();
  Adam adam({{{p}, 1e-3}});
  adam.step();
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps).
  EXPECT_NEAR(p.item(), 1.0 - 1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(frozen.item(), 5.0);
}

}  // namespace
}  // namespace qart
