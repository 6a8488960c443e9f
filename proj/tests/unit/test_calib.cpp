#include <gtest/gtest.h>

#include <map>

#include "qart/calib.hpp"
#include "qart/errors.hpp"
#include "qart/losses.hpp"
#include "qart/synthetic.hpp"
#include "testing.hpp"

namespace qart::calib {
namespace {

using model::ToyConfig;
using model::ToyOSDSR;
using testing::Gen;

ToyConfig small_config() {
  ToyConfig cfg;
  cfg.channels = 4;
  cfg.denoiser_blocks = 2;
  cfg.embedding_dim = 8;
  cfg.seed = 11;
  return cfg;
}

const Dataset& small_data() {
  static const Dataset data = io::make_synthetic_set({.count = 6, .hr_size = 32, .seed = 77});
  return data;
}

CalibrationPlan small_plan(const ToyOSDSR& m, std::size_t steps = 4) {
  auto plan = CalibrationPlan::reversed(m);
  plan.stage_steps = steps;
  plan.et_steps = steps;
  plan.batch = 2;
  plan.calibration_images = 4;
  return plan;
}

std::vector<double> snapshot(const std::vector<Tensor>& tensors) {
  std::vector<double> out;
  for (const auto& t : tensors) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

TEST(ImageLoss, ForcedExamples) {
  const Tensor a(Shape{3, 1, 4, 4}, 0.25), b(Shape{3, 1, 4, 4}, 0.75);
  EXPECT_NEAR(image_loss(a, b, {.a1 = 0.0, .a2 = 1.0}).item(), 0.25, 1e-15);
  EXPECT_NEAR(image_loss(a, b, {.a1 = 1.0, .a2 = 1.0}).item(), 0.25, 1e-15);
  EXPECT_EQ(image_loss(a, a, {}).item(), 0.0);
  EXPECT_THROW(image_loss(a, Tensor(Shape{3, 1, 4, 8}), {}), DimensionError);
  EXPECT_THROW(image_loss(a, b, {.a1 = 0.0, .a2 = 0.0}), ConfigError);
  EXPECT_THROW(image_loss(a, b, {.a1 = -1.0}), ConfigError);
}

TEST(ImageLoss, WeightsCombineTheTwoTerms) {
  Gen gen(81);
  const Tensor a = gen.tensor({3, 2, 8, 8}, 0, 1), b = gen.tensor({3, 2, 8, 8}, 0, 1);
  const double mse = mse_loss(a, b).item(), proxy = perceptual_proxy(a, b).item();
  EXPECT_NEAR(image_loss(a, b, {.a1 = 0.3, .a2 = 2.0}).item(), 0.3 * proxy + 2.0 * mse, 1e-12);
}

TEST(ImageLoss, GradientMatchesFiniteDifferences) {
  Gen gen(82);
  const Tensor ref = gen.tensor({3, 1, 8, 8}, 0, 0.02);
  const Tensor ramp = testing::ramp_image({3, 1, 8, 8}, 0.5);
  const testing::TensorFn f = [&](const std::vector<Tensor>& in) { return image_loss(add(in[0], ramp), ref, {}); };
  EXPECT_LE(testing::gradient_error(f, {gen.param({3, 1, 8, 8}, 0, 0.02)}), 1e-5);
}

TEST(ModuleLoss, IsMeanSquaredError) {
  const Tensor a(Shape{2, 2}, {1, 2, 3, 4}), b(Shape{2, 2}, {1, 0, 3, 8});
  EXPECT_EQ(module_loss(a, b).item(), 5.0);
  EXPECT_EQ(module_loss(a, a).item(), 0.0);
}

TEST(BitWidth, ParsesAndRejects) {
  EXPECT_EQ(BitWidth::parse("2,8"), (BitWidth{2, 8}));
  EXPECT_EQ((BitWidth{4, 4}).to_string(), "4,4");
  for (const char* bad : {"4", "4,", "a,4", "4,4x", "1,4", "4,9", "33,4"}) {
    EXPECT_THROW(BitWidth::parse(bad), ParameterError) << bad;
  }
  EXPECT_EQ(BitWidth::parse("32,32"), (BitWidth{32, 32}));
}

TEST(CalibrationPlan, ReversesTheRegistry) {
  const auto m = ToyOSDSR::create(ToyConfig{});
  const auto plan = CalibrationPlan::reversed(m);
  EXPECT_EQ(plan.order, (std::vector<std::size_t>{5, 4, 3, 2, 1, 0}));
  EXPECT_NO_THROW(plan.validate(m));
}

TEST(CalibrationPlan, RejectsBadPlans) {
  const auto m = ToyOSDSR::create(ToyConfig{});
  auto plan = CalibrationPlan::reversed(m);
  std::swap(plan.order[0], plan.order[1]);
  EXPECT_THROW(plan.validate(m), ConfigError);
  plan = CalibrationPlan::reversed(m);
  plan.order.pop_back();
  EXPECT_THROW(plan.validate(m), ConfigError);
  plan = CalibrationPlan::reversed(m);
  plan.stage_steps = 0;
  EXPECT_THROW(plan.validate(m), ConfigError);
  plan = CalibrationPlan::reversed(m);
  plan.loss.a1 = plan.loss.a2 = 0.0;
  EXPECT_THROW(plan.validate(m), ConfigError);
}

TEST(NonIncreasing, ComparesHeadAndTailMeans) {
  const std::vector<double> down{5, 4, 3, 2, 1, 1, 1};
  const std::vector<double> up{1, 2, 3, 4, 5, 6, 7};
  const std::vector<double> noisy{5, 6, 4, 5, 3, 4, 2, 3, 1, 6};
  EXPECT_TRUE(non_increasing(down));
  EXPECT_FALSE(non_increasing(up));
  EXPECT_TRUE(non_increasing(noisy));
  EXPECT_FALSE(non_increasing(noisy, 1));
  EXPECT_TRUE(non_increasing(std::vector<double>{}));
}

TEST(Rpq, StagesRunInReverseAndStayIsolated) {
  auto m = ToyOSDSR::create(small_config());
  const auto& data = small_data();
  const auto plan = small_plan(m);
  prepare_quantizers(m, data, 1, {4, 4}, plan.layer, plan.calibration_images);
  std::map<std::size_t, std::vector<double>> initial;
  for (std::size_t i = 0; i < m.module_count(); ++i) initial[i] = snapshot(m.quantizer(i).finetune_params());
  std::vector<std::string> seen;
  PipelineLog log;
  run_rpq(m, data, plan, log, [&](const std::string& stage, const ToyOSDSR& model) {
    seen.push_back(stage);
    const std::size_t done = seen.size();
    for (std::size_t i = 0; i < model.module_count(); ++i) {
      const bool staged = i >= model.module_count() - done;
      EXPECT_EQ(model.is_active(i), staged) << stage << " " << i;
      if (!staged) {
        EXPECT_EQ(snapshot(model.quantizer(i).finetune_params()), initial[i]) << stage << " " << i;
      }
    }
  });
  const std::vector<std::string> expected{"decoder.layer2", "decoder.layer1", "denoiser.block2", "denoiser.block1"};
  EXPECT_EQ(seen, expected);
  EXPECT_EQ(log.stages, expected);
  EXPECT_EQ(log.rows.size(), expected.size() * plan.stage_steps);
  for (std::size_t e : log.early_grad_events) EXPECT_EQ(e, 0u);
  EXPECT_EQ(frozen_digest(m), log.digest);
  for (const auto& row : log.rows) EXPECT_NEAR(row.total, row.module_loss + row.image_loss, 1e-12);
}

TEST(Rpq, MissingQuantizersAreRejected) {
  auto m = ToyOSDSR::create(small_config());
  PipelineLog log;
  EXPECT_THROW(run_rpq(m, small_data(), small_plan(m), log), ConfigError);
}

TEST(Et, ZeroStepsLeavesTheModelUnchanged) {
  auto m = ToyOSDSR::create(small_config());
  const auto& data = small_data();
  auto plan = small_plan(m);
  prepare_quantizers(m, data, 1, {4, 4}, plan.layer, plan.calibration_images);
  activate_all(m, data, plan.calibration_images);
  plan.et_steps = 0;
  std::vector<double> before;
  for (std::size_t i = 0; i < m.module_count(); ++i) {
    const auto s = snapshot(m.quantizer(i).trainable());
    before.insert(before.end(), s.begin(), s.end());
  }
  PipelineLog log;
  run_et(m, data, plan, log);
  std::vector<double> after;
  for (std::size_t i = 0; i < m.module_count(); ++i) {
    const auto s = snapshot(m.quantizer(i).trainable());
    after.insert(after.end(), s.begin(), s.end());
  }
  EXPECT_EQ(before, after);
  EXPECT_TRUE(log.rows.empty());
}

TEST(Et, RequiresEveryModuleActive) {
  auto m = ToyOSDSR::create(small_config());
  const auto plan = small_plan(m);
  prepare_quantizers(m, small_data(), 1, {4, 4}, plan.layer, plan.calibration_images);
  PipelineLog log;
  EXPECT_THROW(run_et(m, small_data(), plan, log), ConfigError);
}

TEST(Baseline, FullPrecisionBitsReproduceTheBackbone) {
  const auto fp = ToyOSDSR::create(small_config());
  auto q = fp.clone();
  run_maxmin_baseline(q, small_data(), {32, 32}, 4);
  for (const auto& pair : small_data()) {
    EXPECT_LE(testing::max_abs_diff(q.forward(pair.lr, 1), fp.forward_fp(pair.lr, 1)), 1e-12);
  }
  EXPECT_NEAR(psnr_to_fp(q, fp, small_data(), 1), metrics::kPsnrCap, 1e-9);
}

TEST(Baseline, MaxMinIsDeterministic) {
  const auto fp = ToyOSDSR::create(small_config());
  auto a = fp.clone(), b = fp.clone();
  run_maxmin_baseline(a, small_data(), {4, 4}, 4);
  run_maxmin_baseline(b, small_data(), {4, 4}, 4);
  const auto& lr = small_data()[0].lr;
  EXPECT_EQ(testing::max_abs_diff(a.forward(lr, 1), b.forward(lr, 1)), 0.0);
  EXPECT_LT(psnr_to_fp(a, fp, small_data(), 1), metrics::kPsnrCap);
}

TEST(Trq, SingleCandidateIsChosen) {
  const auto m = ToyOSDSR::create(small_config());
  TrqOptions opt;
  opt.train.max_steps = 1;
  opt.probes = 2;
  opt.calibration_images = 2;
  const std::vector<int> only{300};
  const auto result = run_trq(m, small_data(), only, {4, 4}, opt);
  EXPECT_EQ(result.best_t, 300);
  EXPECT_EQ(result.backbone.timestep(), 300);
  ASSERT_EQ(result.profile.rows.size(), 1u);
}

TEST(Trq, TwoBitSweepPrefersTheSmallestTimestep) {
  const auto m = ToyOSDSR::create(small_config());
  TrqOptions opt;
  opt.train.max_steps = 1;
  opt.probes = 3;
  opt.calibration_images = 3;
  const std::vector<int> candidates{1000, 1, 500};
  const auto result = run_trq(m, small_data(), candidates, {2, 2}, opt);
  EXPECT_EQ(result.best_t, 1);
  for (const auto& row : result.profile.rows) {
    EXPECT_LE(result.profile.rows.front().delta_z, row.delta_z);
  }
  EXPECT_THROW(run_trq(m, small_data(), std::span<const int>{}, {2, 2}, opt), ParameterError);
}

TEST(Arms, NamesRoundTripAndFlags) {
  for (Arm a : kAllArms) EXPECT_EQ(parse_arm(to_string(a)), a);
  EXPECT_THROW(parse_arm("qat"), ParameterError);
  EXPECT_FALSE(uses_trq(Arm::Baseline));
  EXPECT_TRUE(uses_trq(Arm::TrqEt));
  EXPECT_TRUE(uses_rpq(Arm::TrqRpqEt));
  EXPECT_FALSE(uses_rpq(Arm::TrqEt));
  EXPECT_TRUE(uses_et(Arm::TrqRpqEt));
  EXPECT_FALSE(uses_et(Arm::Rpq));
}

TEST(Arms, QuantizingAnArmKeepsTheBackboneFrozen) {
  const auto fp = ToyOSDSR::create(small_config());
  const auto before = frozen_digest(fp);
  const auto plan = small_plan(fp, 2);
  PipelineLog log;
  const auto q = quantize_arm(Arm::Rpq, fp, small_data(), plan, log);
  EXPECT_EQ(frozen_digest(fp), before);
  EXPECT_EQ(frozen_digest(q), before);
  for (std::size_t i = 0; i < q.module_count(); ++i) EXPECT_TRUE(q.is_active(i));
  const auto report = evaluate(q, fp, small_data(), "rpq");
  EXPECT_EQ(report.bits, "4,4");
  EXPECT_GT(report.psnr_db, 0.0);
}

}  // namespace
}  // namespace qart::calib
