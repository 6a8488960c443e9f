#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qart/data.hpp"
#include "qart/metrics.hpp"
#include "qart/model.hpp"
#include "qart/reparam.hpp"
#include "qart/schedule.hpp"

namespace qart::calib {

/// Weights of the image loss a1 * proxy + a2 * MSE and of the module loss in
/// a per-module stage objective.
struct LossConfig {
  double a1 = 1.0;
  double a2 = 1.0;
  double module_loss_weight = 1.0;

  /// Throws ConfigError on negative weights or a1 = a2 = 0.
  void validate() const;
};

struct BitWidth {
  int weight = 4;
  int activation = 4;

  /// "W,A", e.g. "4,4".
  std::string to_string() const;
  /// Parses "W,A"; throws ParameterError.
  static BitWidth parse(const std::string& text);
  bool operator==(const BitWidth&) const = default;
};

/// a1 * perceptual_proxy + a2 * MSE. DimensionError on a shape mismatch.
Tensor image_loss(const Tensor& quantized, const Tensor& reference, const LossConfig& cfg);
/// Mean squared error between a quantised module output and its FP output.
Tensor module_loss(const Tensor& quantized, const Tensor& reference);

struct CalibrationPlan {
  /// Registry indices in quantisation order: the reverse of inference order.
  std::vector<std::size_t> order;
  std::size_t stage_steps = 200;
  std::size_t et_steps = 1000;
  std::size_t batch = 4;
  /// Learning rate of the low-rank factors and the equivalent transform.
  double finetune_lr = 1e-3;
  /// Learning rate of quantiser scales and zero-points.
  double quant_lr = 1e-3;
  /// Learning rate of both groups during extended training.
  double et_lr = 3e-3;
  /// Images used for MaxMin activation calibration.
  std::size_t calibration_images = 16;
  std::uint64_t seed = 0;
  BitWidth bits;
  LossConfig loss;
  reparam::FinetuneOptions layer;

  /// Plan whose order is the reversed registry of `model`.
  static CalibrationPlan reversed(const model::ToyOSDSR& model);
  /// Throws ConfigError when the order is not the reversed registry or a
  /// budget is zero.
  void validate(const model::ToyOSDSR& model) const;
};

/// Installs a calibrated quantiser on every registry module (all inactive).
/// Activation ranges come from FP forward passes at timestep t over the first
/// `images` pairs of `calib`.
void prepare_quantizers(model::ToyOSDSR& model, const Dataset& calib, int t, BitWidth bits,
                        const reparam::FinetuneOptions& layer, std::size_t images);

/// Static MaxMin calibration of every registry module; no training. All
/// modules end up active. Bit-width 32 leaves them as passthrough.
void run_maxmin_baseline(model::ToyOSDSR& model, const Dataset& calib, BitWidth bits, std::size_t images = 16,
                         const reparam::FinetuneOptions& layer = {});

/// FNV-1a over the backbone weights.
std::uint64_t frozen_digest(const model::ToyOSDSR& model);

struct StageRow {
  std::string stage;
  std::size_t step = 0;
  double module_loss = 0.0;
  double image_loss = 0.0;
  double total = 0.0;
};

struct PipelineLog {
  std::vector<StageRow> rows;
  /// Stage names in the order they ran.
  std::vector<std::string> stages;
  /// Gradient events seen on a module's quantiser before its stage started.
  std::vector<std::size_t> early_grad_events;
  std::uint64_t digest = 0;

  /// Header "stage,step,L_M,L_image,total".
  std::string to_csv() const;
  /// Objective totals of one stage in step order.
  std::vector<double> totals(const std::string& stage) const;
};

/// Called after every finished stage with its name and the model.
using StageHook = std::function<void(const std::string& stage, const model::ToyOSDSR& model)>;

/// Mean of the last `patience` objectives is no larger than the mean of the
/// first `patience`.
bool non_increasing(std::span<const double> curve, std::size_t patience = 5);

/// Reversed per-module quantisation. Expects quantisers from
/// prepare_quantizers; each stage activates one module and trains every active
/// module on module_loss_weight * L_M + L_image. Throws TrainingError when the
/// frozen weights change.
void run_rpq(model::ToyOSDSR& model, const Dataset& calib, const CalibrationPlan& plan, PipelineLog& log,
             const StageHook& hook = {});

/// End-to-end training of every active module on the image loss.
void run_et(model::ToyOSDSR& model, const Dataset& calib, const CalibrationPlan& plan, PipelineLog& log,
            const StageHook& hook = {});

/// Activates every registry module at once after recalibrating Q_A.
void activate_all(model::ToyOSDSR& model, const Dataset& calib, std::size_t images);

struct TrqOptions {
  model::TrainOptions train;
  std::size_t probes = 8;
  std::size_t calibration_images = 8;
};

struct TrqResult {
  int best_t = 0;
  diffusion::TimestepErrorProfile profile;
  model::ToyOSDSR backbone;
  model::TrainLog log;
};

/// Latent error profile of `fp` under MaxMin quantisation of the denoiser,
/// calibrated separately at every timestep.
diffusion::TimestepErrorProfile sweep_timesteps(const model::ToyOSDSR& fp, const Dataset& calib,
                                                const Dataset& probes, std::span<const int> timesteps, BitWidth bits,
                                                std::size_t calibration_images = 8);

/// Ranks candidates by measured latent error of `original`, then retrains a
/// fresh backbone (same config and seed) at the minimiser.
TrqResult run_trq(const model::ToyOSDSR& original, const Dataset& data, std::span<const int> candidates, BitWidth bits,
                  const TrqOptions& options);

/// The six ablation arms.
enum class Arm { Baseline, Trq, Rpq, TrqRpq, TrqEt, TrqRpqEt };

inline constexpr Arm kAllArms[] = {Arm::Baseline, Arm::Trq, Arm::Rpq, Arm::TrqRpq, Arm::TrqEt, Arm::TrqRpqEt};

std::string to_string(Arm arm);
Arm parse_arm(const std::string& name);
bool uses_trq(Arm arm);
bool uses_rpq(Arm arm);
bool uses_et(Arm arm);

/// Quantises a copy of `backbone` as the arm prescribes (MaxMin for arms
/// without any training, finetunable quantised layers otherwise).
model::ToyOSDSR quantize_arm(Arm arm, const model::ToyOSDSR& backbone, const Dataset& calib,
                             const CalibrationPlan& plan, PipelineLog& log, const StageHook& hook = {});

/// Mean PSNR of quantised against FP outputs over a set (clamped images).
double psnr_to_fp(const model::ToyOSDSR& quantized, const model::ToyOSDSR& fp, const Dataset& eval, int t);

/// PSNR / SSIM of `quantized` against `fp` outputs and the mean latent error
/// of its denoiser, averaged over `eval` at the model's own timestep. Bits are
/// read from the first active quantiser ("32,32" when none is active).
metrics::MetricReport evaluate(const model::ToyOSDSR& quantized, const model::ToyOSDSR& fp, const Dataset& eval,
                               const std::string& tag);

}  // namespace qart::calib
