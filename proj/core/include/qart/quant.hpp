#pragma once

#include <span>
#include <utility>
#include <vector>

#include "qart/tensor.hpp"

namespace qart::quant {

inline constexpr double kScaleFloor = 1e-8;

enum class QuantizerMode { FpPassthrough, MaxMinStatic, LearnedStep };
enum class Granularity { PerTensor, PerChannel };

/// Integer window [l, u] for a bit-width: signed -> [-2^(b-1), 2^(b-1)-1],
/// unsigned -> [0, 2^b - 1].
std::pair<int, int> clip_bounds(int bits, bool is_signed);

/// Affine grid parameters. `scale` and `zero_point` are either a single
/// value ([1]) or one value per channel along axis 0 ([channels, 1]).
struct QuantParams {
  int bits = 8;
  bool is_signed = false;
  Tensor scale;
  Tensor zero_point;
  int clip_lo = 0;
  int clip_hi = 255;

  static QuantParams make(int bits, bool is_signed, std::vector<double> scale, std::vector<double> zero_point);

  std::size_t channels() const { return scale.numel(); }
  /// Throws ParameterError when bounds or shapes are inconsistent or s <= 0.
  void validate() const;
  QuantParams clone() const;
};

/// x_int = CLIP(round((x - z) / s), l, u). No gradient.
Tensor quantize(const Tensor& x, const QuantParams& qp);
/// x_hat = s * x_int + z. Throws ParameterError on integers outside [l, u].
Tensor dequantize(const Tensor& x_int, const QuantParams& qp);

/// dequantize(quantize(x)) with straight-through gradients:
///   dx: 1 where (x - z)/s lies in [l, u], else 0
///   ds: round(v) - v inside the window, l or u outside
///   dz: 0 inside the window, 1 outside
/// Gradients flow to scale / zero_point only if they require grad.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

/// Streaming min/max statistics over a calibration set.
class MinMaxObserver {
 public:
  explicit MinMaxObserver(Granularity granularity = Granularity::PerTensor) : granularity_(granularity) {}
  void observe(const Tensor& sample);
  bool empty() const noexcept { return count_ == 0; }
  /// Asymmetric: s = (max - min)/(u - l), z = min - l*s.
  /// Symmetric: z = 0, s = max(max/u, min/l).
  /// Constant channels get s = 1e-8 and z = the constant.
  QuantParams finish(int bits, bool is_signed, bool symmetric) const;

 private:
  Granularity granularity_;
  std::vector<double> lo_, hi_;
  std::size_t count_ = 0;
};

/// One-pass min/max calibration over a sample stream. Throws
/// CalibrationError on an empty stream.
QuantParams calibrate_maxmin(std::span<const Tensor> samples, int bits, bool is_signed, Granularity granularity,
                             bool symmetric = false);

/// Marks s (and z unless symmetric) trainable for learned-step updates.
void enable_learned_step(QuantParams& qp, bool train_zero_point);
/// Lower clamp s >= 1e-8, applied after every optimiser step.
void clamp_scale(QuantParams& qp);

/// A quantiser slot inside a layer: mode plus parameters.
class Quantizer {
 public:
  Quantizer() = default;
  Quantizer(QuantizerMode mode, QuantParams params);

  static Quantizer passthrough() { return {}; }

  QuantizerMode mode() const noexcept { return mode_; }
  bool active() const noexcept { return mode_ != QuantizerMode::FpPassthrough; }
  const QuantParams& params() const { return params_; }
  QuantParams& params() { return params_; }

  /// Identity in FP_PASSTHROUGH mode, fake_quant otherwise.
  Tensor operator()(const Tensor& x) const;

  /// Scale / zero-point tensors that an optimiser may update.
  std::vector<Tensor> trainable() const;

 private:
  QuantizerMode mode_ = QuantizerMode::FpPassthrough;
  QuantParams params_;
};

}  // namespace qart::quant
