#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qart/quant.hpp"
#include "qart/tensor.hpp"

namespace qart::reparam {

/// Bit-width that disables a quantiser (full precision).
inline constexpr int kFullPrecisionBits = 32;

/// Per-input-channel scale phi = exp(log_phi) and offset gamma. Applied as
///   X~ = (X - gamma) / phi,  W~ = phi * W,  B~ = B + W gamma
/// which leaves W X + B unchanged in full precision.
struct EquivalentTransform {
  Tensor log_phi;  // [n, 1]
  Tensor gamma;    // [n, 1]

  static EquivalentTransform identity(std::size_t in_features);

  std::size_t size() const { return gamma.numel(); }
  Tensor phi() const;
  /// x: [n, cols]
  Tensor transform_input(const Tensor& x) const;
  /// w: [m, n], columns scaled by phi.
  Tensor transform_weight(const Tensor& w) const;
  /// B + W gamma as [m, 1]; `bias` may be undefined.
  Tensor compensate_bias(const Tensor& bias, const Tensor& w) const;

  EquivalentTransform clone() const;
};

struct FinetuneOptions {
  /// Rank of the full-precision skip L1 L2; default ceil(min(m, n) / 16), at least 1.
  std::optional<std::size_t> rank;
  /// Rank of the residual finetuner F1 F2; same default as `rank`.
  std::optional<std::size_t> finetune_rank;
  quant::QuantizerMode mode = quant::QuantizerMode::LearnedStep;
  quant::Granularity weight_granularity = quant::Granularity::PerChannel;
  /// 32 disables the bias quantiser.
  int bias_bits = 8;
  double finetune_init_std = 1e-4;
  std::uint64_t seed = 0;
};

std::size_t default_rank(std::size_t out_features, std::size_t in_features);

/// Quantised linear layer with a full-precision low-rank skip, a low-rank
/// residual finetuner and an equivalent transform:
///   y = L1 L2 x + Q_W(phi * M) Q_A((x - gamma) / phi) + Q_B(B + M gamma)
/// with M = R + F1 F2 and R = W - L1 L2. W and B are frozen; everything
/// else may be trained. Q_B is refit to the compensated bias on every call.
class FinetuneQuantizer {
 public:
  /// `activation_samples` are [n, cols] inputs used to calibrate Q_A.
  /// Bit-width 32 selects a passthrough quantiser.
  static FinetuneQuantizer init(const Tensor& weight, const Tensor& bias, std::span<const Tensor> activation_samples,
                                int weight_bits, int activation_bits, const FinetuneOptions& options);

  /// x: [n, cols] -> [m, cols]
  Tensor forward(const Tensor& x) const;

  /// W - L1 L2 (recomputed, differentiable wrt L1, L2).
  Tensor residual() const;
  /// R + F1 F2, the matrix the weight quantiser sees before phi.
  Tensor tuned_residual() const;

  std::vector<Tensor> finetune_params() const;
  std::vector<Tensor> quant_params() const;
  std::vector<Tensor> trainable() const;

  void clamp_scales();
  /// Refits Q_A on inputs passed through the current transform.
  void recalibrate_activation(std::span<const Tensor> samples);
  /// Switches every quantiser to FP_PASSTHROUGH.
  void set_passthrough();

  /// (r + r')(m + n) + 2n + quantiser scalars.
  std::size_t overhead_params() const;
  /// Extra multiply-accumulates per input column for the FP skip branch.
  std::size_t overhead_macs_per_column() const;

  std::size_t out_features() const { return weight_.dim(0); }
  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t rank() const { return rank_; }
  std::size_t finetune_rank() const { return finetune_rank_; }
  int weight_bits() const { return weight_bits_; }
  int activation_bits() const { return activation_bits_; }
  int bias_bits() const { return bias_bits_; }

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  const Tensor& l1() const { return l1_; }
  const Tensor& l2() const { return l2_; }
  const Tensor& f1() const { return f1_; }
  const Tensor& f2() const { return f2_; }
  const EquivalentTransform& transform() const { return et_; }
  EquivalentTransform& transform() { return et_; }
  const quant::Quantizer& weight_quantizer() const { return qw_; }
  const quant::Quantizer& activation_quantizer() const { return qa_; }
  quant::Quantizer& weight_quantizer() { return qw_; }
  quant::Quantizer& activation_quantizer() { return qa_; }

  /// Deep copy of all trainable state; W and B stay shared (frozen).
  FinetuneQuantizer clone() const;
  /// Points the layer at other (equal-shaped) frozen W and B tensors.
  void rebind_frozen(const Tensor& weight, const Tensor& bias);

  /// Rebuilds a layer from stored state (checkpoint loading).
  struct State {
    Tensor weight, bias, l1, l2, f1, f2;
    EquivalentTransform transform;
    quant::Quantizer qw, qa;
    int weight_bits = 32, activation_bits = 32, bias_bits = 32;
  };
  static FinetuneQuantizer from_state(State state);

 private:
  Tensor weight_, bias_;
  Tensor l1_, l2_, f1_, f2_;
  std::size_t rank_ = 0, finetune_rank_ = 0;
  EquivalentTransform et_;
  quant::Quantizer qw_, qa_;
  int weight_bits_ = 32, activation_bits_ = 32, bias_bits_ = 32;
};

}  // namespace qart::reparam
