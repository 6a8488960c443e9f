#include "qart/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "qart/errors.hpp"
#include "qart/linalg.hpp"
#include "qart/ops.hpp"

namespace qart::reparam {

using quant::Quantizer;
using quant::QuantizerMode;

EquivalentTransform EquivalentTransform::identity(std::size_t in_features) {
  EquivalentTransform et;
  et.log_phi = Tensor(Shape{in_features, 1}, 0.0).set_requires_grad(true);
  et.gamma = Tensor(Shape{in_features, 1}, 0.0).set_requires_grad(true);
  return et;
}

Tensor EquivalentTransform::phi() const { return exp(log_phi); }

Tensor EquivalentTransform::transform_input(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != size()) {
    throw DimensionError("transform input " + shape_string(x.shape()) + " does not match " +
                         std::to_string(size()) + " channels");
  }
  return div(sub(x, gamma), phi());
}

Tensor EquivalentTransform::transform_weight(const Tensor& w) const {
  if (w.rank() != 2 || w.dim(1) != size()) {
    throw DimensionError("transform weight " + shape_string(w.shape()) + " does not match " +
                         std::to_string(size()) + " channels");
  }
  return mul(w, reshape(phi(), Shape{1, size()}));
}

Tensor EquivalentTransform::compensate_bias(const Tensor& bias, const Tensor& w) const {
  Tensor shift = matmul(w, gamma);
  if (!bias.defined()) return shift;
  return add(reshape(bias, Shape{w.dim(0), 1}), shift);
}

EquivalentTransform EquivalentTransform::clone() const { return {log_phi.clone(), gamma.clone()}; }

std::size_t default_rank(std::size_t out_features, std::size_t in_features) {
  const std::size_t k = std::min(out_features, in_features);
  return std::max<std::size_t>(1, (k + 15) / 16);
}

namespace {

Quantizer make_quantizer(QuantizerMode mode, quant::QuantParams qp, bool train_zero) {
  if (mode == QuantizerMode::LearnedStep) quant::enable_learned_step(qp, train_zero);
  return Quantizer(mode, std::move(qp));
}

}  // namespace

FinetuneQuantizer FinetuneQuantizer::init(const Tensor& weight, const Tensor& bias,
                                          std::span<const Tensor> activation_samples, int weight_bits,
                                          int activation_bits, const FinetuneOptions& options) {
  if (weight.rank() != 2) throw DimensionError("finetune quantizer expects a matrix weight");
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  if (bias.defined() && bias.numel() != m) throw DimensionError("bias length does not match output features");
  FinetuneQuantizer fq;
  fq.weight_ = weight;
  fq.bias_ = bias;
  fq.rank_ = options.rank.value_or(default_rank(m, n));
  fq.finetune_rank_ = options.finetune_rank.value_or(default_rank(m, n));
  if (fq.rank_ + fq.finetune_rank_ > std::min(m, n)) {
    throw ParameterError("ranks r=" + std::to_string(fq.rank_) + ", r'=" + std::to_string(fq.finetune_rank_) +
                         " exceed min(m, n)=" + std::to_string(std::min(m, n)));
  }
  if (fq.rank_ > 0) {
    auto svd = svd_truncated(weight.detach(), fq.rank_);
    // Balanced split: L1 = U sqrt(S), L2 = sqrt(S) V.
    auto u = svd.u.mutable_data();
    auto v = svd.v.mutable_data();
    for (std::size_t k = 0; k < fq.rank_; ++k) {
      const double root = std::sqrt(svd.s[k]);
      for (std::size_t i = 0; i < m; ++i) u[i * fq.rank_ + k] *= root;
      for (std::size_t j = 0; j < n; ++j) v[k * n + j] *= root;
    }
    fq.l1_ = svd.u.set_requires_grad(true);
    fq.l2_ = svd.v.set_requires_grad(true);
  }
  if (fq.finetune_rank_ > 0) {
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> dist(0.0, options.finetune_init_std);
    std::vector<double> f1(m * fq.finetune_rank_);
    for (auto& x : f1) x = dist(rng);
    fq.f1_ = Tensor(Shape{m, fq.finetune_rank_}, std::move(f1)).set_requires_grad(true);
    fq.f2_ = Tensor(Shape{fq.finetune_rank_, n}, 0.0).set_requires_grad(true);
  }
  fq.et_ = EquivalentTransform::identity(n);
  fq.weight_bits_ = weight_bits;
  fq.activation_bits_ = activation_bits;
  fq.bias_bits_ = (weight_bits < kFullPrecisionBits && options.bias_bits < kFullPrecisionBits && bias.defined())
                      ? options.bias_bits
                      : kFullPrecisionBits;
  if (weight_bits < kFullPrecisionBits) {
    NoGradGuard ng;
    const Tensor target = fq.tuned_residual();
    auto qp = quant::calibrate_maxmin(std::span<const Tensor>(&target, 1), weight_bits, true,
                                      options.weight_granularity, true);
    fq.qw_ = make_quantizer(options.mode, std::move(qp), false);
  }
  if (activation_bits < kFullPrecisionBits) {
    if (activation_samples.empty()) throw CalibrationError("no activation samples for Q_A calibration");
    auto qp = quant::calibrate_maxmin(activation_samples, activation_bits, false, quant::Granularity::PerTensor);
    fq.qa_ = make_quantizer(options.mode, std::move(qp), true);
  }
  return fq;
}

Tensor FinetuneQuantizer::residual() const {
  if (rank_ == 0) return weight_;
  return sub(weight_, matmul(l1_, l2_));
}

Tensor FinetuneQuantizer::tuned_residual() const {
  Tensor r = residual();
  if (finetune_rank_ == 0) return r;
  return add(r, matmul(f1_, f2_));
}

Tensor FinetuneQuantizer::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != in_features()) {
    throw DimensionError("layer input " + shape_string(x.shape()) + " does not match " +
                         std::to_string(in_features()) + " input features");
  }
  const Tensor tuned = tuned_residual();
  Tensor y = matmul(qw_(et_.transform_weight(tuned)), qa_(et_.transform_input(x)));
  if (rank_ > 0) y = add(y, matmul(l1_, matmul(l2_, x)));
  if (bias_.defined()) {
    Tensor b = et_.compensate_bias(bias_, tuned);
    if (bias_bits_ < kFullPrecisionBits) {
      const Tensor stats = b.detach();
      auto qp = quant::calibrate_maxmin(std::span<const Tensor>(&stats, 1), bias_bits_, true,
                                        quant::Granularity::PerTensor, true);
      b = quant::fake_quant(b, qp);
    }
    y = add(y, b);
  }
  return y;
}

std::vector<Tensor> FinetuneQuantizer::finetune_params() const {
  std::vector<Tensor> out;
  if (rank_ > 0) {
    out.push_back(l1_);
    out.push_back(l2_);
  }
  if (finetune_rank_ > 0) {
    out.push_back(f1_);
    out.push_back(f2_);
  }
  out.push_back(et_.log_phi);
  out.push_back(et_.gamma);
  return out;
}

std::vector<Tensor> FinetuneQuantizer::quant_params() const {
  auto out = qw_.trainable();
  for (auto& t : qa_.trainable()) out.push_back(t);
  return out;
}

std::vector<Tensor> FinetuneQuantizer::trainable() const {
  auto out = finetune_params();
  for (auto& t : quant_params()) out.push_back(t);
  return out;
}

void FinetuneQuantizer::clamp_scales() {
  if (qw_.active()) quant::clamp_scale(qw_.params());
  if (qa_.active()) quant::clamp_scale(qa_.params());
}

void FinetuneQuantizer::recalibrate_activation(std::span<const Tensor> samples) {
  if (!qa_.active()) return;
  NoGradGuard ng;
  std::vector<Tensor> transformed;
  transformed.reserve(samples.size());
  for (const auto& s : samples) transformed.push_back(et_.transform_input(s));
  auto qp = quant::calibrate_maxmin(transformed, activation_bits_, false, quant::Granularity::PerTensor);
  qa_ = make_quantizer(qa_.mode(), std::move(qp), qa_.mode() == QuantizerMode::LearnedStep);
}

void FinetuneQuantizer::set_passthrough() {
  qw_ = Quantizer::passthrough();
  qa_ = Quantizer::passthrough();
  weight_bits_ = activation_bits_ = bias_bits_ = kFullPrecisionBits;
}

std::size_t FinetuneQuantizer::overhead_params() const {
  const std::size_t m = out_features(), n = in_features();
  std::size_t scalars = 0;
  if (qw_.active()) scalars += qw_.params().channels();
  if (qa_.active()) scalars += 2;
  if (bias_bits_ < kFullPrecisionBits) scalars += 1;
  return (rank_ + finetune_rank_) * (m + n) + 2 * n + scalars;
}

std::size_t FinetuneQuantizer::overhead_macs_per_column() const {
  return rank_ * (out_features() + in_features()) + in_features();
}

FinetuneQuantizer FinetuneQuantizer::clone() const {
  FinetuneQuantizer fq = *this;
  if (l1_.defined()) fq.l1_ = l1_.clone();
  if (l2_.defined()) fq.l2_ = l2_.clone();
  if (f1_.defined()) fq.f1_ = f1_.clone();
  if (f2_.defined()) fq.f2_ = f2_.clone();
  fq.et_ = et_.clone();
  if (qw_.active()) fq.qw_ = Quantizer(qw_.mode(), qw_.params().clone());
  if (qa_.active()) fq.qa_ = Quantizer(qa_.mode(), qa_.params().clone());
  return fq;
}

void FinetuneQuantizer::rebind_frozen(const Tensor& weight, const Tensor& bias) {
  if (weight.shape() != weight_.shape() || bias.defined() != bias_.defined() ||
      (bias.defined() && bias.numel() != bias_.numel())) {
    throw DimensionError("rebind_frozen: tensors do not match the layer");
  }
  weight_ = weight;
  bias_ = bias;
}

FinetuneQuantizer FinetuneQuantizer::from_state(State state) {
  if (!state.weight.defined() || state.weight.rank() != 2) throw DimensionError("finetune state lacks a weight");
  FinetuneQuantizer fq;
  fq.weight_ = std::move(state.weight);
  fq.bias_ = std::move(state.bias);
  fq.l1_ = std::move(state.l1);
  fq.l2_ = std::move(state.l2);
  fq.f1_ = std::move(state.f1);
  fq.f2_ = std::move(state.f2);
  fq.rank_ = fq.l1_.defined() ? fq.l1_.dim(1) : 0;
  fq.finetune_rank_ = fq.f1_.defined() ? fq.f1_.dim(1) : 0;
  fq.et_ = std::move(state.transform);
  if (fq.et_.size() != fq.in_features()) throw DimensionError("transform size does not match layer");
  fq.qw_ = std::move(state.qw);
  fq.qa_ = std::move(state.qa);
  fq.weight_bits_ = state.weight_bits;
  fq.activation_bits_ = state.activation_bits;
  fq.bias_bits_ = state.bias_bits;
  return fq;
}

}  // namespace qart::reparam
