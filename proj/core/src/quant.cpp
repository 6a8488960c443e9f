#include "qart/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qart/errors.hpp"
#include "qart/ops.hpp"

namespace qart::quant {

namespace {

// Number of consecutive elements sharing one (s, z) pair.
std::size_t group_size(const Tensor& x, const QuantParams& qp) {
  const std::size_t ch = qp.channels();
  if (ch == 1) return x.numel();
  if (x.rank() == 0 || x.dim(0) != ch) {
    throw DimensionError("per-channel params with " + std::to_string(ch) + " channels do not match tensor " +
                         shape_string(x.shape()));
  }
  return x.numel() / ch;
}

}  // namespace

std::pair<int, int> clip_bounds(int bits, bool is_signed) {
  if (bits < 2 || bits > 8) throw ParameterError("bit-width " + std::to_string(bits) + " outside [2, 8]");
  if (is_signed) return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
  return {0, (1 << bits) - 1};
}

QuantParams QuantParams::make(int bits, bool is_signed, std::vector<double> scale, std::vector<double> zero_point) {
  if (scale.size() != zero_point.size() || scale.empty()) {
    throw ParameterError("scale and zero-point must have the same non-zero length");
  }
  QuantParams qp;
  qp.bits = bits;
  qp.is_signed = is_signed;
  std::tie(qp.clip_lo, qp.clip_hi) = clip_bounds(bits, is_signed);
  const Shape shape = scale.size() == 1 ? Shape{1} : Shape{scale.size(), 1};
  qp.scale = Tensor(shape, std::move(scale));
  qp.zero_point = Tensor(shape, std::move(zero_point));
  qp.validate();
  return qp;
}

void QuantParams::validate() const {
  if (!scale.defined() || !zero_point.defined()) throw ParameterError("quantizer parameters not initialised");
  if (scale.numel() != zero_point.numel()) throw ParameterError("scale / zero-point length mismatch");
  const auto [l, u] = clip_bounds(bits, is_signed);
  if (clip_lo != l || clip_hi != u) throw ParameterError("clip bounds inconsistent with bit-width");
  for (double s : scale.data()) {
    if (!(s > 0.0)) throw ParameterError("quantizer scale must be positive");
  }
}

QuantParams QuantParams::clone() const {
  QuantParams qp = *this;
  qp.scale = scale.clone();
  qp.zero_point = zero_point.clone();
  return qp;
}

Tensor quantize(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  const std::size_t group = group_size(x, qp);
  const auto xs = x.data();
  const auto s = qp.scale.data();
  const auto z = qp.zero_point.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t c = i / group;
    const double q = round_half_away((xs[i] - z[c]) / s[c]);
    out[i] = std::clamp(q, static_cast<double>(qp.clip_lo), static_cast<double>(qp.clip_hi));
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor dequantize(const Tensor& x_int, const QuantParams& qp) {
  qp.validate();
  const std::size_t group = group_size(x_int, qp);
  const auto xs = x_int.data();
  const auto s = qp.scale.data();
  const auto z = qp.zero_point.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] < qp.clip_lo || xs[i] > qp.clip_hi || xs[i] != std::floor(xs[i])) {
      throw ParameterError("integer value " + std::to_string(xs[i]) + " outside [" + std::to_string(qp.clip_lo) +
                           ", " + std::to_string(qp.clip_hi) + "]");
    }
    const std::size_t c = i / group;
    out[i] = s[c] * xs[i] + z[c];
  }
  return Tensor(x_int.shape(), std::move(out));
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  const std::size_t group = group_size(x, qp);
  const auto xs = x.data();
  const auto s = qp.scale.data();
  const auto z = qp.zero_point.data();
  const double l = qp.clip_lo, u = qp.clip_hi;
  const std::size_t n = xs.size();
  // Per element: unrounded grid coordinate v and clipped rounded value q.
  auto v = std::make_shared<std::vector<double>>(n);
  auto q = std::make_shared<std::vector<double>>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / group;
    (*v)[i] = (xs[i] - z[c]) / s[c];
    (*q)[i] = std::clamp(round_half_away((*v)[i]), l, u);
    out[i] = s[c] * (*q)[i] + z[c];
  }
  const Tensor scale = qp.scale;
  const Tensor zero = qp.zero_point;
  return make_result("fake_quant", x.shape(), std::move(out), {x, scale, zero},
                     [x, scale, zero, v, q, group, l, u](std::span<const double> g, std::span<const double>) {
                       const std::size_t n = g.size();
                       const bool gs = scale.requires_grad();
                       const bool gz = zero.requires_grad();
                       std::vector<double> gx(x.requires_grad() ? n : 0);
                       std::vector<double> gsv(gs ? scale.numel() : 0, 0.0);
                       std::vector<double> gzv(gz ? zero.numel() : 0, 0.0);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double vi = (*v)[i];
                         const bool inside = vi >= l && vi <= u;
                         if (!gx.empty()) gx[i] = inside ? g[i] : 0.0;
                         const std::size_t c = i / group;
                         if (gs) gsv[c] += g[i] * (inside ? (*q)[i] - vi : (*q)[i]);
                         if (gz && !inside) gzv[c] += g[i];
                       }
                       if (!gx.empty()) accumulate_grad(x, gx);
                       if (gs) accumulate_grad(scale, gsv);
                       if (gz) accumulate_grad(zero, gzv);
                     });
}

void MinMaxObserver::observe(const Tensor& sample) {
  const auto xs = sample.data();
  const std::size_t channels = granularity_ == Granularity::PerChannel ? sample.dim(0) : 1;
  if (lo_.empty()) {
    lo_.assign(channels, std::numeric_limits<double>::infinity());
    hi_.assign(channels, -std::numeric_limits<double>::infinity());
  } else if (lo_.size() != channels) {
    throw CalibrationError("calibration samples disagree on channel count");
  }
  const std::size_t group = xs.size() / channels;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t c = i / group;
    lo_[c] = std::min(lo_[c], xs[i]);
    hi_[c] = std::max(hi_[c], xs[i]);
  }
  ++count_;
}

QuantParams MinMaxObserver::finish(int bits, bool is_signed, bool symmetric) const {
  if (empty()) throw CalibrationError("empty calibration stream");
  const auto [l, u] = clip_bounds(bits, is_signed);
  std::vector<double> s(lo_.size()), z(lo_.size());
  for (std::size_t c = 0; c < lo_.size(); ++c) {
    const double mn = lo_[c], mx = hi_[c];
    if (symmetric) {
      double sc = 0.0;
      if (mx > 0.0) sc = std::max(sc, mx / u);
      if (mn < 0.0) sc = std::max(sc, mn / l);
      s[c] = std::max(sc, kScaleFloor);
      z[c] = 0.0;
    } else if (mx > mn) {
      s[c] = std::max((mx - mn) / static_cast<double>(u - l), kScaleFloor);
      z[c] = mn - l * s[c];
    } else {
      s[c] = kScaleFloor;
      z[c] = mn;
    }
  }
  return QuantParams::make(bits, is_signed, std::move(s), std::move(z));
}

QuantParams calibrate_maxmin(std::span<const Tensor> samples, int bits, bool is_signed, Granularity granularity,
                             bool symmetric) {
  MinMaxObserver obs(granularity);
  for (const auto& t : samples) obs.observe(t);
  return obs.finish(bits, is_signed, symmetric);
}

void enable_learned_step(QuantParams& qp, bool train_zero_point) {
  qp.scale.set_requires_grad(true);
  qp.zero_point.set_requires_grad(train_zero_point);
}

void clamp_scale(QuantParams& qp) {
  for (auto& s : qp.scale.mutable_data()) s = std::max(s, kScaleFloor);
}

Quantizer::Quantizer(QuantizerMode mode, QuantParams params) : mode_(mode), params_(std::move(params)) {
  if (mode_ != QuantizerMode::FpPassthrough) params_.validate();
}

Tensor Quantizer::operator()(const Tensor& x) const {
  if (mode_ == QuantizerMode::FpPassthrough) return x;
  return fake_quant(x, params_);
}

std::vector<Tensor> Quantizer::trainable() const {
  std::vector<Tensor> out;
  if (mode_ != QuantizerMode::LearnedStep) return out;
  if (params_.scale.requires_grad()) out.push_back(params_.scale);
  if (params_.zero_point.requires_grad()) out.push_back(params_.zero_point);
  return out;
}

}  // namespace qart::quant
