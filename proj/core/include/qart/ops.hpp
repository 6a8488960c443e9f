#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "qart/tensor.hpp"

namespace qart {

/// Shape obtained by numpy-style broadcasting; throws DimensionError.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Elementwise binary ops with broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericError on a zero divisor.
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
/// Throws NumericError on negative input.
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);

/// min(max(x, lo), hi). Gradient is 1 where lo <= x <= hi, else 0.
Tensor clip(const Tensor& a, double lo, double hi);
/// Round half away from zero. Analytic gradient is zero.
Tensor round(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Forward value from `forward`, gradient from `rule(grad_out, x)` instead of
/// the analytic derivative.
using ForwardFn = std::function<std::vector<double>(std::span<const double>)>;
using GradRule = std::function<std::vector<double>(std::span<const double> grad_out, std::span<const double> x)>;
Tensor custom_grad(const Tensor& x, const ForwardFn& forward, GradRule rule, std::string_view name = "custom");

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

/// Scalar round-half-away-from-zero used by every quantiser.
inline double round_half_away(double v) { return v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5); }

/// y = A x for a fixed sparse linear map. `taps(emit)` must call
/// emit(out_index, in_index, weight) for every non-zero of A; the adjoint
/// replays the same taps.
template <class Taps>
Tensor sparse_linear(std::string_view op, const Tensor& x, Shape out_shape, Taps taps) {
  std::vector<double> y(shape_numel(out_shape), 0.0);
  {
    const auto xs = x.data();
    taps([&](std::size_t o, std::size_t i, double w) { y[o] += w * xs[i]; });
  }
  const std::size_t n_in = x.numel();
  return make_result(op, std::move(out_shape), std::move(y), {x},
                     [x, taps, n_in](std::span<const double> g, std::span<const double>) {
                       std::vector<double> gx(n_in, 0.0);
                       taps([&](std::size_t o, std::size_t i, double w) { gx[i] += w * g[o]; });
                       accumulate_grad(x, gx);
                     });
}

}  // namespace qart
