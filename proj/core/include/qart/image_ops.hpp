#pragma once

#include "qart/tensor.hpp"

// Differentiable feature-map operations. Feature maps are laid out
// channel-major as [C, N, H, W] so a convolution lowers to a single matrix
// product whose output is already in that layout.
namespace qart {

/// [C, N, H, W] -> [C*k*k, N*Ho*Wo]. Row index is (c*k + ky)*k + kx.
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);

/// Reorders a [k, k, c_in, c_out] kernel into the [c_out, c_in*k*k] matrix
/// consumed by conv2d.
Tensor kernel_to_matrix(const Tensor& kernel);

/// Convolution lowered to im2col + matmul. `weight` is [c_out, c_in*k*k];
/// `bias` is [c_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel, std::size_t stride,
              std::size_t pad);

/// Inverse of the im2col column layout: [m, N*Ho*Wo] -> [m, N, Ho, Wo].
Tensor columns_to_map(const Tensor& cols, std::size_t batch, std::size_t height, std::size_t width);

/// Bilinear resize by an integer factor (half-pixel centres, edge clamp).
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);

/// 5-tap binomial blur with replicated borders followed by 2x decimation.
Tensor blur_downsample2(const Tensor& x);

/// Horizontal forward difference: [C,N,H,W] -> [C,N,H,W-1].
Tensor diff_x(const Tensor& x);
/// Vertical forward difference: [C,N,H,W] -> [C,N,H-1,W].
Tensor diff_y(const Tensor& x);

}  // namespace qart
