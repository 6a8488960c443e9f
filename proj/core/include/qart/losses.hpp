#pragma once

#include "qart/tensor.hpp"

namespace qart {

/// Mean squared error; throws DimensionError on a shape mismatch.
Tensor mse_loss(const Tensor& a, const Tensor& b);

/// Perceptual stand-in for [C, N, H, W] images: mean absolute difference of
/// horizontal and vertical gradient maps over a 3-level Gaussian pyramid,
/// averaged over the terms. Levels too small for a difference are skipped.
Tensor perceptual_proxy(const Tensor& a, const Tensor& b);

}  // namespace qart
