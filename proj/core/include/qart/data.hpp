#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qart/tensor.hpp"

namespace qart {

/// One low/high resolution training pair, each a [3, 1, H, W] map in [0, 1].
struct ImagePair {
  Tensor lr;
  Tensor hr;
};

using Dataset = std::vector<ImagePair>;

/// Concatenates [C, 1, H, W] maps along the batch axis into [C, N, H, W].
Tensor stack_batch(std::span<const Tensor> images);

/// Gathers dataset[indices[i]].lr / .hr into two batches.
Tensor gather_lr(const Dataset& data, std::span<const std::size_t> indices);
Tensor gather_hr(const Dataset& data, std::span<const std::size_t> indices);

/// Splits a [C, N, H, W] batch back into N single-image maps.
std::vector<Tensor> unstack_batch(const Tensor& batch);

}  // namespace qart
