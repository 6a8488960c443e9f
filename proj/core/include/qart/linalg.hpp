#pragma once

#include <cstddef>
#include <vector>

#include "qart/tensor.hpp"

namespace qart {

/// Rank-r factors of a matrix: W ~= u * diag(s) * v.
struct TruncatedSvd {
  Tensor u;               // [m, r], orthonormal columns
  std::vector<double> s;  // r values, non-negative, non-increasing
  Tensor v;               // [r, n], orthonormal rows
};

/// One-sided Jacobi SVD truncated to `rank` (1 <= rank <= min(m, n)).
/// Sweeps are capped at 100 * min(m, n); exceeding the cap throws NumericError.
TruncatedSvd svd_truncated(const Tensor& w, std::size_t rank);

/// u * diag(s) * v as a plain matrix (no graph).
Tensor svd_reconstruct(const TruncatedSvd& f);

}  // namespace qart
