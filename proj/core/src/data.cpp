#include "qart/data.hpp"

#include <algorithm>

#include "qart/errors.hpp"

namespace qart {

Tensor stack_batch(std::span<const Tensor> images) {
  if (images.empty()) throw DataError("cannot stack an empty image list");
  const Shape& first = images.front().shape();
  if (first.size() != 4 || first[1] != 1) throw DimensionError("expected [C,1,H,W] maps, got " + shape_string(first));
  const std::size_t c = first[0], plane = first[2] * first[3], n = images.size();
  std::vector<double> out(c * n * plane);
  for (std::size_t i = 0; i < n; ++i) {
    if (images[i].shape() != first) throw DimensionError("batch members disagree on shape");
    const auto src = images[i].data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ch * plane), plane,
                  out.begin() + static_cast<std::ptrdiff_t>((ch * n + i) * plane));
    }
  }
  return Tensor(Shape{c, n, first[2], first[3]}, std::move(out));
}

namespace {

Tensor gather(const Dataset& data, std::span<const std::size_t> indices, bool high) {
  std::vector<Tensor> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) throw DataError("dataset index " + std::to_string(i) + " out of range");
    picked.push_back(high ? data[i].hr : data[i].lr);
  }
  return stack_batch(picked);
}

}  // namespace

Tensor gather_lr(const Dataset& data, std::span<const std::size_t> indices) { return gather(data, indices, false); }
Tensor gather_hr(const Dataset& data, std::span<const std::size_t> indices) { return gather(data, indices, true); }

std::vector<Tensor> unstack_batch(const Tensor& batch) {
  if (batch.rank() != 4) throw DimensionError("expected a [C,N,H,W] batch, got " + shape_string(batch.shape()));
  const std::size_t c = batch.dim(0), n = batch.dim(1), plane = batch.dim(2) * batch.dim(3);
  const auto src = batch.data();
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> img(c * plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((ch * n + i) * plane), plane,
                  img.begin() + static_cast<std::ptrdiff_t>(ch * plane));
    }
    out.emplace_back(Shape{c, 1, batch.dim(2), batch.dim(3)}, std::move(img));
  }
  return out;
}

}  // namespace qart
