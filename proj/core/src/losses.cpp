#include "qart/losses.hpp"

#include "qart/errors.hpp"
#include "qart/image_ops.hpp"
#include "qart/ops.hpp"

namespace qart {

namespace {

constexpr int kPyramidLevels = 3;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  return mean(square(sub(a, b)));
}

Tensor perceptual_proxy(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "perceptual proxy");
  if (a.rank() != 4) throw DimensionError("perceptual proxy expects [C,N,H,W] images");
  Tensor total;
  int terms = 0;
  auto accumulate = [&](const Tensor& t) {
    total = total.defined() ? add(total, t) : t;
    ++terms;
  };
  Tensor x = a, y = b;
  for (int level = 0; level < kPyramidLevels; ++level) {
    if (level > 0) {
      if (x.dim(2) < 2 && x.dim(3) < 2) break;
      x = blur_downsample2(x);
      y = blur_downsample2(y);
    }
    if (x.dim(3) >= 2) accumulate(mean(abs(sub(diff_x(x), diff_x(y)))));
    if (x.dim(2) >= 2) accumulate(mean(abs(sub(diff_y(x), diff_y(y)))));
  }
  if (terms == 0) return mul_scalar(sum(sub(a, b)), 0.0);
  return mul_scalar(total, 1.0 / terms);
}

}  // namespace qart
