#include "qart/image_ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "qart/errors.hpp"
#include "qart/ops.hpp"

namespace qart {

namespace {

constexpr std::array<double, 5> kBinomialTaps{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

struct MapDims {
  std::size_t c, n, h, w;
};

MapDims map_dims(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(op) + " expects a [C,N,H,W] map, got " + shape_string(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const auto d = map_dims(x, "im2col");
  if (kernel == 0 || stride == 0) throw ParameterError("im2col needs positive kernel and stride");
  if (d.h + 2 * pad < kernel || d.w + 2 * pad < kernel) throw DimensionError("im2col kernel larger than input");
  const std::size_t ho = (d.h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (d.w + 2 * pad - kernel) / stride + 1;
  const std::size_t cols = d.n * ho * wo;
  return sparse_linear("im2col", x, Shape{d.c * kernel * kernel, cols}, [=](auto&& emit) {
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t ky = 0; ky < kernel; ++ky)
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::size_t row = (c * kernel + ky) * kernel + kx;
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
              const std::size_t in_row = ((c * d.n + n) * d.h + static_cast<std::size_t>(iy)) * d.w;
              const std::size_t out_row = row * cols + (n * ho + oy) * wo;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                emit(out_row + ox, in_row + static_cast<std::size_t>(ix), 1.0);
              }
            }
        }
  });
}

Tensor kernel_to_matrix(const Tensor& kernel) {
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
    throw DimensionError("kernel must be [k,k,c_in,c_out], got " + shape_string(kernel.shape()));
  }
  const std::size_t k = kernel.dim(0), cin = kernel.dim(2), cout = kernel.dim(3);
  return sparse_linear("kernel_to_matrix", kernel, Shape{cout, cin * k * k}, [=](auto&& emit) {
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t src = ((ky * k + kx) * cin + ci) * cout + co;
            const std::size_t dst = co * (cin * k * k) + (ci * k + ky) * k + kx;
            emit(dst, src, 1.0);
          }
  });
}

Tensor columns_to_map(const Tensor& cols, std::size_t batch, std::size_t height, std::size_t width) {
  if (cols.rank() != 2 || cols.dim(1) != batch * height * width) {
    throw DimensionError("columns " + shape_string(cols.shape()) + " do not match map " + std::to_string(batch) +
                         "x" + std::to_string(height) + "x" + std::to_string(width));
  }
  return reshape(cols, Shape{cols.dim(0), batch, height, width});
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  const auto d = map_dims(x, "conv2d");
  if (weight.rank() != 2 || weight.dim(1) != d.c * kernel * kernel) {
    throw DimensionError("conv weight " + shape_string(weight.shape()) + " does not match " +
                         std::to_string(d.c) + " input channels with kernel " + std::to_string(kernel));
  }
  const std::size_t ho = (d.h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (d.w + 2 * pad - kernel) / stride + 1;
  Tensor y = matmul(weight, im2col(x, kernel, stride, pad));
  if (bias.defined()) y = add(y, reshape(bias, Shape{weight.dim(0), 1}));
  return columns_to_map(y, d.n, ho, wo);
}

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  const auto d = map_dims(x, "upsample_bilinear");
  if (factor == 0) throw ParameterError("upsample factor must be positive");
  const std::size_t ho = d.h * factor, wo = d.w * factor;
  // Per-axis (index, weight) pairs, computed once.
  auto axis_taps = [factor](std::size_t in, std::size_t out) {
    std::vector<std::array<double, 4>> taps(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const double w1 = src - static_cast<double>(i0);
      taps[o] = {static_cast<double>(i0), 1.0 - w1, static_cast<double>(i1), w1};
    }
    return taps;
  };
  auto ty = std::make_shared<const std::vector<std::array<double, 4>>>(axis_taps(d.h, ho));
  auto tx = std::make_shared<const std::vector<std::array<double, 4>>>(axis_taps(d.w, wo));
  return sparse_linear("upsample_bilinear", x, Shape{d.c, d.n, ho, wo}, [=](auto&& emit) {
    for (std::size_t plane = 0; plane < d.c * d.n; ++plane) {
      const std::size_t ib = plane * d.h * d.w;
      const std::size_t ob = plane * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        const auto& a = (*ty)[oy];
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const auto& b = (*tx)[ox];
          const std::size_t o = ob + oy * wo + ox;
          const auto y0 = static_cast<std::size_t>(a[0]), y1 = static_cast<std::size_t>(a[2]);
          const auto x0 = static_cast<std::size_t>(b[0]), x1 = static_cast<std::size_t>(b[2]);
          emit(o, ib + y0 * d.w + x0, a[1] * b[1]);
          emit(o, ib + y0 * d.w + x1, a[1] * b[3]);
          emit(o, ib + y1 * d.w + x0, a[3] * b[1]);
          emit(o, ib + y1 * d.w + x1, a[3] * b[3]);
        }
      }
    }
  });
}

Tensor blur_downsample2(const Tensor& x) {
  const auto d = map_dims(x, "blur_downsample2");
  const std::size_t ho = (d.h + 1) / 2, wo = (d.w + 1) / 2;
  return sparse_linear("blur_downsample2", x, Shape{d.c, d.n, ho, wo}, [=](auto&& emit) {
    auto clampi = [](std::ptrdiff_t v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    for (std::size_t plane = 0; plane < d.c * d.n; ++plane) {
      const std::size_t ib = plane * d.h * d.w;
      const std::size_t ob = plane * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ky = 0; ky < 5; ++ky) {
            const std::size_t iy = clampi(static_cast<std::ptrdiff_t>(2 * oy + ky) - 2, d.h);
            for (std::size_t kx = 0; kx < 5; ++kx) {
              const std::size_t ix = clampi(static_cast<std::ptrdiff_t>(2 * ox + kx) - 2, d.w);
              emit(ob + oy * wo + ox, ib + iy * d.w + ix, kBinomialTaps[ky] * kBinomialTaps[kx]);
            }
          }
    }
  });
}

Tensor diff_x(const Tensor& x) {
  const auto d = map_dims(x, "diff_x");
  if (d.w < 2) throw DimensionError("diff_x needs width >= 2");
  return sparse_linear("diff_x", x, Shape{d.c, d.n, d.h, d.w - 1}, [=](auto&& emit) {
    for (std::size_t row = 0; row < d.c * d.n * d.h; ++row)
      for (std::size_t j = 0; j + 1 < d.w; ++j) {
        const std::size_t o = row * (d.w - 1) + j;
        emit(o, row * d.w + j + 1, 1.0);
        emit(o, row * d.w + j, -1.0);
      }
  });
}

Tensor diff_y(const Tensor& x) {
  const auto d = map_dims(x, "diff_y");
  if (d.h < 2) throw DimensionError("diff_y needs height >= 2");
  return sparse_linear("diff_y", x, Shape{d.c, d.n, d.h - 1, d.w}, [=](auto&& emit) {
    for (std::size_t plane = 0; plane < d.c * d.n; ++plane)
      for (std::size_t i = 0; i + 1 < d.h; ++i)
        for (std::size_t j = 0; j < d.w; ++j) {
          const std::size_t o = (plane * (d.h - 1) + i) * d.w + j;
          emit(o, (plane * d.h + i + 1) * d.w + j, 1.0);
          emit(o, (plane * d.h + i) * d.w + j, -1.0);
        }
  });
}

}  // namespace qart
