#include "qart/ops.hpp"

#include <algorithm>
#include <cmath>

#include "qart/errors.hpp"

namespace qart {

namespace {

// Flat input indices for every output element of a broadcast.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    stride[d + offset] = in[d] == 1 ? 0 : s;
    s *= in[d];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = flat;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      flat += stride[d];
      if (counter[d] < out[d]) break;
      flat -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> ai, bi;
  bool same = false;
};

Broadcast plan(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  p.out = broadcast_shape(a, b);
  p.ai = broadcast_index(a, p.out);
  p.bi = broadcast_index(b, p.out);
  return p;
}

// f(x, y) -> value; dfa/dfb(x, y, out) -> partial derivatives.
template <class F, class DA, class DB>
Tensor binary(std::string_view name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto p = std::make_shared<Broadcast>(plan(a.shape(), b.shape()));
  const auto n = shape_numel(p->out);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<double> y(n);
  if (p->same) {
    for (std::size_t k = 0; k < n; ++k) y[k] = f(as[k], bs[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) y[k] = f(as[p->ai[k]], bs[p->bi[k]]);
  }
  return make_result(name, p->out, std::move(y), {a, b},
                     [a, b, p, dfa, dfb](std::span<const double> g, std::span<const double> out) {
                       const auto as = a.data();
                       const auto bs = b.data();
                       const auto n = g.size();
                       if (a.requires_grad()) {
                         std::vector<double> ga(as.size(), 0.0);
                         for (std::size_t k = 0; k < n; ++k) {
                           const auto i = p->same ? k : p->ai[k];
                           const auto j = p->same ? k : p->bi[k];
                           ga[i] += g[k] * dfa(as[i], bs[j], out[k]);
                         }
                         accumulate_grad(a, ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(bs.size(), 0.0);
                         for (std::size_t k = 0; k < n; ++k) {
                           const auto i = p->same ? k : p->ai[k];
                           const auto j = p->same ? k : p->bi[k];
                           gb[j] += g[k] * dfb(as[i], bs[j], out[k]);
                         }
                         accumulate_grad(b, gb);
                       }
                     });
}

// f(x) -> value; df(x, out) -> derivative.
template <class F, class D>
Tensor unary(std::string_view name, const Tensor& a, F f, D df) {
  const auto as = a.data();
  std::vector<double> y(as.size());
  for (std::size_t k = 0; k < as.size(); ++k) y[k] = f(as[k]);
  return make_result(name, a.shape(), std::move(y), {a},
                     [a, df](std::span<const double> g, std::span<const double> out) {
                       const auto as = a.data();
                       std::vector<double> ga(as.size());
                       for (std::size_t k = 0; k < as.size(); ++k) ga[k] = g[k] * df(as[k], out[k]);
                       accumulate_grad(a, ga);
                     });
}

// C += A * B with A [m, k], B [k, n], all row-major. Columns are processed in
// tiles that keep a slab of B cache resident while four rows of C update.
void gemm(std::size_t m, std::size_t k, std::size_t n, const double* A, const double* B, double* C) {
  constexpr std::size_t kTile = 128;
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t w = std::min(kTile, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = C + i * n + j0;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
        if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
        const double* b = B + p * n + j0;
        for (std::size_t j = 0; j < w; ++j) {
          const double bv = b[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* c = C + i * n + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        if (av == 0.0) continue;
        const double* b = B + p * n + j0;
        for (std::size_t j = 0; j < w; ++j) c[j] += av * b[j];
      }
    }
  }
}

std::vector<double> transposed(const double* X, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = X[r * cols + c];
  return t;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t ea = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    const std::size_t eb = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[d] = std::max(ea, eb);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary(
      "mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw NumericError("sqrt of negative value");
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double out) {
        if (out == 0.0) throw NumericError("sqrt gradient at zero");
        return 0.5 / out;
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ParameterError("clip bounds inverted");
  return unary(
      "clip", a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor round(const Tensor& a) {
  return unary(
      "round", a, [](double x) { return round_half_away(x); }, [](double, double) { return 0.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", Shape{1}, {s}, {a}, [a](std::span<const double> g, std::span<const double>) {
    std::vector<double> ga(a.numel(), g[0]);
    accumulate_grad(a, ga);
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n, 0.0);
  gemm(m, k, n, a.data().data(), b.data().data(), y.data());
  return make_result("matmul", Shape{m, n}, std::move(y), {a, b},
                     [a, b, m, k, n](std::span<const double> g, std::span<const double>) {
                       const double* A = a.data().data();
                       const double* B = b.data().data();
                       if (a.requires_grad()) {
                         // dA = G * B^T
                         const auto bt = transposed(B, k, n);
                         std::vector<double> ga(m * k, 0.0);
                         gemm(m, n, k, g.data(), bt.data(), ga.data());
                         accumulate_grad(a, ga);
                       }
                       if (b.requires_grad()) {
                         // dB = A^T * G
                         const auto at = transposed(A, m, k);
                         std::vector<double> gb(k * n, 0.0);
                         gemm(k, m, n, at.data(), g.data(), gb.data());
                         accumulate_grad(b, gb);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  return sparse_linear("transpose", a, Shape{n, m}, [m, n](auto&& emit) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) emit(j * m + i, i * n + j, 1.0);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> y(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(y), {a},
                     [a](std::span<const double> g, std::span<const double>) { accumulate_grad(a, g); });
}

Tensor custom_grad(const Tensor& x, const ForwardFn& forward, GradRule rule, std::string_view name) {
  auto y = forward(x.data());
  if (y.size() != x.numel()) {
    throw DimensionError("custom_grad forward changed element count");
  }
  return make_result(name, x.shape(), std::move(y), {x},
                     [x, rule = std::move(rule)](std::span<const double> g, std::span<const double>) {
                       auto gx = rule(g, x.data());
                       if (gx.size() != x.numel()) {
                         throw DimensionError("custom gradient rule returned " + std::to_string(gx.size()) +
                                              " values for tensor of " + std::to_string(x.numel()));
                       }
                       accumulate_grad(x, gx);
                     });
}

}  // namespace qart
