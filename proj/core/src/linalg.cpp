#include "qart/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qart/errors.hpp"

namespace qart {

namespace {

using Column = std::vector<double>;

double dot(const Column& a, const Column& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Orthonormal replacement for a column whose singular value vanished.
Column complete_basis(const std::vector<Column>& basis, std::size_t dim) {
  for (std::size_t e = 0; e < dim; ++e) {
    Column c(dim, 0.0);
    c[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double p = dot(c, b);
        for (std::size_t i = 0; i < dim; ++i) c[i] -= p * b[i];
      }
    }
    const double norm = std::sqrt(dot(c, c));
    if (norm > 1e-6) {
      for (auto& x : c) x /= norm;
      return c;
    }
  }
  throw NumericError("cannot complete orthonormal basis");
}

}  // namespace

TruncatedSvd svd_truncated(const Tensor& w, std::size_t rank) {
  if (w.rank() != 2) throw DimensionError("svd expects a matrix, got " + shape_string(w.shape()));
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const std::size_t k = std::min(rows, cols);
  if (rank < 1 || rank > k) {
    throw ParameterError("svd rank " + std::to_string(rank) + " outside [1, " + std::to_string(k) + "]");
  }
  // Work on A (m x n, m >= n); transpose when the input is wide.
  const bool wide = rows < cols;
  const std::size_t m = wide ? cols : rows;
  const std::size_t n = wide ? rows : cols;
  const auto data = w.data();
  std::vector<Column> a(n, Column(m));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      if (wide) a[i][j] = data[i * cols + j];
      else a[j][i] = data[i * cols + j];
    }
  std::vector<Column> v(n, Column(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

  constexpr double kEps = 1e-15;
  const std::size_t max_sweeps = 100 * k;
  bool converged = false;
  for (std::size_t sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(a[p], a[p]);
        const double beta = dot(a[q], a[q]);
        const double gamma = dot(a[p], a[q]);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[p][i], aq = a[q][i];
          a[p][i] = c * ap - s * aq;
          a[q][i] = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[p][i], vq = v[q][i];
          v[p][i] = c * vp - s * vq;
          v[q][i] = s * vp + c * vq;
        }
      }
  }
  if (!converged) throw NumericError("Jacobi SVD did not converge within " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(a[j], a[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sigma[x] > sigma[y]; });

  // Left vectors live in R^m (columns of a), right vectors in R^n (columns of v).
  std::vector<Column> left, right;
  std::vector<double> s;
  const double tiny = (sigma[order[0]] > 0.0 ? sigma[order[0]] : 1.0) * 1e-13;
  for (std::size_t idx = 0; idx < rank; ++idx) {
    const std::size_t j = order[idx];
    Column l = a[j];
    if (sigma[j] > tiny) {
      for (auto& x : l) x /= sigma[j];
      s.push_back(sigma[j]);
    } else {
      l = complete_basis(left, m);
      s.push_back(0.0);
    }
    left.push_back(std::move(l));
    right.push_back(v[j]);
  }

  // Map back: for W = A the left vectors are U; for W = A^T they swap roles.
  const auto& ucols = wide ? right : left;
  const auto& vcols = wide ? left : right;
  std::vector<double> u_data(rows * rank), v_data(rank * cols);
  for (std::size_t r = 0; r < rank; ++r) {
    for (std::size_t i = 0; i < rows; ++i) u_data[i * rank + r] = ucols[r][i];
    for (std::size_t j = 0; j < cols; ++j) v_data[r * cols + j] = vcols[r][j];
  }
  return {Tensor(Shape{rows, rank}, std::move(u_data)), std::move(s), Tensor(Shape{rank, cols}, std::move(v_data))};
}

Tensor svd_reconstruct(const TruncatedSvd& f) {
  const std::size_t m = f.u.dim(0), r = f.u.dim(1), n = f.v.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto u = f.u.data();
  const auto v = f.v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < r; ++k) {
      const double us = u[i * r + k] * f.s[k];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += us * v[k * n + j];
    }
  return Tensor(Shape{m, n}, std::move(out));
}

}  // namespace qart
