#include <algorithm>
#include <cmath>
#include <numbers>

#include "mole/kernels.hpp"

namespace mole::kernels::serial {

void gemm_nn(std::size_t m, std::size_t p, std::size_t n, In a, In b, Out c, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * p + t] * b[t * n + j];
}

void gemm_tn(std::size_t m, std::size_t p, std::size_t n, In a, In g, Out c) {
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[r * p + i] * g[r * n + j];
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t p, In g, In b, Out c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < p; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b[t * n + j];
      c[i * p + t] += acc;
    }
}

void softmax_rows(std::size_t rows, std::size_t cols, In x, Out y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[r * cols + j] = std::exp(x[r * cols + j] - mx);
      sum += y[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] /= sum;
  }
}

void layer_norm_rows(std::size_t rows, std::size_t cols, In x, In gamma, In beta, double eps,
                     Out y, Out mean, Out rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[r * cols + j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = x[r * cols + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double s = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = s;
    for (std::size_t j = 0; j < cols; ++j)
      y[r * cols + j] = (x[r * cols + j] - mu) * s * gamma[j] + beta[j];
  }
}

void gelu(In x, Out y) {
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
}

void gelu_backward(In x, In dy, Out dx) {
  const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

}  // namespace mole::kernels::serial
