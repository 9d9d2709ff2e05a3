#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include <omp.h>

#include "mole/kernels.hpp"

namespace mole::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace parallel {

namespace {
// OpenMP wants a signed induction variable.
using Index = std::int64_t;

bool worth_forking(std::size_t work) { return work >= kParallelWorkThreshold; }
}  // namespace

void gemm_nn(std::size_t m, std::size_t p, std::size_t n, In a, In b, Out c, bool accumulate) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static) if (worth_forking(m * p * n))
  for (Index ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a.data() + i * p;
    for (std::size_t t = 0; t < p; ++t) {
      const double av = arow[t];
      const double* brow = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t p, std::size_t n, In a, In g, Out c) {
  const Index out_rows = static_cast<Index>(p);
#pragma omp parallel for schedule(static) if (worth_forking(m * p * n))
  for (Index ii = 0; ii < out_rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * n;
    for (std::size_t r = 0; r < m; ++r) {
      const double av = a[r * p + i];
      const double* grow = g.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t p, In g, In b, Out c) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static) if (worth_forking(m * p * n))
  for (Index ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* grow = g.data() + i * n;
    for (std::size_t t = 0; t < p; ++t) {
      const double* brow = b.data() + t * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * p + t] += acc;
    }
  }
}

void softmax_rows(std::size_t rows, std::size_t cols, In x, Out y) {
  const Index nrows = static_cast<Index>(rows);
#pragma omp parallel for schedule(static) if (worth_forking(rows * cols * 8))
  for (Index rr = 0; rr < nrows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j) yr[j] /= sum;
  }
}

void layer_norm_rows(std::size_t rows, std::size_t cols, In x, In gamma, In beta, double eps,
                     Out y, Out mean, Out rstd) {
  const Index nrows = static_cast<Index>(rows);
#pragma omp parallel for schedule(static) if (worth_forking(rows * cols * 4))
  for (Index rr = 0; rr < nrows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const double* xr = x.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(cols);
    const double s = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = s;
    double* yr = y.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * s * gamma[j] + beta[j];
  }
}

void gelu(In x, Out y) {
  const Index n = static_cast<Index>(x.size());
#pragma omp parallel for schedule(static) if (worth_forking(x.size() * 16))
  for (Index ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  }
}

void gelu_backward(In x, In dy, Out dx) {
  const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  const Index n = static_cast<Index>(x.size());
#pragma omp parallel for schedule(static) if (worth_forking(x.size() * 16))
  for (Index ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

}  // namespace parallel
}  // namespace mole::kernels
