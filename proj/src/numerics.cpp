#include "mole/numerics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

#include "mole/kernels.hpp"

namespace mole {

namespace {
Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0) throw ShapeError("matmul on a scalar");
  if (b.rank() == 2) {
    const std::size_t p = b.dim(0), n = b.dim(1);
    if (a.cols() != p) {
      throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    Tensor out(with_last(a.shape(), n));
    kernels::gemm_nn(a.rows(), p, n, a.data(), b.data(), out.data(), false);
    return out;
  }
  if (b.rank() == 3 && a.rank() == 3) {
    const std::size_t batch = a.dim(0), m = a.dim(1), p = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != p) {
      throw ShapeError("batched matmul dimension mismatch: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    Tensor out({batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
      kernels::gemm_nn(m, p, n, a.data().subspan(i * m * p, m * p),
                       b.data().subspan(i * p * n, p * n), out.data().subspan(i * m * n, m * n),
                       false);
    }
    return out;
  }
  throw ShapeError("matmul unsupported ranks: " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax on a scalar");
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw ShapeError("softmax axis out of range for " + shape_str(x.shape()));
  if (ax == rank - 1) {
    Tensor out(x.shape());
    kernels::softmax_rows(x.rows(), x.cols(), x.data(), out.data());
    return out;
  }
  // Strided axis: gather each fibre, normalise, scatter back.
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  const std::size_t len = x.shape()[static_cast<std::size_t>(ax)];
  Tensor out(x.shape());
  std::vector<double> fibre(len), res(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      for (std::size_t t = 0; t < len; ++t) fibre[t] = x[(o * len + t) * inner + in];
      kernels::softmax_rows(1, len, fibre, res);
      for (std::size_t t = 0; t < len; ++t) out[(o * len + t) * inner + in] = res[t];
    }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("layer_norm needs D >= 1");
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm affine shape mismatch: x " + shape_str(x.shape()) + ", gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> mean(x.rows()), rstd(x.rows());
  kernels::layer_norm_rows(x.rows(), d, x.data(), gamma.data(), beta.data(), eps, out.data(), mean,
                           rstd);
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const bool batched = q.rank() == 3;
  const Tensor q3 = batched ? q : q.reshaped({1, q.dim(0), q.dim(1)});
  const Tensor k3 = batched ? k : k.reshaped({1, k.dim(0), k.dim(1)});
  const Tensor v3 = batched ? v : v.reshaped({1, v.dim(0), v.dim(1)});
  if (k3.rank() != 3 || v3.rank() != 3) throw ShapeError("attention rank mismatch");
  const std::size_t batch = q3.dim(0), nq = q3.dim(1), d = q3.dim(2), nk = k3.dim(1),
                    dv = v3.dim(2);
  if (nk == 0) throw ShapeError("attention with no keys");
  if (k3.dim(0) != batch || v3.dim(0) != batch || k3.dim(2) != d || v3.dim(1) != nk) {
    throw ShapeError("attention shape mismatch: Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({batch, nq, dv});
  std::vector<double> scores(nq * nk), probs(nq * nk);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(scores.begin(), scores.end(), 0.0);
    kernels::gemm_nt(nq, d, nk, q3.data().subspan(b * nq * d, nq * d),
                     k3.data().subspan(b * nk * d, nk * d), scores);
    for (auto& s : scores) s *= scale;
    kernels::softmax_rows(nq, nk, scores, probs);
    kernels::gemm_nn(nq, nk, dv, probs, v3.data().subspan(b * nk * dv, nk * dv),
                     out.data().subspan(b * nq * dv, nq * dv), false);
  }
  return batched ? out : out.reshaped({nq, dv});
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor scaled(const Tensor& a, double factor) {
  Tensor out = a;
  for (auto& v : out.data()) v *= factor;
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

std::vector<double> singular_values(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("singular_values expects a matrix");
  Eigen::MatrixXd mat(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j)
      mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m.at(i, j);
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(mat).singularValues();
  return {sv.data(), sv.data() + sv.size()};
}

std::size_t numerical_rank(const Tensor& m, double threshold) {
  const auto sv = singular_values(m);
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s > threshold; }));
}

}  // namespace mole
