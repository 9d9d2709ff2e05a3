#pragma once

#include <cstddef>
#include <vector>

#include "mole/tensor.hpp"

// Value-level tensor math. The differentiable counterparts live in autodiff.hpp
// and share these forward paths.
namespace mole {

// a[..., p] x b[p, n] -> [..., n]; if b is rank 3 the product is batched over
// the leading axis: a[B, m, p] x b[B, p, n] -> [B, m, n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Numerically stable softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// softmax(Q K^T / sqrt(D)) V, single head; rank-3 inputs are batched.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double factor);
double dot(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

// Singular values, descending.
std::vector<double> singular_values(const Tensor& m);
std::size_t numerical_rank(const Tensor& m, double threshold);

}  // namespace mole
