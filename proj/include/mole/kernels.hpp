#pragma once

#include <cstddef>
#include <span>

// Row-major dense kernels. Every kernel exists twice: a plain serial loop nest
// kept as the reference, and an OpenMP version that partitions independent
// output rows across threads. Both accumulate each output element in the same
// order, so their results are bitwise identical for any thread count.
namespace mole::kernels {

using In = std::span<const double>;
using Out = std::span<double>;

#define MOLE_KERNEL_DECLS                                                                 \
  /* C[m x n] (+)= A[m x p] * B[p x n] */                                                 \
  void gemm_nn(std::size_t m, std::size_t p, std::size_t n, In a, In b, Out c,            \
               bool accumulate);                                                          \
  /* C[p x n] += A[m x p]^T * G[m x n] */                                                 \
  void gemm_tn(std::size_t m, std::size_t p, std::size_t n, In a, In g, Out c);           \
  /* C[m x p] += G[m x n] * B[p x n]^T */                                                 \
  void gemm_nt(std::size_t m, std::size_t n, std::size_t p, In g, In b, Out c);           \
  void softmax_rows(std::size_t rows, std::size_t cols, In x, Out y);                     \
  /* Writes normalized output plus per-row mean and reciprocal stddev. */                 \
  void layer_norm_rows(std::size_t rows, std::size_t cols, In x, In gamma, In beta,       \
                       double eps, Out y, Out mean, Out rstd);                            \
  void gelu(In x, Out y);                                                                 \
  /* dx = dy * gelu'(x) */                                                                \
  void gelu_backward(In x, In dy, Out dx);

namespace serial {
MOLE_KERNEL_DECLS
}  // namespace serial

namespace parallel {
MOLE_KERNEL_DECLS
}  // namespace parallel

#undef MOLE_KERNEL_DECLS

// The defaults used by the rest of the library.
using parallel::gelu;
using parallel::gelu_backward;
using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;
using parallel::layer_norm_rows;
using parallel::softmax_rows;

// Minimum multiply-adds before the OpenMP kernels fork a team.
inline constexpr std::size_t kParallelWorkThreshold = 1 << 15;

int max_threads();

}  // namespace mole::kernels
