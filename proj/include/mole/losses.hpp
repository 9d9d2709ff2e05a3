#pragma once

#include <span>
#include <vector>

#include "mole/autodiff.hpp"
#include "mole/routing.hpp"

namespace mole {

// f: share of (row, slot) assignments per expert. p: mean routing probability
// per expert over routing rows. Both sum to one.
struct UsageStats {
  Tensor f;
  Tensor p;
};

UsageStats usage_stats(const RoutingDecision& decision);

// N * sum_i f_i p_i
double aux_loss(const UsageStats& stats, std::size_t n_experts);
// Differentiable through the probabilities only; f is a hard count.
Var aux_loss(Var probs, const RoutingDecision& decision);

inline constexpr double kCosineEps = 1e-12;

// Mean squared cosine similarity over ordered pairs of flattened outputs,
// evaluated through the Gram matrix of L2-normalised vectors.
double ortho_loss(std::span<const Tensor> expert_outputs, double eps = kCosineEps);
Var ortho_loss(std::span<const Var> expert_outputs, double eps = kCosineEps);

// Squared-cosine matrix of flattened outputs with unit diagonal. Columns of
// zero-norm outputs are NaN.
Tensor squared_cosine_gram(std::span<const Tensor> expert_outputs, double eps = kCosineEps);
// Mean of the off-diagonal entries, ignoring NaN-flagged columns.
double gram_offdiag_mean(const Tensor& gram);
double gram_offdiag_max(const Tensor& gram);

double task_loss(const Tensor& pred, const Tensor& target);

struct LossReport {
  double total = 0.0;
  double task = 0.0;
  double aux = 0.0;    // averaged over MoLE layers
  double ortho = 0.0;  // averaged over MoLE layers; 0 while skipped
  std::vector<double> aux_per_layer;
  std::vector<double> ortho_per_layer;
};

double total_loss(double task, double aux, double ortho, double lambda_aux, double lambda_ortho);

}  // namespace mole
