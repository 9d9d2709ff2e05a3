#include "mole/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mole/numerics.hpp"

namespace mole {

UsageStats usage_stats(const RoutingDecision& decision) {
  const std::size_t n = decision.n_experts, rows = decision.routing_rows();
  if (rows == 0) throw std::invalid_argument("usage_stats of an empty batch");
  if (decision.full_probs.size() != rows * n) {
    throw std::invalid_argument("usage_stats: decision has no full probabilities");
  }
  UsageStats s{Tensor({n}), Tensor({n})};
  std::size_t assigned = 0;
  for (int e : decision.indices) {
    if (e < 0) continue;
    s.f[static_cast<std::size_t>(e)] += 1.0;
    ++assigned;
  }
  if (assigned == 0) throw std::invalid_argument("usage_stats: no assignments");
  for (auto& v : s.f.data()) v /= static_cast<double>(assigned);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i) s.p[i] += decision.full_probs[r * n + i];
  for (auto& v : s.p.data()) v /= static_cast<double>(rows);
  return s;
}

double aux_loss(const UsageStats& stats, std::size_t n_experts) {
  return static_cast<double>(n_experts) * dot(stats.f, stats.p);
}

Var aux_loss(Var probs, const RoutingDecision& decision) {
  const UsageStats stats = usage_stats(decision);
  return ad::scale(ad::dot_const(ad::mean_rows(probs), stats.f),
                   static_cast<double>(decision.n_experts));
}

namespace {
// Squared cosines g_ij^2 / (g_ii g_jj) from the raw Gram, so identical outputs
// give exactly 1. Zero-norm outputs are clamped by eps.
std::vector<double> squared_cosines(std::span<const Tensor> outputs, double eps,
                                    std::vector<double>* self = nullptr) {
  if (outputs.size() < 2) throw std::invalid_argument("orthogonality needs at least two experts");
  const std::size_t n = outputs.size(), len = outputs.front().size();
  std::vector<Tensor> flat;
  for (const auto& v : outputs) {
    if (v.size() != len) throw ShapeError("expert outputs differ in size");
    flat.push_back(v.reshaped({len}));
  }
  std::vector<double> sq(n * n, 0.0), diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = dot(flat[i], flat[i]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double raw = dot(flat[i], flat[j]);
      sq[i * n + j] = raw * raw / (std::max(diag[i], eps * eps) * std::max(diag[j], eps * eps));
    }
  if (self) *self = std::move(diag);
  return sq;
}
}  // namespace

double ortho_loss(std::span<const Tensor> expert_outputs, double eps) {
  const auto sq = squared_cosines(expert_outputs, eps);
  const std::size_t n = expert_outputs.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) acc += 2.0 * sq[i * n + j];
  return acc / static_cast<double>(n * (n - 1));
}

Var ortho_loss(std::span<const Var> expert_outputs, double eps) {
  return ad::ortho_loss(expert_outputs, eps);
}

Tensor squared_cosine_gram(std::span<const Tensor> expert_outputs, double eps) {
  std::vector<double> self;
  const auto sq = squared_cosines(expert_outputs, eps, &self);
  const std::size_t n = expert_outputs.size();
  Tensor gram({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (std::sqrt(self[i]) <= eps || std::sqrt(self[j]) <= eps) {
        gram.at(i, j) = std::numeric_limits<double>::quiet_NaN();
      } else {
        gram.at(i, j) = i == j ? 1.0 : sq[i * n + j];
      }
    }
  return gram;
}

double gram_offdiag_mean(const Tensor& gram) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gram.dim(0); ++i)
    for (std::size_t j = 0; j < gram.dim(1); ++j)
      if (i != j && !std::isnan(gram.at(i, j))) {
        acc += gram.at(i, j);
        ++count;
      }
  return count ? acc / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

double gram_offdiag_max(const Tensor& gram) {
  double m = 0.0;
  for (std::size_t i = 0; i < gram.dim(0); ++i)
    for (std::size_t j = 0; j < gram.dim(1); ++j)
      if (i != j && !std::isnan(gram.at(i, j))) m = std::max(m, gram.at(i, j));
  return m;
}

double task_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("task_loss shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  if (pred.size() == 0) throw ShapeError("task_loss of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

double total_loss(double task, double aux, double ortho, double lambda_aux, double lambda_ortho) {
  if (lambda_aux < 0.0 || lambda_ortho < 0.0) throw std::invalid_argument("loss weights must be >= 0");
  return task + lambda_aux * aux + lambda_ortho * ortho;
}

}  // namespace mole
