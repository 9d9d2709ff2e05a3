#include "mole/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mole {

namespace {
double evaluate(const LossFn& f, ParamStore& store) {
  Tape tape;
  const double v = f(tape, store).value().item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: loss is not finite");
  return v;
}
}  // namespace

GradCheckReport grad_check(const LossFn& f, ParamStore& store, const GradCheckOptions& opts) {
  if (opts.eps < 1e-6 || opts.eps > 1e-3) throw std::invalid_argument("grad_check eps outside [1e-6, 1e-3]");
  store.zero_grad();
  {
    Tape tape;
    Var loss = f(tape, store);
    if (!std::isfinite(loss.value().item())) throw std::domain_error("grad_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& [id, p] : store) {
    if (p.frozen) {
      for (double g : p.grad.data()) report.frozen_grad_max = std::max(report.frozen_grad_max, std::abs(g));
      continue;
    }
    const std::size_t n = p.value.size();
    const std::size_t count =
        opts.max_coords_per_param == 0 ? n : std::min(n, opts.max_coords_per_param);
    // Spread sampled coordinates evenly through the tensor.
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : (c * n) / count;
      const double saved = p.value[i];
      p.value[i] = saved + opts.eps;
      const double up = evaluate(f, store);
      p.value[i] = saved - opts.eps;
      const double down = evaluate(f, store);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = p.grad[i];
      const double abs_err = std::abs(numeric - analytic);
      const double rel_err =
          abs_err / std::max({std::abs(numeric), std::abs(analytic), opts.abs_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel_err > report.max_rel_error || report.coords_checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel_err);
        report.worst_param = id;
        report.worst_index = i;
      }
      ++report.coords_checked;
    }
  }
  report.passed = report.max_rel_error < opts.tol && report.frozen_grad_max == 0.0;
  return report;
}

}  // namespace mole
