#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "mole/autodiff.hpp"
#include "mole/param_store.hpp"

namespace mole {

struct GradCheckOptions {
  double eps = 1e-5;  // central-difference step, must lie in [1e-6, 1e-3]
  double tol = 1e-4;  // pass threshold on the max relative error
  // Denominator floor so that coordinates with a (near) zero gradient are
  // compared absolutely.
  double abs_floor = 1e-6;
  // Coordinates checked per parameter; 0 means all.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  // Largest |gradient| reported for any frozen parameter; must be exactly 0.
  double frozen_grad_max = 0.0;
  bool passed = false;
};

// Builds a scalar loss on the given tape from parameters in `store`.
using LossFn = std::function<Var(Tape&, ParamStore&)>;

// Compares reverse-mode gradients with central finite differences. Leaves the
// store's values untouched and its gradients holding the analytic result.
GradCheckReport grad_check(const LossFn& f, ParamStore& store, const GradCheckOptions& opts = {});

}  // namespace mole
