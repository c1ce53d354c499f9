#pragma once

#include <cstdint>
#include <functional>

#include "sgat/tensor.hpp"

namespace sgat {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Gradient magnitudes below this are compared in absolute terms.
inline constexpr double kGradientFloor = 1e-4;

double relative_error(double analytic, double numeric, double floor = kGradientFloor);

/// Compares the reverse-mode gradient of a scalar function at x against
/// central differences (f(x + h e_i) - f(x - h e_i)) / 2h. Requires F64.
FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& x, double h = 1e-5);

/// Same check for a variable captured by the loss closure (e.g. a model
/// parameter). The variable's storage is perturbed in place and restored.
FiniteDiffReport finite_diff_check_variable(const std::function<Tensor()>& loss, Tensor variable,
                                            double h = 1e-5);

}  // namespace sgat
