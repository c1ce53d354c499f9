#include "sgat/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sgat/autograd.hpp"

namespace sgat {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

FiniteDiffReport compare(const Tensor& analytic, const std::function<double()>& eval, Tensor var,
                         double h) {
  FiniteDiffReport report;
  auto values = var.mutable_data<double>();
  const auto a = analytic.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = eval();
    values[i] = saved - h;
    const double down = eval();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = relative_error(a[i], numeric);
    report.max_abs_error = std::max(report.max_abs_error, std::abs(a[i] - numeric));
    if (rel > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = std::max(rel, report.max_rel_error);
      report.worst_index = static_cast<std::int64_t>(i);
      report.worst_analytic = a[i];
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace

FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& x, double h) {
  if (x.dtype() != DType::F64) {
    throw ContractError("finite_diff_check requires 64-bit tensors");
  }
  Tensor var = x.clone();
  var.set_requires_grad(true);
  Tensor analytic = grad(fn(var), std::span<const Tensor>(&var, 1))[0].detach();
  // Evaluated with recording on: fn may itself take gradients.
  return compare(analytic, [&] { return fn(var).item(); }, var, h);
}

FiniteDiffReport finite_diff_check_variable(const std::function<Tensor()>& loss, Tensor variable,
                                            double h) {
  if (variable.dtype() != DType::F64) {
    throw ContractError("finite_diff_check requires 64-bit tensors");
  }
  if (!variable.requires_grad()) {
    throw ContractError("finite_diff_check_variable: variable does not require grad");
  }
  Tensor analytic = grad(loss(), std::span<const Tensor>(&variable, 1))[0].detach();
  return compare(analytic, [&] { return loss().item(); }, variable, h);
}

}  // namespace sgat
