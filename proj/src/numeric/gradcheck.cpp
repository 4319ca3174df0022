#include "keds/numeric/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "keds/error.hpp"

namespace keds::numeric {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

GradcheckResult gradcheck(const ScalarFn& fn, std::vector<TensorD> inputs, double step,
                          double tolerance) {
  for (auto& in : inputs) {
    if (!in.is_leaf()) throw GraphError("gradcheck inputs must be leaves");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  GradcheckResult result;
  auto root = fn(inputs);
  root.backward();
  ++result.evaluations;

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& in = inputs[i];
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<double> numeric(in.numel());
    auto vals = in.mutable_values();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double saved = vals[e];
      vals[e] = saved + step;
      const double up = fn(inputs).item();
      vals[e] = saved - step;
      const double down = fn(inputs).item();
      vals[e] = saved;
      numeric[e] = (up - down) / (2.0 * step);
      result.evaluations += 2;
    }
    const double err = relative_error(analytic, numeric);
    if (err > result.max_rel_error || i == 0) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      if (err >= result.max_rel_error) result.worst_input = i;
    }
  }
  result.passed = result.max_rel_error < tolerance;
  return result;
}

}  // namespace keds::numeric
