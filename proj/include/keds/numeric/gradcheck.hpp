#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "keds/numeric/tensor.hpp"

namespace keds::numeric {

struct GradcheckResult {
  /// max over inputs of ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t evaluations = 0;
  bool passed = false;
};

using ScalarFn = std::function<TensorD(std::span<const TensorD>)>;

/// Compares reverse-mode gradients of `fn` against central finite differences
/// for every element of every input. Inputs must be leaves; they are
/// perturbed in place and restored.
GradcheckResult gradcheck(const ScalarFn& fn, std::vector<TensorD> inputs, double step = 1e-5,
                          double tolerance = 1e-4);

/// Relative error between two gradient vectors as used by gradcheck.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

}  // namespace keds::numeric
