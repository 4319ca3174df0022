#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace keds::cli {

struct GradientCase {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string detail;
};

struct GradientReport {
  std::vector<GradientCase> cases;
  double seconds = 0.0;
  bool passed() const;
};

/// Central finite-difference checks in double precision for every
/// differentiable op, the composer, the projection network and both losses.
/// Key biases of attention are checked for an exactly vanishing gradient
/// instead of a relative error.
GradientReport run_gradient_suite(std::size_t seeds = 10, double tolerance = 1e-4);

std::string format_report(const GradientReport& report);

}  // namespace keds::cli
