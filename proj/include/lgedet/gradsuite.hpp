#pragma once

#include <string>
#include <vector>

namespace lgedet {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return max_rel_error < tolerance; }
};

// 64-bit numeric gradient checks for every differentiable building block and
// the composed variant-G enhancement. Deterministic and self-contained.
std::vector<GradCheckCase> run_gradient_suite();

}  // namespace lgedet
