#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hatstory {

struct ModuleCheckSummary {
  std::string module;
  double max_rel_err = 0.0;
  std::size_t coordinates = 0;
  bool pass = false;
};

/// gradcheck_suite instantiated with long double tensors. Finite differences
/// at step 1e-5 on a loss near 20 carry about ulp(20)/2e-5 ~ 2e-10 of rounding
/// noise in double, which swamps the 1e-4 relative tolerance on coordinates
/// whose gradient is below ~1e-6 (selector recurrent weights on the toy album).
std::vector<ModuleCheckSummary> gradcheck_suite_extended(std::uint64_t seed, double step, double tol);

/// The same suite in the default (double) build, for side-by-side reporting.
std::vector<ModuleCheckSummary> gradcheck_suite_standard(std::uint64_t seed, double step, double tol);

}  // namespace hatstory
