#include "gradcheck_ext.hpp"

#include "hatstory/pipeline.hpp"

namespace hatstory {

std::vector<ModuleCheckSummary> gradcheck_suite_standard(std::uint64_t seed, double step, double tol) {
  std::vector<ModuleCheckSummary> out;
  for (const auto& m : gradcheck_suite(seed, step, tol)) {
    out.push_back({m.module, m.report.max_rel_err, m.report.coordinates, m.report.pass});
  }
  return out;
}

}  // namespace hatstory
