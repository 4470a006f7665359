#pragma once

#include <functional>

#include "hapolab/trainer.hpp"

namespace hapolab {

// Central finite differences of a scalar function of the policy table over
// an explicit list of contexts (every entry that could carry gradient).
GradTable finite_difference(
    const std::function<double(const PolicyParams&)>& f, PolicyParams params,
    const std::vector<ContextKey>& contexts, double h);

struct GradCheckCase {
  std::string what;
  double rel_err = 0.0;
};

struct GradCheckReport {
  int instances = 0;
  double fd_step = 1e-5;
  double tolerance = 1e-5;
  double max_rel_err = 0.0;
  GradCheckCase worst;
  std::vector<GradCheckCase> cases;
  bool pass = false;
  std::string to_text() const;
};

// Finite-difference audit of the analytic gradients: token log-probability,
// imitation objective, shaped teacher loss, and the full batch objective
// evaluated at the rollout point (where the surrogate is differentiable;
// clip kinks sit at ratio 1 +- eps, far from ratio 1). Randomized small
// instances; the error metric per case is
// ||analytic - fd||_inf / max(1, ||analytic||_inf).
GradCheckReport run_gradcheck(int instances, uint64_t seed, double fd_step,
                              double tolerance);

}  // namespace hapolab
