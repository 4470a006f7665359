#pragma once

#include "hapolab/gating.hpp"

namespace hapolab {

// Teacher-trajectory loss shaping: f(p) = p / (p + beta_shape), optionally
// scaled by (1 - confidence). f saturates as p -> 1, so pressure on already
// mastered tokens vanishes instead of growing like a log-likelihood term.
struct ShapingConfig {
  double beta_shape = 0.1;
  bool confidence_anneal = true;
  void validate() const;
};

// Batch decomposition recorded per step.
struct BatchStats {
  long total_tokens = 0;
  long teacher_tokens = 0;
  int teacher_trajectories = 0;
  double teacher_token_share = 0.0;
  double mean_abs_advantage = 0.0;
  // Normalized contributions; they sum to the batch objective.
  double surrogate_objective = 0.0;
  double teacher_objective = 0.0;
};

// Shaped teacher objective for one injected trajectory, summed over tokens:
//   w(c) * sum_t f(p_t),  w(c) = (1-c) when annealing else 1.
// Gradient accumulates into grad; returns the objective sum (unnormalized).
// Throws InputError for non-teacher trajectories.
double teacher_loss(const PolicyParams& params, const Trajectory& teacher,
                    double confidence, const ShapingConfig& shaping,
                    GradTable& grad);

// Knobs shared with the static-mixture baseline, which reuses this batch
// evaluator with the gate forced open. The defaults are the HAPO objective.
struct MixOptions {
  double teacher_weight = 1.0;   // lambda on the teacher term
  bool shaped_teacher = true;    // false -> plain log-likelihood token loss
  bool count_teacher_tokens = true;  // include teacher tokens in the denominator
};

// Full batch objective: per trajectory, teacher branch or clipped-surrogate
// branch, summed and divided once by the batch token count. Groups are
// processed in vector order (callers keep them sorted by group id), so the
// reduction is bit-reproducible. Requires gated + advantaged groups.
Objective hapo_batch_objective(const PolicyParams& params,
                               const std::vector<Group>& groups,
                               const ShapingConfig& shaping, double eps_clip,
                               BatchStats* stats = nullptr,
                               const MixOptions& mix = {});

}  // namespace hapolab
