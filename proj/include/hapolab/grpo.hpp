#pragma once

#include <cmath>
#include <optional>

#include "hapolab/policy.hpp"

namespace hapolab {

// The N trajectories rolled out for one prompt under a frozen policy, plus
// the per-group bookkeeping the gate and the objective need.
struct Group {
  PromptId prompt = 0;
  std::vector<Trajectory> trajectories;
  // Empty until compute_advantages runs.
  std::vector<double> advantages;
  // S = number of reward-1 members; kept in sync with trajectories.
  int success_count = 0;
  // Beta-posterior mean recorded at gating time; NaN until gated.
  double confidence = std::numeric_limits<double>::quiet_NaN();
  bool injected = false;
  // Original member displaced by an injection, kept so probes can rebuild
  // the pure on-policy batch.
  std::optional<Trajectory> replaced_original;
  int replaced_index = -1;

  int n() const { return static_cast<int>(trajectories.size()); }
  void recount_successes();
  bool has_advantages() const { return !advantages.empty(); }
};

struct AdvantageOptions {
  // Population (biased) std by default; sample std available because the
  // normalization convention is a recorded, configurable choice.
  bool sample_std = false;
  double eps_std = 1e-8;
};

// N independent rollouts for one prompt. injected=false, advantages unset.
Group rollout_group(const PolicyParams& params, const TaskSpec& task,
                    PromptId prompt, int n, Rng& rng,
                    double temperature = 1.0);

// Group-relative advantages: A_j = (R_j - mean) / popstd. Groups whose
// reward spread is below eps_std get all-zero advantages, which is what
// makes the all-fail cold-start produce exactly zero gradient.
void compute_advantages(Group& group, const AdvantageOptions& opts = {});

struct Objective {
  double value = 0.0;
  GradTable grad;
};

// Clipped surrogate for one on-policy trajectory, summed over tokens:
//   min(r_t * A, clip(r_t, 1-eps, 1+eps) * A),  r_t = exp(logp - logp_old).
// Gradient follows the standard rule: zero wherever the clipped branch is
// active and binding. Accumulates into grad, returns the objective sum.
double clip_surrogate_trajectory(const PolicyParams& params,
                                 const Trajectory& traj, double advantage,
                                 double eps_clip, GradTable& grad);

// Sum over the group's non-teacher members. Requires advantages.
double clip_surrogate(const PolicyParams& params, const Group& group,
                      double eps_clip, GradTable& grad);

// Batch objective: sum of per-group surrogates divided once by the total
// token count across the batch (the normalization lives here, not per
// group). Groups must have advantages.
Objective grpo_batch_objective(const PolicyParams& params,
                               const std::vector<Group>& groups,
                               double eps_clip);

}  // namespace hapolab
