#include "hapolab/grpo.hpp"

#include <cmath>

namespace hapolab {

void Group::recount_successes() {
  int s = 0;
  for (const auto& t : trajectories) s += t.reward;
  success_count = s;
}

Group rollout_group(const PolicyParams& params, const TaskSpec& task,
                    PromptId prompt, int n, Rng& rng, double temperature) {
  if (n < 2) throw InputError("rollout_group: group size must be >= 2");
  Group group;
  group.prompt = prompt;
  group.trajectories.reserve(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    group.trajectories.push_back(
        sample_trajectory(params, task, prompt, rng, temperature));
  }
  group.recount_successes();
  return group;
}

void compute_advantages(Group& group, const AdvantageOptions& opts) {
  const int n = group.n();
  if (n == 0) throw StateError("compute_advantages: empty group");
  double mean = 0.0;
  for (const auto& t : group.trajectories) mean += t.reward;
  mean /= n;
  double var = 0.0;
  for (const auto& t : group.trajectories) {
    const double d = t.reward - mean;
    var += d * d;
  }
  var /= (opts.sample_std && n > 1) ? (n - 1) : n;
  const double sd = std::sqrt(var);

  group.advantages.assign(static_cast<size_t>(n), 0.0);
  if (sd < opts.eps_std) return;  // degenerate group: all-zero advantages
  for (int j = 0; j < n; ++j) {
    group.advantages[static_cast<size_t>(j)] =
        (group.trajectories[static_cast<size_t>(j)].reward - mean) / sd;
  }
}

double clip_surrogate_trajectory(const PolicyParams& params,
                                 const Trajectory& traj, double advantage,
                                 double eps_clip, GradTable& grad) {
  if (traj.is_teacher) {
    throw InputError("clip_surrogate: teacher trajectories take the other branch");
  }
  if (traj.tokens.size() != traj.behavior_logps.size()) {
    throw InputError("clip_surrogate: tokens/behavior_logps length mismatch");
  }
  double obj = 0.0;
  for (int t = 0; t < static_cast<int>(traj.tokens.size()); ++t) {
    const ContextKey ctx =
        context_at(traj.prompt, traj.tokens, t, params.context_order);
    const Token a = traj.tokens[static_cast<size_t>(t)];
    const double lp_new = logp(params, ctx, a);
    const double ratio =
        std::exp(lp_new - traj.behavior_logps[static_cast<size_t>(t)]);
    const double clipped =
        std::min(std::max(ratio, 1.0 - eps_clip), 1.0 + eps_clip);
    const double unclipped_term = ratio * advantage;
    const double clipped_term = clipped * advantage;
    obj += std::min(unclipped_term, clipped_term);
    // d(r*A)/dtheta = A * r * dlogp; zero when the clipped branch is the
    // strict minimum (clip active and binding).
    if (unclipped_term <= clipped_term) {
      add_grad_logp(grad, params, ctx, a, advantage * ratio);
    }
  }
  return obj;
}

double clip_surrogate(const PolicyParams& params, const Group& group,
                      double eps_clip, GradTable& grad) {
  if (!group.has_advantages()) {
    throw StateError("clip_surrogate: advantages not computed");
  }
  double obj = 0.0;
  for (int j = 0; j < group.n(); ++j) {
    const Trajectory& traj = group.trajectories[static_cast<size_t>(j)];
    if (traj.is_teacher) continue;
    obj += clip_surrogate_trajectory(params, traj,
                                     group.advantages[static_cast<size_t>(j)],
                                     eps_clip, grad);
  }
  return obj;
}

Objective grpo_batch_objective(const PolicyParams& params,
                               const std::vector<Group>& groups,
                               double eps_clip) {
  if (groups.empty()) throw InputError("grpo_batch_objective: empty batch");
  Objective out;
  out.grad.vocab_size = params.vocab_size;
  long total_tokens = 0;
  for (const Group& group : groups) {
    out.value += clip_surrogate(params, group, eps_clip, out.grad);
    for (const auto& traj : group.trajectories) {
      total_tokens += static_cast<long>(traj.tokens.size());
    }
  }
  if (total_tokens == 0) throw StateError("grpo_batch_objective: no tokens");
  const double inv = 1.0 / static_cast<double>(total_tokens);
  out.value *= inv;
  out.grad.scale(inv);
  return out;
}

}  // namespace hapolab
