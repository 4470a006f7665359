#include "hapolab/hapo.hpp"

#include <cmath>

namespace hapolab {

void ShapingConfig::validate() const {
  if (beta_shape <= 0.0) {
    throw ConfigError("shaping: beta_shape must be positive");
  }
}

double teacher_loss(const PolicyParams& params, const Trajectory& teacher,
                    double confidence, const ShapingConfig& shaping,
                    GradTable& grad) {
  if (!teacher.is_teacher) {
    throw InputError("teacher_loss: trajectory is not a teacher sample");
  }
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw InputError("teacher_loss: confidence outside [0,1]");
  }
  const double beta = shaping.beta_shape;
  const double w = shaping.confidence_anneal ? (1.0 - confidence) : 1.0;
  double obj = 0.0;
  for (int t = 0; t < static_cast<int>(teacher.tokens.size()); ++t) {
    const ContextKey ctx =
        context_at(teacher.prompt, teacher.tokens, t, params.context_order);
    const Token a = teacher.tokens[static_cast<size_t>(t)];
    const double p = std::exp(logp(params, ctx, a));
    obj += w * p / (p + beta);
    // d f(p)/d logits = beta/(p+beta)^2 * dp,  dp = p * dlogp.
    const double df = beta / ((p + beta) * (p + beta));
    add_grad_logp(grad, params, ctx, a, w * df * p);
  }
  return obj;
}

namespace {

// Plain token log-likelihood branch for the unshaped static mixture.
double plain_teacher_loglik(const PolicyParams& params,
                            const Trajectory& teacher, GradTable& grad) {
  double obj = 0.0;
  for (int t = 0; t < static_cast<int>(teacher.tokens.size()); ++t) {
    const ContextKey ctx =
        context_at(teacher.prompt, teacher.tokens, t, params.context_order);
    const Token a = teacher.tokens[static_cast<size_t>(t)];
    obj += logp(params, ctx, a);
    add_grad_logp(grad, params, ctx, a, 1.0);
  }
  return obj;
}

}  // namespace

Objective hapo_batch_objective(const PolicyParams& params,
                               const std::vector<Group>& groups,
                               const ShapingConfig& shaping, double eps_clip,
                               BatchStats* stats, const MixOptions& mix) {
  if (groups.empty()) throw InputError("hapo_batch_objective: empty batch");
  shaping.validate();

  Objective out;
  out.grad.vocab_size = params.vocab_size;

  double surrogate_sum = 0.0;
  double teacher_sum = 0.0;
  long total_tokens = 0;
  long teacher_tokens = 0;
  int teacher_trajs = 0;
  double abs_adv_sum = 0.0;
  long n_trajs = 0;

  for (const Group& group : groups) {
    if (!group.has_advantages()) {
      throw StateError("hapolab: batch objective on group without advantages");
    }
    // Per-group accumulation first, batch accumulation second, so the
    // surrogate reduction is the same float sequence the pure on-policy
    // batch objective performs.
    double group_surrogate = 0.0;
    for (int j = 0; j < group.n(); ++j) {
      const Trajectory& traj = group.trajectories[static_cast<size_t>(j)];
      const long len = static_cast<long>(traj.tokens.size());
      ++n_trajs;
      abs_adv_sum += std::abs(group.advantages[static_cast<size_t>(j)]);
      if (traj.is_teacher) {
        if (!(group.confidence >= 0.0 && group.confidence <= 1.0)) {
          throw StateError(
              "hapolab: injected group carries no gating confidence");
        }
        teacher_tokens += len;
        ++teacher_trajs;
        if (mix.count_teacher_tokens) total_tokens += len;
        if (mix.teacher_weight != 0.0) {
          GradTable tg;
          tg.vocab_size = params.vocab_size;
          const double val =
              mix.shaped_teacher
                  ? teacher_loss(params, traj, group.confidence, shaping, tg)
                  : plain_teacher_loglik(params, traj, tg);
          teacher_sum += mix.teacher_weight * val;
          out.grad.axpy(mix.teacher_weight, tg);
        }
      } else {
        total_tokens += len;
        group_surrogate += clip_surrogate_trajectory(
            params, traj, group.advantages[static_cast<size_t>(j)], eps_clip,
            out.grad);
      }
    }
    surrogate_sum += group_surrogate;
  }
  if (total_tokens == 0) {
    throw StateError("hapolab: batch objective over zero counted tokens");
  }

  const double inv = 1.0 / static_cast<double>(total_tokens);
  out.value = (surrogate_sum + teacher_sum) * inv;
  out.grad.scale(inv);

  if (stats) {
    stats->total_tokens = total_tokens;
    stats->teacher_tokens = teacher_tokens;
    stats->teacher_trajectories = teacher_trajs;
    stats->teacher_token_share =
        static_cast<double>(teacher_tokens) / static_cast<double>(total_tokens);
    stats->mean_abs_advantage =
        n_trajs > 0 ? abs_adv_sum / static_cast<double>(n_trajs) : 0.0;
    stats->surrogate_objective = surrogate_sum * inv;
    stats->teacher_objective = teacher_sum * inv;
  }
  return out;
}

}  // namespace hapolab
