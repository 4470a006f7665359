#include "hapolab/baselines.hpp"

#include <cmath>

namespace hapolab {

Method method_from_string(const std::string& name) {
  if (name == "sft") return Method::kSft;
  if (name == "grpo") return Method::kGrpo;
  if (name == "sft_then_rl") return Method::kSftThenRl;
  if (name == "static_mix") return Method::kStaticMix;
  if (name == "hapo") return Method::kHapo;
  throw ConfigError("unknown method '" + name + "'");
}

std::string method_to_string(Method m) {
  switch (m) {
    case Method::kSft: return "sft";
    case Method::kGrpo: return "grpo";
    case Method::kSftThenRl: return "sft_then_rl";
    case Method::kStaticMix: return "static_mix";
    case Method::kHapo: return "hapo";
  }
  throw StateError("method_to_string: unreachable");
}

void BaselineConfig::validate() const {
  if (switch_step < 0) {
    throw ConfigError("method: switch_step must be >= 0");
  }
  if (lambda_mix < 0.0) {
    throw ConfigError("method: lambda_mix must be >= 0");
  }
}

Objective sft_objective(const PolicyParams& params,
                        const std::vector<Trajectory>& demos) {
  if (demos.empty()) throw InputError("sft_objective: no demonstrations");
  Objective out;
  out.grad.vocab_size = params.vocab_size;
  long total_tokens = 0;
  for (const Trajectory& demo : demos) {
    for (int t = 0; t < static_cast<int>(demo.tokens.size()); ++t) {
      const ContextKey ctx =
          context_at(demo.prompt, demo.tokens, t, params.context_order);
      const Token a = demo.tokens[static_cast<size_t>(t)];
      out.value += logp(params, ctx, a);
      add_grad_logp(out.grad, params, ctx, a, 1.0);
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw InputError("sft_objective: empty demonstrations");
  const double inv = 1.0 / static_cast<double>(total_tokens);
  out.value *= inv;
  out.grad.scale(inv);
  return out;
}

Objective static_mix_objective(const PolicyParams& params,
                               std::vector<Group>& groups,
                               const TaskSpec& task,
                               const BaselineConfig& config,
                               const ShapingConfig& shaping, double eps_clip,
                               const AdvantageOptions& adv_opts,
                               BatchStats* stats,
                               std::vector<GateDecision>* decisions,
                               GateOptions::TieBreak tie_break) {
  config.validate();
  // Gate held open for every group: record the confidence the shaping term
  // uses, inject unconditionally, then score the fixed mixture.
  for (size_t i = 0; i < groups.size(); ++i) {
    Group& group = groups[i];
    const int pre_successes = group.success_count;
    group.confidence = confidence_score(pre_successes, group.n());
    ssi_transform(group, teacher_demo(task, group.prompt), tie_break);
    if (decisions) {
      GateDecision d;
      d.group_index = static_cast<int>(i);
      d.prompt = group.prompt;
      d.successes = pre_successes;
      d.confidence = group.confidence;
      d.threshold = 1.0;  // unconditional
      d.opened = true;
      d.replaced_index = group.replaced_index;
      decisions->push_back(d);
    }
  }
  for (Group& group : groups) compute_advantages(group, adv_opts);

  MixOptions mix;
  mix.teacher_weight = config.lambda_mix;
  mix.shaped_teacher = config.use_shaping;
  return hapo_batch_objective(params, groups, shaping, eps_clip, stats, mix);
}

}  // namespace hapolab
