#pragma once

#include "hapolab/hapo.hpp"

namespace hapolab {

enum class Method { kSft, kGrpo, kSftThenRl, kStaticMix, kHapo };

Method method_from_string(const std::string& name);
std::string method_to_string(Method m);

struct BaselineConfig {
  Method method = Method::kHapo;
  // sft_then_rl: step index at which the objective switches to RL.
  long switch_step = 0;
  // static_mix: shaped teacher loss (true) or plain token log-likelihood.
  bool use_shaping = true;
  // static_mix: weight on the teacher term in the fixed mixture.
  double lambda_mix = 1.0;
  void validate() const;
};

// Mean per-token log-likelihood of the demonstrations, with its analytic
// gradient. The imitation-only baseline objective.
Objective sft_objective(const PolicyParams& params,
                        const std::vector<Trajectory>& demos);

// Static mixed-policy step: unconditionally inject the teacher into every
// group (no gate), then evaluate surrogate + lambda * teacher term. The
// always-open one-flag diff against the gated objective.
Objective static_mix_objective(
    const PolicyParams& params, std::vector<Group>& groups,
    const TaskSpec& task, const BaselineConfig& config,
    const ShapingConfig& shaping, double eps_clip,
    const AdvantageOptions& adv_opts, BatchStats* stats = nullptr,
    std::vector<GateDecision>* decisions = nullptr,
    GateOptions::TieBreak tie_break = GateOptions::TieBreak::kLowestIndex);

}  // namespace hapolab
