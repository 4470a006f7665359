#pragma once

#include "hapolab/grpo.hpp"

namespace hapolab {

// Gate threshold schedule: constant, step, or sigmoid in the training step.
struct GateConfig {
  enum class Schedule { kConstant, kStep, kSigmoid };
  Schedule schedule = Schedule::kConstant;
  // constant
  double gamma = 0.8;
  // step: gamma0 before switch_step, gamma1 from switch_step on
  double gamma0 = 0.9;
  double gamma1 = 0.5;
  long switch_step = 0;
  // sigmoid: gamma_min + (gamma_max - gamma_min) * sigma((t - midpoint)/slope)
  double gamma_min = 0.1;
  double gamma_max = 0.9;
  double midpoint = 0.0;
  double slope = 1.0;

  static GateConfig constant(double g);
  static GateConfig step(double g0, double g1, long switch_at);
  static GateConfig sigmoid(double gmin, double gmax, double mid, double slp);
  // All gamma values must lie strictly inside (0,1).
  void validate() const;
};

struct GateOptions {
  // Beta prior over the per-prompt success rate; (1,1) is the default and
  // the value every closed-form threshold identity assumes.
  double prior_alpha = 1.0;
  double prior_beta = 1.0;
  // Ablation: gate on a posterior draw Beta(1+S, 1+N-S) instead of the
  // posterior mean. Requires an RNG at gate time.
  bool posterior_draw = false;
  // Worst-member selection when rewards tie (the common case with binary
  // rewards). LowestIndex is the default; LongestFailed is an ablation.
  enum class TieBreak { kLowestIndex, kLongestFailed };
  TieBreak tie_break = TieBreak::kLowestIndex;
};

// One per-group gate record, logged to the metrics stream.
struct GateDecision {
  int group_index = 0;
  PromptId prompt = 0;
  int successes = 0;
  double confidence = 0.0;  // the score the decision used (mean or draw)
  double threshold = 0.0;
  bool opened = false;
  int replaced_index = -1;  // set iff opened
};

// Posterior mean (1+S)/(2+N) of the group success rate under Beta(1,1).
// Strictly inside (0,1); throws InputError when S is out of [0,N].
double confidence_score(int successes, int n);
// General-prior variant (alpha+S)/(alpha+beta+N).
double confidence_score(int successes, int n, double prior_alpha,
                        double prior_beta);

double threshold_at(const GateConfig& config, long step);

// Replaces the worst member (argmin reward, ties by tie_break) with the
// teacher sample, keeps the displaced original for probes, recounts S.
// The group keeps exactly N members.
void ssi_transform(Group& group, Trajectory teacher,
                   GateOptions::TieBreak tie_break =
                       GateOptions::TieBreak::kLowestIndex);

// The gating loop: per group, compute the confidence score and inject the
// teacher sample iff score < threshold (strict; equality keeps the gate
// closed). Returns every decision so callers can log them.
std::vector<GateDecision> gate_and_inject(std::vector<Group>& groups,
                                          const TaskSpec& task,
                                          const GateConfig& config, long step,
                                          const GateOptions& opts = {},
                                          Rng* rng = nullptr);

}  // namespace hapolab
