#pragma once

#include "hapolab/baselines.hpp"
#include "hapolab/metrics.hpp"

namespace hapolab {

struct LrSchedule {
  enum class Kind { kConstant, kInvSqrt };
  Kind kind = Kind::kConstant;
  double eta0 = 1.0;

  // constant: eta0; inv_sqrt: eta0 / sqrt(t + 1).
  double at(long step) const;
  static LrSchedule constant(double eta0);
  static LrSchedule inv_sqrt(double eta0);
};

struct TrainConfig {
  long steps = 1000;
  int batch_prompts = 8;  // M prompts per step, cycled over the task
  int group_size = 8;     // N
  LrSchedule lr;
  uint64_t seed = 0;
  GateConfig gate;
  GateOptions gate_options;
  ShapingConfig shaping;
  double eps_clip = 0.2;
  AdvantageOptions advantage;
  bool count_teacher_tokens = true;
  // One ascent step per rollout batch keeps ratios at 1; more exercises the
  // clip machinery.
  int updates_per_batch = 1;
  double sample_temperature = 1.0;
  // -1 resolves to min(task.max_len, 6): exact full-prefix conditioning for
  // short lock tasks.
  int context_order = -1;
  // Adaptive optimizer behind a flag; plain ascent is the default so the
  // decaying-rate convergence setting applies literally.
  bool use_adam = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Injection-vs-pure-gradient probe (per-step cosine + window sums over the
  // final quartile). Only meaningful for injecting methods.
  bool probe_cosine = true;
  long checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
  int resolved_context_order(const TaskSpec& task) const;
  long probe_window(long total_steps) const { return total_steps / 4; }
};

// Everything a run needs to continue: restoring this struct bit-exactly is
// what makes checkpoint-resume indistinguishable from an uninterrupted run.
struct TrainState {
  PolicyParams params;
  Rng rng;
  long step = 0;
  long prompt_cursor = 0;
  // Window-accumulated gradients for the consistency probe.
  GradTable probe_hapo_sum;
  GradTable probe_grpo_sum;
  // Adam moments (present only when the flag is on).
  GradTable adam_m;
  GradTable adam_v;
};

TrainState init_train_state(const TaskSpec& task, const TrainConfig& config);

// One synchronous on-policy step: rollout M groups against the current
// parameters (the implicit old-policy snapshot lives in the recorded
// behavior log-probs), gate/inject per method, compute advantages, evaluate
// the method objective, ascend. Throws NumericError with a diagnostic dump
// when the gradient goes non-finite.
StepMetrics train_step(TrainState& state, const TaskSpec& task,
                       const BaselineConfig& method, const TrainConfig& config,
                       MetricsWriter* sink = nullptr);

// Full run: train_step in a loop with metrics, checkpoints, and the probe
// summary. `out_dir` may be empty (no files written, metrics returned only).
RunMetrics run_method(const BaselineConfig& method, const TaskSpec& task,
                      const TrainConfig& config, const std::string& out_dir,
                      TrainState* final_state = nullptr,
                      bool log_trajectories = false);

// Resume variant: continues from a loaded state until config.steps.
RunMetrics resume_method(const BaselineConfig& method, const TaskSpec& task,
                         const TrainConfig& config, TrainState state,
                         const std::string& out_dir,
                         TrainState* final_state = nullptr,
                         bool log_trajectories = false);

// --- Evaluation --------------------------------------------------------------

struct SolutionProb {
  TokenSeq tokens;
  double probability = 0.0;
  bool is_teacher_demo = false;
};

struct PromptEval {
  PromptId prompt = 0;
  double success_rate = 0.0;
  double mean_gen_length = 0.0;
  std::vector<SolutionProb> solutions;  // exact per-solution probabilities
};

struct EvalReport {
  int n_samples = 0;
  double temperature = 1.0;
  double success_rate = 0.0;
  double mean_gen_length = 0.0;
  // Mean over prompts of the exact probability mass on accepted solutions
  // the teacher does not demonstrate.
  double non_teacher_solution_prob = 0.0;
  double teacher_solution_prob = 0.0;
  std::vector<PromptEval> prompts;
};

// Monte-Carlo success rate at the given sampling temperature plus exact
// solution probabilities straight from the table.
EvalReport evaluate(const PolicyParams& params, const TaskSpec& task,
                    int n_samples, double temperature, uint64_t seed);

std::string eval_to_json(const EvalReport& report);

// --- Checkpointing -----------------------------------------------------------

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace hapolab
