#pragma once

#include <map>
#include <optional>
#include <string>

#include "hapolab/common.hpp"

namespace hapolab {

// One sampled (or injected) token sequence for a prompt.
struct Trajectory {
  PromptId prompt = 0;
  TokenSeq tokens;
  // Log-probability of each token under the policy that sampled it.
  // Empty for teacher samples: those are scored under the live policy at
  // loss time, never importance-weighted.
  std::vector<double> behavior_logps;
  int reward = 0;  // binary {0,1}
  bool is_teacher = false;
};

// A synthetic verifiable task: finite horizon, deterministic transitions,
// terminal binary reward, programmable teacher oracle.
struct TaskSpec {
  std::string family;  // "lock" or "chain"
  int vocab_size = 0;
  int max_len = 0;
  // Set for variable-length families; generation stops after emitting it.
  std::optional<Token> eos_token;
  // Default: demos are verified members of the accepted set (reward 1).
  // The unverified mode exists for ablation and is recorded here.
  bool verified_teacher = true;
  std::vector<PromptId> prompts;
  std::map<PromptId, std::vector<TokenSeq>> accepted;
  std::map<PromptId, TokenSeq> teacher_demos;

  // Throws ConfigError when structural invariants are broken.
  void validate() const;
};

// Binary terminal reward: 1 iff tokens is exactly one of the prompt's
// accepted sequences. Pure; unknown prompt throws InputError.
int verify(const TaskSpec& task, PromptId prompt, const TokenSeq& tokens);

// Wraps the registered demonstration as a Trajectory (is_teacher = true,
// reward = verify(demo)). Missing demo throws ConfigError.
Trajectory teacher_demo(const TaskSpec& task, PromptId prompt);

// Fixed-length exact-match task: reward 1 requires emitting one of
// n_solutions_per_prompt distinct random sequences. Uniform-random success
// probability per sample is n_solutions / vocab_size^seq_len. The teacher
// always demonstrates the first solution, so tasks with more than one
// solution model a suboptimal (distribution-narrowing) teacher.
TaskSpec make_lock_task(int vocab_size, int n_prompts, int seq_len,
                        int n_solutions_per_prompt, uint64_t seed);

// Variable-length task family: each prompt accepts one random sequence of
// length in [min_len, max_len], terminated by an EOS token (vocab_size - 1).
// Used to measure generation-length dynamics.
TaskSpec make_chain_task(int vocab_size, int n_prompts, int min_len,
                         int max_len, uint64_t seed);

// Ablation helper: replaces one prompt's demo with an arbitrary sequence and
// flips the task into unverified-teacher mode.
TaskSpec with_unverified_demo(TaskSpec task, PromptId prompt, TokenSeq demo);

// Structured text (JSON) serialization so experiments are replayable.
std::string task_to_json(const TaskSpec& task);
TaskSpec task_from_json(const std::string& text);
void save_task(const TaskSpec& task, const std::string& path);
TaskSpec load_task(const std::string& path);

}  // namespace hapolab
