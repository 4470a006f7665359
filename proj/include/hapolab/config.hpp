#pragma once

#include <json.hpp>

#include "hapolab/trainer.hpp"

namespace hapolab {

// Task construction section. Either a generator family with parameters or a
// pre-serialized task file.
struct TaskConfig {
  std::string family = "lock";  // lock | chain | file
  int vocab_size = 8;
  int n_prompts = 16;
  int seq_len = 4;
  int n_solutions_per_prompt = 1;
  int min_len = 2;
  int max_len = 6;
  uint64_t seed = 1;
  std::string file;

  TaskSpec build() const;
};

// A fully resolved single-run experiment: every default is materialized so
// the echoed config alone reproduces the run.
struct ExperimentConfig {
  TaskConfig task;
  BaselineConfig method;
  TrainConfig train;
  bool log_trajectories = false;
  std::string out_dir = "run";
  nlohmann::ordered_json resolved;  // the provenance echo
};

nlohmann::json load_config_file(const std::string& path);

// --set dotted.path=value. Values are parsed as JSON when possible
// (numbers, bools, arrays), otherwise taken as strings.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Validates (unknown keys are errors), fills defaults, and resolves the
// single-run sections. Sections used only by other commands ("compare",
// "bounds", "gradcheck", "eval") are allowed to coexist.
ExperimentConfig parse_experiment_config(const nlohmann::json& config);

// Output root: $HAPOLAB_OUT prefixes relative directories when set.
std::string resolve_output_dir(const std::string& dir);

// --- per-command sections ----------------------------------------------------

struct CompareMethodSpec {
  std::string label;
  BaselineConfig config;
};

struct CompareConfig {
  std::vector<CompareMethodSpec> methods;
  std::vector<uint64_t> seeds;
  int eval_samples = 512;
  double eval_temperature = 0.6;
};

CompareConfig parse_compare_config(const nlohmann::json& config);

struct BoundsConfig {
  std::vector<int> group_sizes = {4, 8, 16, 32};
  std::vector<double> gammas = {0.5, 0.8, 0.9};
  std::vector<double> mu_offsets = {0.05, 0.1};
  std::vector<double> mu_absolute = {0.99};
  long n_groups = 100000;
  int max_enum_group_size = 64;
  int threshold_grid = 99;
  uint64_t seed = 1234;
};

BoundsConfig parse_bounds_config(const nlohmann::json& config);

struct GradcheckConfig {
  int instances = 100;
  uint64_t seed = 99;
  double fd_step = 1e-5;
  double tolerance = 1e-5;
};

GradcheckConfig parse_gradcheck_config(const nlohmann::json& config);

struct EvalConfig {
  int samples = 1000;
  double temperature = 0.6;
  uint64_t seed = 777;
};

EvalConfig parse_eval_config(const nlohmann::json& config);

}  // namespace hapolab
