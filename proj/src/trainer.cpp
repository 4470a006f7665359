#include "hapolab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace hapolab {

double LrSchedule::at(long step) const {
  switch (kind) {
    case Kind::kConstant:
      return eta0;
    case Kind::kInvSqrt:
      return eta0 / std::sqrt(static_cast<double>(step + 1));
  }
  throw StateError("LrSchedule::at: unreachable");
}

LrSchedule LrSchedule::constant(double eta0) {
  return LrSchedule{Kind::kConstant, eta0};
}

LrSchedule LrSchedule::inv_sqrt(double eta0) {
  return LrSchedule{Kind::kInvSqrt, eta0};
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_prompts < 1) throw ConfigError("train: batch_prompts must be >= 1");
  if (group_size < 2) throw ConfigError("train: group_size must be >= 2");
  if (lr.eta0 <= 0.0) throw ConfigError("train: eta0 must be > 0");
  if (eps_clip <= 0.0 || eps_clip >= 1.0) {
    throw ConfigError("train: eps_clip must lie in (0,1)");
  }
  if (updates_per_batch < 1) {
    throw ConfigError("train: updates_per_batch must be >= 1");
  }
  if (sample_temperature <= 0.0) {
    throw ConfigError("train: sample_temperature must be > 0");
  }
  if (context_order < -1 || context_order > kMaxContextOrder) {
    throw ConfigError("train: context_order must be -1 (auto) or in [0, 8]");
  }
  if (checkpoint_every < 0) {
    throw ConfigError("train: checkpoint_every must be >= 0");
  }
  gate.validate();
  shaping.validate();
}

int TrainConfig::resolved_context_order(const TaskSpec& task) const {
  if (context_order >= 0) return context_order;
  return std::min(task.max_len, 6);
}

TrainState init_train_state(const TaskSpec& task, const TrainConfig& config) {
  TrainState state;
  state.params.vocab_size = task.vocab_size;
  state.params.context_order = config.resolved_context_order(task);
  state.rng.seed(config.seed);
  state.probe_hapo_sum.vocab_size = task.vocab_size;
  state.probe_grpo_sum.vocab_size = task.vocab_size;
  state.adam_m.vocab_size = task.vocab_size;
  state.adam_v.vocab_size = task.vocab_size;
  return state;
}

namespace {

bool method_injects(Method m) {
  return m == Method::kHapo || m == Method::kStaticMix;
}

// Rebuilds the pure on-policy batch: injected groups get their displaced
// member back and fresh advantages.
std::vector<Group> strip_injections(const std::vector<Group>& groups,
                                    const AdvantageOptions& adv_opts) {
  std::vector<Group> stripped = groups;
  for (Group& g : stripped) {
    if (g.injected && g.replaced_original) {
      g.trajectories[static_cast<size_t>(g.replaced_index)] =
          *g.replaced_original;
      g.injected = false;
      g.replaced_original.reset();
      g.replaced_index = -1;
      g.recount_successes();
    }
    compute_advantages(g, adv_opts);
  }
  return stripped;
}

Objective evaluate_objective(const TrainState& state,
                             const BaselineConfig& method,
                             const TrainConfig& config, long step,
                             std::vector<Group>& groups,
                             const std::vector<Trajectory>& batch_demos,
                             BatchStats* stats) {
  switch (method.method) {
    case Method::kSft:
      return sft_objective(state.params, batch_demos);
    case Method::kSftThenRl:
      if (step < method.switch_step) {
        return sft_objective(state.params, batch_demos);
      }
      return grpo_batch_objective(state.params, groups, config.eps_clip);
    case Method::kGrpo:
      return grpo_batch_objective(state.params, groups, config.eps_clip);
    case Method::kHapo: {
      MixOptions mix;
      mix.count_teacher_tokens = config.count_teacher_tokens;
      return hapo_batch_objective(state.params, groups, config.shaping,
                                  config.eps_clip, stats, mix);
    }
    case Method::kStaticMix: {
      MixOptions mix;
      mix.teacher_weight = method.lambda_mix;
      mix.shaped_teacher = method.use_shaping;
      mix.count_teacher_tokens = config.count_teacher_tokens;
      return hapo_batch_objective(state.params, groups, config.shaping,
                                  config.eps_clip, stats, mix);
    }
  }
  throw StateError("evaluate_objective: unreachable");
}

void adam_update(TrainState& state, const GradTable& grad,
                 const TrainConfig& config, double eta) {
  // Lazy Adam over the rows the gradient touches.
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double t = static_cast<double>(state.step + 1);
  const double corr1 = 1.0 - std::pow(b1, t);
  const double corr2 = 1.0 - std::pow(b2, t);
  for (const auto& [key, g] : grad.rows) {
    auto& m = state.adam_m.row(key);
    auto& v = state.adam_v.row(key);
    auto& p = state.params.row(key);
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / corr1;
      const double vhat = v[i] / corr2;
      p[i] += eta * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

std::string nan_diagnostic(long step, const Objective& obj) {
  std::ostringstream os;
  os << "non-finite gradient at step " << step << ": objective="
     << obj.value << " grad_max_abs=" << obj.grad.max_abs()
     << " grad_rows=" << obj.grad.rows.size();
  return os.str();
}

}  // namespace

StepMetrics train_step(TrainState& state, const TaskSpec& task,
                       const BaselineConfig& method, const TrainConfig& config,
                       MetricsWriter* sink) {
  const long step = state.step;

  // Cyclic prompt batch.
  std::vector<PromptId> batch;
  batch.reserve(static_cast<size_t>(config.batch_prompts));
  for (int i = 0; i < config.batch_prompts; ++i) {
    batch.push_back(task.prompts[static_cast<size_t>(
        state.prompt_cursor % static_cast<long>(task.prompts.size()))]);
    ++state.prompt_cursor;
  }

  // Rollouts against the current parameters; the behavior log-probs recorded
  // here are the old-policy snapshot every later ratio refers to.
  std::vector<Group> groups;
  groups.reserve(batch.size());
  for (PromptId p : batch) {
    groups.push_back(rollout_group(state.params, task, p, config.group_size,
                                   state.rng, config.sample_temperature));
  }

  // Teacher-excluded aggregates, taken before any injection so they cover
  // exactly the policy's own samples.
  double reward_sum = 0.0;
  double len_sum = 0.0;
  long n_traj = 0;
  double conf_sum = 0.0;
  for (const Group& g : groups) {
    for (const Trajectory& t : g.trajectories) {
      reward_sum += t.reward;
      len_sum += static_cast<double>(t.tokens.size());
      ++n_traj;
    }
    conf_sum += confidence_score(g.success_count, g.n());
  }

  const std::vector<Trajectory> batch_demos = [&] {
    std::vector<Trajectory> demos;
    if (method.method == Method::kSft ||
        (method.method == Method::kSftThenRl && step < method.switch_step)) {
      demos.reserve(batch.size());
      for (PromptId p : batch) demos.push_back(teacher_demo(task, p));
    }
    return demos;
  }();

  // Gate / inject / advantage per method, then score the objective.
  std::vector<GateDecision> decisions;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  BatchStats stats;
  Objective obj;
  switch (method.method) {
    case Method::kHapo:
      threshold = threshold_at(config.gate, step);
      decisions = gate_and_inject(groups, task, config.gate, step,
                                  config.gate_options, &state.rng);
      for (Group& g : groups) compute_advantages(g, config.advantage);
      obj = evaluate_objective(state, method, config, step, groups,
                               batch_demos, &stats);
      break;
    case Method::kStaticMix:
      obj = static_mix_objective(state.params, groups, task, method,
                                 config.shaping, config.eps_clip,
                                 config.advantage, &stats, &decisions,
                                 config.gate_options.tie_break);
      break;
    case Method::kGrpo:
    case Method::kSftThenRl:
    case Method::kSft:
      for (Group& g : groups) compute_advantages(g, config.advantage);
      obj = evaluate_objective(state, method, config, step, groups,
                               batch_demos, &stats);
      break;
  }

  int injections = 0;
  for (const Group& g : groups) injections += g.injected ? 1 : 0;

  // Injection-stripped probe: cosine between the applied gradient and the
  // pure on-policy gradient on the same batch. Identical (cosine 1) when
  // nothing was injected.
  double cosine = std::numeric_limits<double>::quiet_NaN();
  const long window_start = config.steps - config.probe_window(config.steps);
  const bool probing = config.probe_cosine && method_injects(method.method);
  if (probing) {
    if (injections == 0) {
      cosine = 1.0;
      if (step >= window_start) {
        state.probe_hapo_sum.axpy(1.0, obj.grad);
        state.probe_grpo_sum.axpy(1.0, obj.grad);
      }
    } else {
      std::vector<Group> stripped = strip_injections(groups, config.advantage);
      Objective pure =
          grpo_batch_objective(state.params, stripped, config.eps_clip);
      cosine = cosine_similarity(obj.grad, pure.grad);
      if (step >= window_start) {
        state.probe_hapo_sum.axpy(1.0, obj.grad);
        state.probe_grpo_sum.axpy(1.0, pure.grad);
      }
    }
  }

  if (!std::isfinite(obj.value) || !obj.grad.all_finite()) {
    throw NumericError(nan_diagnostic(step, obj));
  }

  // Ascent. Extra updates per batch re-score the same trajectories against
  // the stored behavior log-probs, which is what drives ratios off 1.
  const double eta = config.lr.at(step);
  if (config.use_adam) {
    adam_update(state, obj.grad, config, eta);
  } else {
    apply_update(state.params, obj.grad, eta);
  }
  for (int u = 1; u < config.updates_per_batch; ++u) {
    Objective extra = evaluate_objective(state, method, config, step,
                                         groups, batch_demos, nullptr);
    if (!std::isfinite(extra.value) || !extra.grad.all_finite()) {
      throw NumericError(nan_diagnostic(step, extra));
    }
    if (config.use_adam) {
      adam_update(state, extra.grad, config, eta);
    } else {
      apply_update(state.params, extra.grad, eta);
    }
  }

  StepMetrics m;
  m.step = step;
  m.mean_reward = n_traj > 0 ? reward_sum / static_cast<double>(n_traj) : 0.0;
  m.mean_gen_length = n_traj > 0 ? len_sum / static_cast<double>(n_traj) : 0.0;
  m.teacher_injection_count = injections;
  m.mean_confidence =
      groups.empty() ? std::numeric_limits<double>::quiet_NaN()
                     : conf_sum / static_cast<double>(groups.size());
  m.threshold = threshold;
  m.grad_norm = obj.grad.norm();
  m.objective_value = obj.value;
  m.grpo_cosine = cosine;

  if (sink) {
    sink->write_gate_decisions(step, decisions);
    sink->write_trajectories(step, groups);
    sink->write_step(m);
  }

  ++state.step;
  return m;
}

namespace {

RunMetrics run_loop(const BaselineConfig& method, const TaskSpec& task,
                    const TrainConfig& config, TrainState state,
                    const std::string& out_dir, TrainState* final_state,
                    bool log_trajectories, bool resuming) {
  namespace fs = std::filesystem;
  MetricsWriter writer;
  MetricsWriter* sink = nullptr;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    writer.open_csv(out_dir + "/metrics.csv", /*append=*/resuming);
    if (log_trajectories) {
      writer.open_jsonl(out_dir + "/trajectories.jsonl", /*append=*/resuming);
    }
    sink = &writer;
  }

  RunMetrics run;
  run.summary.method = method_to_string(method.method);
  if (resuming && !out_dir.empty() &&
      fs::exists(out_dir + "/metrics.csv")) {
    // Prior rows so summaries and curves cover the whole run.
    run.steps = read_metrics_csv(out_dir + "/metrics.csv");
  }

  try {
    while (state.step < config.steps) {
      run.steps.push_back(train_step(state, task, method, config, sink));
      if (config.checkpoint_every > 0 &&
          state.step % config.checkpoint_every == 0 &&
          state.step < config.steps && !out_dir.empty()) {
        save_checkpoint(state, out_dir + "/checkpoint_" +
                                    std::to_string(state.step) + ".txt");
      }
    }
  } catch (const NumericError& e) {
    if (!out_dir.empty()) {
      std::ofstream dump(out_dir + "/abort_dump.txt");
      dump << e.what() << "\n";
      std::ofstream ps(out_dir + "/params_at_abort.txt");
      save_params(state.params, ps);
    }
    throw;
  }

  // Summary over the full row set (covers pre-resume segments too).
  const long n = static_cast<long>(run.steps.size());
  run.summary.steps = n;
  for (const auto& m : run.steps) {
    run.summary.max_grad_norm = std::max(run.summary.max_grad_norm, m.grad_norm);
    run.summary.total_injections += m.teacher_injection_count;
  }
  run.summary.total_groups = n * config.batch_prompts;
  const long q = std::max<long>(1, n / 4);
  double fw = 0.0;
  for (long i = n - q; i < n; ++i) {
    fw += run.steps[static_cast<size_t>(i)].mean_reward;
  }
  run.summary.final_window_reward = fw / static_cast<double>(q);
  run.summary.probe_window = config.probe_window(config.steps);
  if (config.probe_cosine && method_injects(method.method)) {
    run.summary.window_cosine =
        cosine_similarity(state.probe_hapo_sum, state.probe_grpo_sum);
  }

  if (!out_dir.empty()) {
    save_checkpoint(state, out_dir + "/checkpoint_final.txt");
    export_curves(run, out_dir + "/curves.tsv");
  }
  if (final_state) *final_state = std::move(state);
  return run;
}

}  // namespace

RunMetrics run_method(const BaselineConfig& method, const TaskSpec& task,
                      const TrainConfig& config, const std::string& out_dir,
                      TrainState* final_state, bool log_trajectories) {
  config.validate();
  method.validate();
  task.validate();
  return run_loop(method, task, config, init_train_state(task, config),
                  out_dir, final_state, log_trajectories, /*resuming=*/false);
}

RunMetrics resume_method(const BaselineConfig& method, const TaskSpec& task,
                         const TrainConfig& config, TrainState state,
                         const std::string& out_dir, TrainState* final_state,
                         bool log_trajectories) {
  config.validate();
  method.validate();
  task.validate();
  if (state.step > config.steps) {
    throw ConfigError("resume: checkpoint is past the configured step count");
  }
  return run_loop(method, task, config, std::move(state), out_dir, final_state,
                  log_trajectories, /*resuming=*/true);
}

// --- evaluation ----------------------------------------------------------------

EvalReport evaluate(const PolicyParams& params, const TaskSpec& task,
                    int n_samples, double temperature, uint64_t seed) {
  if (n_samples < 1) throw InputError("evaluate: n_samples must be >= 1");
  EvalReport report;
  report.n_samples = n_samples;
  report.temperature = temperature;
  Rng rng(seed);

  double success_total = 0.0;
  double len_total = 0.0;
  double non_teacher_total = 0.0;
  double teacher_total = 0.0;
  for (PromptId p : task.prompts) {
    PromptEval pe;
    pe.prompt = p;
    double s = 0.0;
    double l = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      Trajectory t = sample_trajectory(params, task, p, rng, temperature);
      s += t.reward;
      l += static_cast<double>(t.tokens.size());
    }
    pe.success_rate = s / n_samples;
    pe.mean_gen_length = l / n_samples;

    const TokenSeq* demo = nullptr;
    auto demo_it = task.teacher_demos.find(p);
    if (demo_it != task.teacher_demos.end()) demo = &demo_it->second;
    double non_teacher_mass = 0.0;
    double teacher_mass = 0.0;
    for (const TokenSeq& sol : task.accepted.at(p)) {
      SolutionProb sp;
      sp.tokens = sol;
      sp.probability = sequence_probability(params, p, sol);
      sp.is_teacher_demo = demo != nullptr && sol == *demo;
      if (sp.is_teacher_demo) {
        teacher_mass += sp.probability;
      } else {
        non_teacher_mass += sp.probability;
      }
      pe.solutions.push_back(std::move(sp));
    }
    non_teacher_total += non_teacher_mass;
    teacher_total += teacher_mass;
    success_total += pe.success_rate;
    len_total += pe.mean_gen_length;
    report.prompts.push_back(std::move(pe));
  }
  const double np = static_cast<double>(task.prompts.size());
  report.success_rate = success_total / np;
  report.mean_gen_length = len_total / np;
  report.non_teacher_solution_prob = non_teacher_total / np;
  report.teacher_solution_prob = teacher_total / np;
  return report;
}

std::string eval_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["schema"] = "hapolab-eval-v1";
  j["n_samples"] = report.n_samples;
  j["temperature"] = report.temperature;
  j["success_rate"] = report.success_rate;
  j["mean_gen_length"] = report.mean_gen_length;
  j["non_teacher_solution_prob"] = report.non_teacher_solution_prob;
  j["teacher_solution_prob"] = report.teacher_solution_prob;
  j["prompts"] = nlohmann::ordered_json::array();
  for (const auto& pe : report.prompts) {
    nlohmann::ordered_json pj;
    pj["prompt"] = pe.prompt;
    pj["success_rate"] = pe.success_rate;
    pj["mean_gen_length"] = pe.mean_gen_length;
    pj["solutions"] = nlohmann::ordered_json::array();
    for (const auto& sp : pe.solutions) {
      nlohmann::ordered_json sj;
      sj["tokens"] = sp.tokens;
      sj["probability"] = sp.probability;
      sj["is_teacher_demo"] = sp.is_teacher_demo;
      pj["solutions"].push_back(sj);
    }
    j["prompts"].push_back(pj);
  }
  return j.dump(2);
}

// --- checkpointing ----------------------------------------------------------------

namespace {

void write_table(std::ostream& os, const std::string& tag,
                 const GradTable& table) {
  std::vector<ContextKey> keys = table.sorted_keys();
  os << tag << ' ' << table.vocab_size << ' ' << keys.size() << "\n";
  char buf[48];
  for (const ContextKey& k : keys) {
    os << k.prompt << ' ' << k.position << ' ' << k.suffix_len;
    for (int i = 0; i < k.suffix_len; ++i) {
      os << ' ' << k.suffix[static_cast<size_t>(i)];
    }
    for (double v : table.rows.at(k)) {
      std::snprintf(buf, sizeof(buf), "%a", v);
      os << ' ' << buf;
    }
    os << "\n";
  }
}

GradTable read_table(std::istream& is, const std::string& expected_tag) {
  std::string tag;
  size_t n_rows = 0;
  GradTable table;
  is >> tag >> table.vocab_size >> n_rows;
  if (tag != expected_tag || !is) {
    throw ConfigError("checkpoint: bad table tag (wanted " + expected_tag +
                      ")");
  }
  std::string line;
  std::getline(is, line);
  for (size_t i = 0; i < n_rows; ++i) {
    if (!std::getline(is, line)) throw ConfigError("checkpoint: truncated");
    std::istringstream ls(line);
    ContextKey k;
    int position = 0, suffix_len = 0;
    if (!(ls >> k.prompt >> position >> suffix_len)) {
      throw ConfigError("checkpoint: malformed key");
    }
    if (suffix_len < 0 || suffix_len > kMaxContextOrder) {
      throw ConfigError("checkpoint: bad suffix length");
    }
    k.position = static_cast<int16_t>(position);
    k.suffix_len = static_cast<int16_t>(suffix_len);
    for (int s = 0; s < suffix_len; ++s) {
      int t = 0;
      if (!(ls >> t)) throw ConfigError("checkpoint: truncated suffix");
      k.suffix[static_cast<size_t>(s)] = static_cast<int16_t>(t);
    }
    std::vector<double> row(static_cast<size_t>(table.vocab_size), 0.0);
    std::string tok;
    for (auto& v : row) {
      if (!(ls >> tok)) throw ConfigError("checkpoint: short row");
      v = std::strtod(tok.c_str(), nullptr);
    }
    table.rows.emplace(k, std::move(row));
  }
  return table;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("save_checkpoint: cannot open " + path);
  os << "hapolab-checkpoint-v1\n";
  os << "step " << state.step << "\n";
  os << "prompt_cursor " << state.prompt_cursor << "\n";
  os << "rng " << state.rng << "\n";
  os << "params\n";
  save_params(state.params, os);
  write_table(os, "probe_hapo", state.probe_hapo_sum);
  write_table(os, "probe_grpo", state.probe_grpo_sum);
  write_table(os, "adam_m", state.adam_m);
  write_table(os, "adam_v", state.adam_v);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("load_checkpoint: cannot open " + path);
  std::string line, word;
  std::getline(is, line);
  if (line != "hapolab-checkpoint-v1") {
    throw ConfigError("checkpoint: bad header in " + path);
  }
  TrainState state;
  is >> word >> state.step;
  if (word != "step") throw ConfigError("checkpoint: missing step");
  is >> word >> state.prompt_cursor;
  if (word != "prompt_cursor") throw ConfigError("checkpoint: missing cursor");
  is >> word;
  if (word != "rng") throw ConfigError("checkpoint: missing rng");
  is >> state.rng;
  is >> word;
  if (word != "params") throw ConfigError("checkpoint: missing params");
  std::getline(is, line);
  state.params = load_params(is);
  state.probe_hapo_sum = read_table(is, "probe_hapo");
  state.probe_grpo_sum = read_table(is, "probe_grpo");
  state.adam_m = read_table(is, "adam_m");
  state.adam_v = read_table(is, "adam_v");
  return state;
}

}  // namespace hapolab
