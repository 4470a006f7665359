#include "hapolab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace hapolab {

using nlohmann::json;
using nlohmann::ordered_json;

TaskSpec TaskConfig::build() const {
  if (family == "lock") {
    return make_lock_task(vocab_size, n_prompts, seq_len,
                          n_solutions_per_prompt, seed);
  }
  if (family == "chain") {
    return make_chain_task(vocab_size, n_prompts, min_len, max_len, seed);
  }
  if (family == "file") {
    if (file.empty()) throw ConfigError("task: family 'file' needs task.file");
    return load_task(file);
  }
  throw ConfigError("task: unknown family '" + family + "'");
}

json load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  return j;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json* node = &config;
  std::istringstream ps(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ps, part, '.')) {
    if (part.empty()) throw ConfigError("override: empty path component");
    parts.push_back(part);
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    node = &(*node)[parts[i]];
    if (!node->is_object() && !node->is_null()) {
      throw ConfigError("override: '" + parts[i] + "' is not a section");
    }
  }
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;  // plain string
  (*node)[parts.back()] = parsed;
}

namespace {

[[noreturn]] void unknown_key(const std::string& section,
                              const std::string& key) {
  throw ConfigError("config: unknown key '" + key + "' in section '" +
                    section + "'");
}

void check_keys(const json& obj, const std::string& section,
                const std::set<std::string>& allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) unknown_key(section, key);
  }
}

template <class T>
T take(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: key '" + key + "' has the wrong type");
  }
}

TaskConfig parse_task_section(const json& j) {
  check_keys(j, "task",
             {"family", "vocab_size", "n_prompts", "seq_len",
              "n_solutions_per_prompt", "min_len", "max_len", "seed", "file"});
  TaskConfig t;
  t.family = take<std::string>(j, "family", t.family);
  t.vocab_size = take<int>(j, "vocab_size", t.vocab_size);
  t.n_prompts = take<int>(j, "n_prompts", t.n_prompts);
  t.seq_len = take<int>(j, "seq_len", t.seq_len);
  t.n_solutions_per_prompt =
      take<int>(j, "n_solutions_per_prompt", t.n_solutions_per_prompt);
  t.min_len = take<int>(j, "min_len", t.min_len);
  t.max_len = take<int>(j, "max_len", t.max_len);
  t.seed = take<uint64_t>(j, "seed", t.seed);
  t.file = take<std::string>(j, "file", t.file);
  return t;
}

BaselineConfig parse_method_section(const json& j) {
  check_keys(j, "method",
             {"name", "switch_step", "use_shaping", "lambda_mix"});
  BaselineConfig m;
  m.method = method_from_string(take<std::string>(j, "name", "hapo"));
  m.switch_step = take<long>(j, "switch_step", m.switch_step);
  m.use_shaping = take<bool>(j, "use_shaping", m.use_shaping);
  m.lambda_mix = take<double>(j, "lambda_mix", m.lambda_mix);
  m.validate();
  return m;
}

GateConfig parse_gate_section(const json& j) {
  check_keys(j, "train.gate",
             {"schedule", "gamma", "gamma0", "gamma1", "switch_step",
              "gamma_min", "gamma_max", "midpoint", "slope"});
  GateConfig g;
  const std::string sched = take<std::string>(j, "schedule", "constant");
  if (sched == "constant") {
    g = GateConfig::constant(take<double>(j, "gamma", 0.8));
  } else if (sched == "step") {
    g = GateConfig::step(take<double>(j, "gamma0", 0.9),
                         take<double>(j, "gamma1", 0.5),
                         take<long>(j, "switch_step", 0));
  } else if (sched == "sigmoid") {
    g = GateConfig::sigmoid(
        take<double>(j, "gamma_min", 0.1), take<double>(j, "gamma_max", 0.9),
        take<double>(j, "midpoint", 0.0), take<double>(j, "slope", 1.0));
  } else {
    throw ConfigError("config: unknown gate schedule '" + sched + "'");
  }
  g.validate();
  return g;
}

GateOptions parse_gate_options_section(const json& j) {
  check_keys(j, "train.gate_options",
             {"prior_alpha", "prior_beta", "posterior_draw", "tie_break"});
  GateOptions o;
  o.prior_alpha = take<double>(j, "prior_alpha", o.prior_alpha);
  o.prior_beta = take<double>(j, "prior_beta", o.prior_beta);
  o.posterior_draw = take<bool>(j, "posterior_draw", o.posterior_draw);
  const std::string tb = take<std::string>(j, "tie_break", "lowest_index");
  if (tb == "lowest_index") {
    o.tie_break = GateOptions::TieBreak::kLowestIndex;
  } else if (tb == "longest_failed") {
    o.tie_break = GateOptions::TieBreak::kLongestFailed;
  } else {
    throw ConfigError("config: unknown tie_break '" + tb + "'");
  }
  return o;
}

TrainConfig parse_train_section(const json& j) {
  check_keys(j, "train",
             {"steps", "batch_prompts", "group_size", "seed", "eps_clip", "lr",
              "gate", "gate_options", "shaping", "advantage",
              "count_teacher_tokens", "updates_per_batch",
              "sample_temperature", "context_order", "use_adam", "adam_beta1",
              "adam_beta2", "adam_eps", "probe_cosine", "checkpoint_every"});
  TrainConfig c;
  c.steps = take<long>(j, "steps", c.steps);
  c.batch_prompts = take<int>(j, "batch_prompts", c.batch_prompts);
  c.group_size = take<int>(j, "group_size", c.group_size);
  c.seed = take<uint64_t>(j, "seed", c.seed);
  c.eps_clip = take<double>(j, "eps_clip", c.eps_clip);

  if (j.contains("lr")) {
    const json& lr = j.at("lr");
    check_keys(lr, "train.lr", {"schedule", "eta0"});
    const std::string sched = take<std::string>(lr, "schedule", "constant");
    const double eta0 = take<double>(lr, "eta0", 1.0);
    if (sched == "constant") {
      c.lr = LrSchedule::constant(eta0);
    } else if (sched == "inv_sqrt") {
      c.lr = LrSchedule::inv_sqrt(eta0);
    } else {
      throw ConfigError("config: unknown lr schedule '" + sched + "'");
    }
  }
  if (j.contains("gate")) c.gate = parse_gate_section(j.at("gate"));
  if (j.contains("gate_options")) {
    c.gate_options = parse_gate_options_section(j.at("gate_options"));
  }
  if (j.contains("shaping")) {
    const json& s = j.at("shaping");
    check_keys(s, "train.shaping", {"beta_shape", "confidence_anneal"});
    c.shaping.beta_shape = take<double>(s, "beta_shape", c.shaping.beta_shape);
    c.shaping.confidence_anneal =
        take<bool>(s, "confidence_anneal", c.shaping.confidence_anneal);
  }
  if (j.contains("advantage")) {
    const json& a = j.at("advantage");
    check_keys(a, "train.advantage", {"sample_std", "eps_std"});
    c.advantage.sample_std =
        take<bool>(a, "sample_std", c.advantage.sample_std);
    c.advantage.eps_std = take<double>(a, "eps_std", c.advantage.eps_std);
  }
  c.count_teacher_tokens =
      take<bool>(j, "count_teacher_tokens", c.count_teacher_tokens);
  c.updates_per_batch = take<int>(j, "updates_per_batch", c.updates_per_batch);
  c.sample_temperature =
      take<double>(j, "sample_temperature", c.sample_temperature);
  c.context_order = take<int>(j, "context_order", c.context_order);
  c.use_adam = take<bool>(j, "use_adam", c.use_adam);
  c.adam_beta1 = take<double>(j, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = take<double>(j, "adam_beta2", c.adam_beta2);
  c.adam_eps = take<double>(j, "adam_eps", c.adam_eps);
  c.probe_cosine = take<bool>(j, "probe_cosine", c.probe_cosine);
  c.checkpoint_every = take<long>(j, "checkpoint_every", c.checkpoint_every);
  return c;
}

ordered_json echo_experiment(const ExperimentConfig& cfg,
                             const TaskSpec& task) {
  ordered_json e;
  e["config_version"] = 1;

  ordered_json t;
  t["family"] = cfg.task.family;
  if (cfg.task.family == "file") {
    t["file"] = cfg.task.file;
  } else {
    t["vocab_size"] = cfg.task.vocab_size;
    t["n_prompts"] = cfg.task.n_prompts;
    if (cfg.task.family == "lock") {
      t["seq_len"] = cfg.task.seq_len;
      t["n_solutions_per_prompt"] = cfg.task.n_solutions_per_prompt;
    } else {
      t["min_len"] = cfg.task.min_len;
      t["max_len"] = cfg.task.max_len;
    }
    t["seed"] = cfg.task.seed;
  }
  e["task"] = t;

  ordered_json m;
  m["name"] = method_to_string(cfg.method.method);
  m["switch_step"] = cfg.method.switch_step;
  m["use_shaping"] = cfg.method.use_shaping;
  m["lambda_mix"] = cfg.method.lambda_mix;
  e["method"] = m;

  const TrainConfig& c = cfg.train;
  ordered_json tr;
  tr["steps"] = c.steps;
  tr["batch_prompts"] = c.batch_prompts;
  tr["group_size"] = c.group_size;
  tr["seed"] = c.seed;
  tr["eps_clip"] = c.eps_clip;
  tr["lr"] = {{"schedule", c.lr.kind == LrSchedule::Kind::kConstant
                               ? "constant"
                               : "inv_sqrt"},
              {"eta0", c.lr.eta0}};
  ordered_json gate;
  switch (c.gate.schedule) {
    case GateConfig::Schedule::kConstant:
      gate["schedule"] = "constant";
      gate["gamma"] = c.gate.gamma;
      break;
    case GateConfig::Schedule::kStep:
      gate["schedule"] = "step";
      gate["gamma0"] = c.gate.gamma0;
      gate["gamma1"] = c.gate.gamma1;
      gate["switch_step"] = c.gate.switch_step;
      break;
    case GateConfig::Schedule::kSigmoid:
      gate["schedule"] = "sigmoid";
      gate["gamma_min"] = c.gate.gamma_min;
      gate["gamma_max"] = c.gate.gamma_max;
      gate["midpoint"] = c.gate.midpoint;
      gate["slope"] = c.gate.slope;
      break;
  }
  tr["gate"] = gate;
  tr["gate_options"] = {
      {"prior_alpha", c.gate_options.prior_alpha},
      {"prior_beta", c.gate_options.prior_beta},
      {"posterior_draw", c.gate_options.posterior_draw},
      {"tie_break",
       c.gate_options.tie_break == GateOptions::TieBreak::kLowestIndex
           ? "lowest_index"
           : "longest_failed"}};
  tr["shaping"] = {{"beta_shape", c.shaping.beta_shape},
                   {"confidence_anneal", c.shaping.confidence_anneal}};
  tr["advantage"] = {{"sample_std", c.advantage.sample_std},
                     {"eps_std", c.advantage.eps_std}};
  tr["count_teacher_tokens"] = c.count_teacher_tokens;
  tr["updates_per_batch"] = c.updates_per_batch;
  tr["sample_temperature"] = c.sample_temperature;
  tr["context_order"] = c.resolved_context_order(task);
  tr["use_adam"] = c.use_adam;
  tr["adam_beta1"] = c.adam_beta1;
  tr["adam_beta2"] = c.adam_beta2;
  tr["adam_eps"] = c.adam_eps;
  tr["probe_cosine"] = c.probe_cosine;
  tr["checkpoint_every"] = c.checkpoint_every;
  e["train"] = tr;

  e["output"] = {{"dir", cfg.out_dir},
                 {"log_trajectories", cfg.log_trajectories}};
  return e;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& config) {
  check_keys(config, "<top>",
             {"config_version", "task", "method", "train", "output", "compare",
              "bounds", "gradcheck", "eval"});
  if (take<int>(config, "config_version", 0) != 1) {
    throw ConfigError("config: config_version must be 1");
  }
  ExperimentConfig cfg;
  if (config.contains("task")) cfg.task = parse_task_section(config.at("task"));
  if (config.contains("method")) {
    cfg.method = parse_method_section(config.at("method"));
  }
  if (config.contains("train")) {
    cfg.train = parse_train_section(config.at("train"));
  }
  if (config.contains("output")) {
    const json& o = config.at("output");
    check_keys(o, "output", {"dir", "log_trajectories"});
    cfg.out_dir = take<std::string>(o, "dir", cfg.out_dir);
    cfg.log_trajectories =
        take<bool>(o, "log_trajectories", cfg.log_trajectories);
  }
  cfg.train.validate();

  // Fail fast: build the task once to surface construction errors before any
  // compute, and to resolve the context order for the provenance echo.
  const TaskSpec task = cfg.task.build();
  cfg.train.context_order = cfg.train.resolved_context_order(task);
  cfg.resolved = echo_experiment(cfg, task);
  return cfg;
}

std::string resolve_output_dir(const std::string& dir) {
  if (dir.empty() || dir.front() == '/') return dir;
  const char* root = std::getenv("HAPOLAB_OUT");
  if (root == nullptr || *root == '\0') return dir;
  std::string r(root);
  if (r.back() != '/') r += '/';
  return r + dir;
}

CompareConfig parse_compare_config(const json& config) {
  if (!config.contains("compare")) {
    throw ConfigError("config: compare command needs a 'compare' section");
  }
  const json& j = config.at("compare");
  check_keys(j, "compare",
             {"methods", "seeds", "eval_samples", "eval_temperature"});
  CompareConfig c;
  if (!j.contains("methods") || !j.at("methods").is_array() ||
      j.at("methods").size() < 2) {
    throw ConfigError("config: compare.methods must list at least 2 methods");
  }
  for (const json& entry : j.at("methods")) {
    CompareMethodSpec spec;
    if (entry.is_string()) {
      spec.config.method = method_from_string(entry.get<std::string>());
      spec.label = entry.get<std::string>();
    } else if (entry.is_object()) {
      check_keys(entry, "compare.methods[]",
                 {"name", "label", "switch_step", "use_shaping", "lambda_mix"});
      spec.config = parse_method_section([&] {
        json m = entry;
        m.erase("label");
        return m;
      }());
      spec.label = take<std::string>(entry, "label",
                                     method_to_string(spec.config.method));
    } else {
      throw ConfigError("config: compare.methods entries must be strings or objects");
    }
    c.methods.push_back(std::move(spec));
  }
  {
    std::set<std::string> labels;
    for (const auto& m : c.methods) {
      if (!labels.insert(m.label).second) {
        throw ConfigError("config: duplicate compare method label '" + m.label +
                          "'");
      }
    }
  }
  if (!j.contains("seeds") || !j.at("seeds").is_array() ||
      j.at("seeds").empty()) {
    throw ConfigError("config: compare.seeds must list at least 1 seed");
  }
  c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  c.eval_samples = take<int>(j, "eval_samples", c.eval_samples);
  c.eval_temperature = take<double>(j, "eval_temperature", c.eval_temperature);
  return c;
}

BoundsConfig parse_bounds_config(const json& config) {
  BoundsConfig b;
  if (!config.contains("bounds")) return b;
  const json& j = config.at("bounds");
  check_keys(j, "bounds",
             {"group_sizes", "gammas", "mu_offsets", "mu_absolute", "n_groups",
              "max_enum_group_size", "threshold_grid", "seed"});
  b.group_sizes = take<std::vector<int>>(j, "group_sizes", b.group_sizes);
  b.gammas = take<std::vector<double>>(j, "gammas", b.gammas);
  b.mu_offsets = take<std::vector<double>>(j, "mu_offsets", b.mu_offsets);
  b.mu_absolute = take<std::vector<double>>(j, "mu_absolute", b.mu_absolute);
  b.n_groups = take<long>(j, "n_groups", b.n_groups);
  b.max_enum_group_size =
      take<int>(j, "max_enum_group_size", b.max_enum_group_size);
  b.threshold_grid = take<int>(j, "threshold_grid", b.threshold_grid);
  b.seed = take<uint64_t>(j, "seed", b.seed);
  return b;
}

GradcheckConfig parse_gradcheck_config(const json& config) {
  GradcheckConfig g;
  if (!config.contains("gradcheck")) return g;
  const json& j = config.at("gradcheck");
  check_keys(j, "gradcheck", {"instances", "seed", "fd_step", "tolerance"});
  g.instances = take<int>(j, "instances", g.instances);
  g.seed = take<uint64_t>(j, "seed", g.seed);
  g.fd_step = take<double>(j, "fd_step", g.fd_step);
  g.tolerance = take<double>(j, "tolerance", g.tolerance);
  return g;
}

EvalConfig parse_eval_config(const json& config) {
  EvalConfig e;
  if (!config.contains("eval")) return e;
  const json& j = config.at("eval");
  check_keys(j, "eval", {"samples", "temperature", "seed"});
  e.samples = take<int>(j, "samples", e.samples);
  e.temperature = take<double>(j, "temperature", e.temperature);
  e.seed = take<uint64_t>(j, "seed", e.seed);
  return e;
}

}  // namespace hapolab
