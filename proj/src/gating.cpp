#include "hapolab/gating.hpp"

#include <cmath>

namespace hapolab {

GateConfig GateConfig::constant(double g) {
  GateConfig c;
  c.schedule = Schedule::kConstant;
  c.gamma = g;
  return c;
}

GateConfig GateConfig::step(double g0, double g1, long switch_at) {
  GateConfig c;
  c.schedule = Schedule::kStep;
  c.gamma0 = g0;
  c.gamma1 = g1;
  c.switch_step = switch_at;
  return c;
}

GateConfig GateConfig::sigmoid(double gmin, double gmax, double mid,
                               double slp) {
  GateConfig c;
  c.schedule = Schedule::kSigmoid;
  c.gamma_min = gmin;
  c.gamma_max = gmax;
  c.midpoint = mid;
  c.slope = slp;
  return c;
}

namespace {
bool in_unit_interval(double g) { return g > 0.0 && g < 1.0; }
}  // namespace

void GateConfig::validate() const {
  switch (schedule) {
    case Schedule::kConstant:
      if (!in_unit_interval(gamma)) {
        throw ConfigError("gate: gamma must lie strictly inside (0,1)");
      }
      break;
    case Schedule::kStep:
      if (!in_unit_interval(gamma0) || !in_unit_interval(gamma1)) {
        throw ConfigError("gate: step gammas must lie strictly inside (0,1)");
      }
      if (switch_step < 0) throw ConfigError("gate: switch_step must be >= 0");
      break;
    case Schedule::kSigmoid:
      if (!in_unit_interval(gamma_min) || !in_unit_interval(gamma_max)) {
        throw ConfigError("gate: sigmoid gammas must lie strictly inside (0,1)");
      }
      if (slope <= 0.0) throw ConfigError("gate: sigmoid slope must be > 0");
      break;
  }
}

double confidence_score(int successes, int n) {
  return confidence_score(successes, n, 1.0, 1.0);
}

double confidence_score(int successes, int n, double prior_alpha,
                        double prior_beta) {
  if (n < 0 || successes < 0 || successes > n) {
    throw InputError("confidence_score: successes out of [0, N]");
  }
  if (prior_alpha <= 0.0 || prior_beta <= 0.0) {
    throw InputError("confidence_score: prior must be positive");
  }
  return (prior_alpha + successes) / (prior_alpha + prior_beta + n);
}

double threshold_at(const GateConfig& config, long step) {
  if (step < 0) throw InputError("threshold_at: step must be >= 0");
  switch (config.schedule) {
    case GateConfig::Schedule::kConstant:
      return config.gamma;
    case GateConfig::Schedule::kStep:
      return step < config.switch_step ? config.gamma0 : config.gamma1;
    case GateConfig::Schedule::kSigmoid: {
      const double z =
          (static_cast<double>(step) - config.midpoint) / config.slope;
      const double sig = 1.0 / (1.0 + std::exp(-z));
      return config.gamma_min + (config.gamma_max - config.gamma_min) * sig;
    }
  }
  throw StateError("threshold_at: unreachable");
}

void ssi_transform(Group& group, Trajectory teacher,
                   GateOptions::TieBreak tie_break) {
  if (!teacher.is_teacher) {
    throw InputError("ssi_transform: trajectory is not a teacher sample");
  }
  if (teacher.prompt != group.prompt) {
    throw InputError("ssi_transform: teacher sample for a different prompt");
  }
  if (group.n() == 0) throw StateError("ssi_transform: empty group");

  // Worst member: argmin reward. Binary rewards tie constantly, so the
  // tie-break is part of the contract: lowest index, or the longest failed
  // member for the ablation variant.
  int worst = 0;
  for (int j = 1; j < group.n(); ++j) {
    const auto& tj = group.trajectories[static_cast<size_t>(j)];
    const auto& tw = group.trajectories[static_cast<size_t>(worst)];
    if (tj.reward < tw.reward) {
      worst = j;
    } else if (tj.reward == tw.reward &&
               tie_break == GateOptions::TieBreak::kLongestFailed &&
               tj.tokens.size() > tw.tokens.size()) {
      worst = j;
    }
  }
  group.replaced_original = group.trajectories[static_cast<size_t>(worst)];
  group.replaced_index = worst;
  group.trajectories[static_cast<size_t>(worst)] = std::move(teacher);
  group.injected = true;
  group.recount_successes();
}

std::vector<GateDecision> gate_and_inject(std::vector<Group>& groups,
                                          const TaskSpec& task,
                                          const GateConfig& config, long step,
                                          const GateOptions& opts, Rng* rng) {
  const double gamma = threshold_at(config, step);
  std::vector<GateDecision> decisions;
  decisions.reserve(groups.size());
  for (size_t i = 0; i < groups.size(); ++i) {
    Group& group = groups[i];
    const int n = group.n();
    const int s = group.success_count;
    const double mean_score =
        confidence_score(s, n, opts.prior_alpha, opts.prior_beta);
    double score = mean_score;
    if (opts.posterior_draw) {
      if (rng == nullptr) {
        throw InputError("gate_and_inject: posterior_draw needs an RNG");
      }
      // Ablation: act on a draw from Beta(alpha+S, beta+N-S) rather than
      // its mean. Integer-parameter draws keep this exactly reproducible.
      score = beta_sample_int(*rng, static_cast<int>(opts.prior_alpha) + s,
                              static_cast<int>(opts.prior_beta) + n - s);
    }
    group.confidence = mean_score;

    GateDecision d;
    d.group_index = static_cast<int>(i);
    d.prompt = group.prompt;
    d.successes = s;
    d.confidence = score;
    d.threshold = gamma;
    d.opened = score < gamma;  // strict: equality keeps the gate closed
    if (d.opened) {
      ssi_transform(group, teacher_demo(task, group.prompt), opts.tie_break);
      d.replaced_index = group.replaced_index;
    }
    decisions.push_back(d);
  }
  return decisions;
}

}  // namespace hapolab
