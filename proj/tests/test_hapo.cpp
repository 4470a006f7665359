#include <doctest.h>

#include <cmath>

#include "hapolab/baselines.hpp"
#include "hapolab/gradcheck.hpp"

using namespace hapolab;

namespace {

double max_entry_diff(const GradTable& a, const GradTable& b) {
  double diff = 0.0;
  auto scan = [&](const GradTable& l, const GradTable& r) {
    for (const auto& [key, row] : l.rows) {
      auto it = r.rows.find(key);
      for (size_t v = 0; v < row.size(); ++v) {
        const double other = it == r.rows.end() ? 0.0 : it->second[v];
        diff = std::max(diff, std::abs(row[v] - other));
      }
    }
  };
  scan(a, b);
  scan(b, a);
  return diff;
}

struct Setup {
  TaskSpec task;
  PolicyParams params;
  std::vector<Group> groups;
};

Setup rollout_setup(uint64_t seed, int vocab, int n_prompts, int len,
                    int n_solutions, int group_size, bool randomize) {
  Setup s;
  s.task = make_lock_task(vocab, n_prompts, len, n_solutions, seed);
  s.params.vocab_size = vocab;
  s.params.context_order = len;
  Rng rng(seed ^ 0xabcdef);
  if (randomize) {
    // Touch reachable rows by a warm rollout, then randomize them.
    std::vector<Group> warm;
    Rng wrng(seed + 1);
    for (PromptId p : s.task.prompts) {
      warm.push_back(rollout_group(s.params, s.task, p, group_size, wrng));
    }
    for (const Group& g : warm) {
      for (const Trajectory& t : g.trajectories) {
        for (int i = 0; i < static_cast<int>(t.tokens.size()); ++i) {
          auto& row = s.params.row(context_at(t.prompt, t.tokens, i, len));
          for (auto& v : row) v = (uniform01(rng) - 0.5) * 2.0;
        }
      }
    }
  }
  for (PromptId p : s.task.prompts) {
    s.groups.push_back(rollout_group(s.params, s.task, p, group_size, rng));
  }
  return s;
}

}  // namespace

TEST_CASE("teacher loss: shaping limits") {
  const ShapingConfig shaping;  // beta = 0.1, anneal on
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory demo;
  demo.prompt = 0;
  demo.tokens = {2};
  demo.is_teacher = true;
  demo.reward = 1;

  // p -> 1: the shaped pressure fades to beta/(1+beta)^2 * |grad p|.
  params.row(context_at(0, demo.tokens, 0, 2)) = {0.0, 0.0, 40.0, 0.0};
  GradTable g1;
  g1.vocab_size = 4;
  const double c = 0.0;  // anneal weight 1
  ShapingConfig no_anneal = shaping;
  no_anneal.confidence_anneal = false;
  teacher_loss(params, demo, c, no_anneal, g1);
  // |d f/d z_target| = beta/(p+beta)^2 * p(1-p): tiny because (1-p) ~ 0
  CHECK(g1.max_abs() < 1e-10);

  // p == beta: f = 0.5 exactly.
  PolicyParams q;
  q.vocab_size = 4;
  q.context_order = 2;
  // choose logits so softmax(target) == beta = 0.1: z = log(0.1), others
  // share 0.9: set three tokens at log(0.3)
  auto& row = q.row(context_at(0, demo.tokens, 0, 2));
  row = {std::log(0.3), std::log(0.3), std::log(0.1), std::log(0.3)};
  GradTable g2;
  g2.vocab_size = 4;
  const double val = teacher_loss(q, demo, 0.0, no_anneal, g2);
  CHECK(val == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("teacher loss: confidence anneal weights") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory demo;
  demo.prompt = 0;
  demo.tokens = {1, 2};
  demo.is_teacher = true;
  demo.reward = 1;
  ShapingConfig shaping;

  GradTable g_unweighted;
  g_unweighted.vocab_size = 4;
  ShapingConfig off = shaping;
  off.confidence_anneal = false;
  const double base = teacher_loss(params, demo, 0.5, off, g_unweighted);

  for (double c : {0.1, 0.7}) {
    GradTable g;
    g.vocab_size = 4;
    const double val = teacher_loss(params, demo, c, shaping, g);
    CHECK(val == doctest::Approx((1.0 - c) * base).epsilon(1e-12));
  }
}

TEST_CASE("teacher loss: rejects non-teacher trajectories") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory t;
  t.prompt = 0;
  t.tokens = {1};
  t.behavior_logps = {std::log(0.25)};
  GradTable g;
  g.vocab_size = 4;
  CHECK_THROWS_AS(teacher_loss(params, t, 0.5, ShapingConfig{}, g), InputError);
}

TEST_CASE("teacher gradient points along the demonstration likelihood") {
  // f is monotone increasing in p, so the shaped gradient must have a
  // non-negative inner product with the plain log-likelihood gradient.
  Rng rng(71);
  for (int rep = 0; rep < 25; ++rep) {
    PolicyParams params;
    params.vocab_size = 5;
    params.context_order = 3;
    Trajectory demo;
    demo.prompt = 0;
    demo.tokens = {static_cast<Token>(uniform_int(rng, 5)),
                   static_cast<Token>(uniform_int(rng, 5)),
                   static_cast<Token>(uniform_int(rng, 5))};
    demo.is_teacher = true;
    demo.reward = 1;
    for (int t = 0; t < 3; ++t) {
      auto& row = params.row(context_at(0, demo.tokens, t, 3));
      for (auto& v : row) v = (uniform01(rng) - 0.5) * 4.0;
    }
    ShapingConfig shaping;
    shaping.beta_shape = 0.05 + uniform01(rng);
    GradTable shaped;
    shaped.vocab_size = 5;
    teacher_loss(params, demo, uniform01(rng) * 0.9, shaping, shaped);

    GradTable loglik;
    loglik.vocab_size = 5;
    for (int t = 0; t < 3; ++t) {
      const ContextKey ctx = context_at(0, demo.tokens, t, 3);
      add_grad_logp(loglik, params, ctx, demo.tokens[static_cast<size_t>(t)],
                    1.0);
    }
    CHECK(dot(shaped, loglik) >= 0.0);
  }
}

TEST_CASE("batch objective: zero injections reduce to the on-policy objective") {
  for (uint64_t seed : {10ULL, 11ULL, 12ULL}) {
    Setup s = rollout_setup(seed, 5, 3, 2, 1, 6, /*randomize=*/true);
    // Gate that can never open: confidence >= 1/(2+N) > gamma.
    GateConfig gate = GateConfig::constant(1e-3);
    gate_and_inject(s.groups, s.task, gate, 0);
    for (Group& g : s.groups) compute_advantages(g);

    BatchStats stats;
    Objective hapo =
        hapo_batch_objective(s.params, s.groups, ShapingConfig{}, 0.2, &stats);
    Objective grpo = grpo_batch_objective(s.params, s.groups, 0.2);
    CHECK(std::abs(hapo.value - grpo.value) <= 1e-12);
    CHECK(max_entry_diff(hapo.grad, grpo.grad) <= 1e-12);
    CHECK(stats.teacher_trajectories == 0);
    CHECK(stats.teacher_token_share == 0.0);
  }
}

TEST_CASE("batch objective: teacher + failed groups compose the two branches") {
  // All-fail groups with forced injection: the gradient must be exactly the
  // shaped teacher gradients plus the surrogate on the failed members, and
  // the value must match a per-group recomputation with the standalone ops.
  Setup s = rollout_setup(21, 16, 2, 4, 1, 4, /*randomize=*/false);
  for (Group& g : s.groups) REQUIRE(g.success_count == 0);

  GateConfig gate = GateConfig::constant(0.8);
  gate_and_inject(s.groups, s.task, gate, 0);
  for (Group& g : s.groups) {
    REQUIRE(g.injected);
    compute_advantages(g);
  }
  ShapingConfig shaping;
  BatchStats stats;
  Objective obj =
      hapo_batch_objective(s.params, s.groups, shaping, 0.2, &stats);

  // oracle: compose the single-group operations by hand
  double expected_value = 0.0;
  long tokens = 0;
  GradTable expected;
  expected.vocab_size = s.params.vocab_size;
  for (const Group& g : s.groups) {
    for (int j = 0; j < g.n(); ++j) {
      const Trajectory& t = g.trajectories[static_cast<size_t>(j)];
      tokens += static_cast<long>(t.tokens.size());
      if (t.is_teacher) {
        expected_value +=
            teacher_loss(s.params, t, g.confidence, shaping, expected);
      } else {
        expected_value += clip_surrogate_trajectory(
            s.params, t, g.advantages[static_cast<size_t>(j)], 0.2, expected);
      }
    }
  }
  expected_value /= static_cast<double>(tokens);
  expected.scale(1.0 / static_cast<double>(tokens));
  CHECK(obj.value == doctest::Approx(expected_value).epsilon(1e-12));
  CHECK(max_entry_diff(obj.grad, expected) < 1e-12);
  CHECK(stats.teacher_trajectories == 2);
  CHECK(stats.teacher_tokens == 8);
}

TEST_CASE("batch objective: empty batch and ungated groups are errors") {
  std::vector<Group> empty;
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  CHECK_THROWS_AS(
      hapo_batch_objective(params, empty, ShapingConfig{}, 0.2), InputError);

  Setup s = rollout_setup(3, 4, 1, 2, 1, 4, false);
  // advantages missing
  CHECK_THROWS_AS(
      hapo_batch_objective(s.params, s.groups, ShapingConfig{}, 0.2),
      StateError);
}

TEST_CASE("denominator policy: teacher tokens can be excluded by flag") {
  Setup s = rollout_setup(33, 16, 1, 4, 1, 4, false);
  GateConfig gate = GateConfig::constant(0.8);
  gate_and_inject(s.groups, s.task, gate, 0);
  for (Group& g : s.groups) compute_advantages(g);

  BatchStats with_stats;
  Objective with = hapo_batch_objective(s.params, s.groups, ShapingConfig{},
                                        0.2, &with_stats);
  MixOptions mix;
  mix.count_teacher_tokens = false;
  BatchStats without_stats;
  Objective without = hapo_batch_objective(s.params, s.groups, ShapingConfig{},
                                           0.2, &without_stats, mix);
  CHECK(with_stats.total_tokens == 16);
  CHECK(without_stats.total_tokens == 12);
  // Same unnormalized sum, different denominators.
  CHECK(with.value * 16.0 == doctest::Approx(without.value * 12.0).epsilon(1e-12));
}

TEST_CASE("hapo batch gradient matches finite differences at the rollout point") {
  Setup s = rollout_setup(44, 4, 2, 2, 1, 4, /*randomize=*/true);
  GateConfig gate = GateConfig::constant(0.8);
  gate_and_inject(s.groups, s.task, gate, 0);
  for (Group& g : s.groups) compute_advantages(g);
  ShapingConfig shaping;
  Objective obj = hapo_batch_objective(s.params, s.groups, shaping, 0.2);

  // Perturb every context the batch touches.
  std::vector<ContextKey> contexts;
  for (const Group& g : s.groups) {
    for (const Trajectory& t : g.trajectories) {
      for (int i = 0; i < static_cast<int>(t.tokens.size()); ++i) {
        contexts.push_back(context_at(t.prompt, t.tokens, i, 2));
      }
    }
  }
  GradTable fd = finite_difference(
      [&](const PolicyParams& p) {
        return hapo_batch_objective(p, s.groups, shaping, 0.2).value;
      },
      s.params, contexts, 1e-5);
  CHECK(max_entry_diff(obj.grad, fd) < 1e-5);
}
