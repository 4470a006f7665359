#include <doctest.h>

#include <cmath>

#include "hapolab/grpo.hpp"

using namespace hapolab;

namespace {

Group group_with_rewards(const std::vector<int>& rewards) {
  Group g;
  g.prompt = 0;
  for (int r : rewards) {
    Trajectory t;
    t.prompt = 0;
    t.tokens = {0};
    t.behavior_logps = {std::log(0.25)};
    t.reward = r;
    g.trajectories.push_back(std::move(t));
  }
  g.recount_successes();
  return g;
}

// Independent oracle: group-baseline policy gradient computed straight from
// the raw logit rows, with no calls into the gradient path under test.
GradTable reinforce_oracle(const PolicyParams& params,
                           const std::vector<Group>& groups) {
  GradTable g;
  g.vocab_size = params.vocab_size;
  for (const Group& group : groups) {
    for (int j = 0; j < group.n(); ++j) {
      const Trajectory& traj = group.trajectories[static_cast<size_t>(j)];
      const double a = group.advantages[static_cast<size_t>(j)];
      for (int t = 0; t < static_cast<int>(traj.tokens.size()); ++t) {
        const ContextKey ctx =
            context_at(traj.prompt, traj.tokens, t, params.context_order);
        // softmax from raw logits
        std::vector<double> row(static_cast<size_t>(params.vocab_size), 0.0);
        if (const LogitRow* r = params.find_row(ctx)) row = *r;
        double m = row[0];
        for (double v : row) m = std::max(m, v);
        double z = 0.0;
        for (double v : row) z += std::exp(v - m);
        auto& dst = g.row(ctx);
        for (int v = 0; v < params.vocab_size; ++v) {
          const double p = std::exp(row[static_cast<size_t>(v)] - m) / z;
          dst[static_cast<size_t>(v)] +=
              a * ((v == traj.tokens[static_cast<size_t>(t)] ? 1.0 : 0.0) - p);
        }
      }
    }
  }
  return g;
}

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

}  // namespace

TEST_CASE("advantages: one success out of four") {
  Group g = group_with_rewards({1, 0, 0, 0});
  compute_advantages(g);
  // oracle: direct normalization with the population std
  const double mean = 0.25;
  const double sd = std::sqrt((0.75 * 0.75 + 3 * 0.25 * 0.25) / 4.0);
  CHECK(g.advantages[0] == doctest::Approx(0.75 / sd).epsilon(1e-12));
  CHECK(g.advantages[1] == doctest::Approx(-0.25 / sd).epsilon(1e-12));
  CHECK(g.advantages[0] == doctest::Approx(1.7320508).epsilon(1e-6));
  CHECK(g.advantages[1] == doctest::Approx(-0.5773503).epsilon(1e-6));
  CHECK(mean == 0.25);
}

TEST_CASE("advantages: degenerate groups are all-zero") {
  Group zeros = group_with_rewards({0, 0, 0, 0});
  compute_advantages(zeros);
  for (double a : zeros.advantages) CHECK(a == 0.0);
  Group ones = group_with_rewards({1, 1, 1, 1});
  compute_advantages(ones);
  for (double a : ones.advantages) CHECK(a == 0.0);
}

TEST_CASE("advantages: normalization property over random reward vectors") {
  Rng rng(2024);
  int non_degenerate = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 2 + uniform_int(rng, 15);
    std::vector<int> rewards;
    for (int i = 0; i < n; ++i) rewards.push_back(uniform01(rng) < 0.5);
    Group g = group_with_rewards(rewards);
    compute_advantages(g);
    const bool degenerate =
        g.success_count == 0 || g.success_count == g.n();
    if (degenerate) {
      for (double a : g.advantages) CHECK(a == 0.0);
      continue;
    }
    ++non_degenerate;
    double mean = 0.0;
    for (double a : g.advantages) mean += a;
    mean /= n;
    double var = 0.0;
    for (double a : g.advantages) var += (a - mean) * (a - mean);
    var /= n;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
  }
  CHECK(non_degenerate > 500);
}

TEST_CASE("advantages: sample-std option changes the scale only") {
  Group g = group_with_rewards({1, 0, 0, 0});
  AdvantageOptions opts;
  opts.sample_std = true;
  compute_advantages(g, opts);
  const double sd = std::sqrt((0.75 * 0.75 + 3 * 0.25 * 0.25) / 3.0);
  CHECK(g.advantages[0] == doctest::Approx(0.75 / sd).epsilon(1e-12));
}

TEST_CASE("rollout_group: counts successes, leaves advantages unset") {
  TaskSpec task = make_lock_task(2, 1, 1, 2, 4);  // every sample succeeds
  PolicyParams params;
  params.vocab_size = 2;
  params.context_order = 1;
  Rng rng(5);
  Group g = rollout_group(params, task, 0, 6, rng);
  CHECK(g.n() == 6);
  CHECK(g.success_count == 6);
  CHECK_FALSE(g.has_advantages());
  CHECK_FALSE(g.injected);
  CHECK_THROWS_AS(rollout_group(params, task, 0, 1, rng), InputError);
}

TEST_CASE("rollout_group: sparse task gives the all-fail group") {
  TaskSpec task = make_lock_task(16, 1, 6, 1, 77);
  PolicyParams params;
  params.vocab_size = 16;
  params.context_order = 6;
  // P(any success) <= N * 16^-6 ~ 5e-7 per group; three seeds stay at zero.
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Rng rng(seed);
    Group g = rollout_group(params, task, 0, 8, rng);
    CHECK(g.success_count == 0);
  }
}

TEST_CASE("rollout_group: fixed seed reproduces the group") {
  TaskSpec task = make_lock_task(6, 2, 3, 1, 19);
  PolicyParams params;
  params.vocab_size = 6;
  params.context_order = 3;
  Rng a(9), b(9);
  Group ga = rollout_group(params, task, 1, 5, a);
  Group gb = rollout_group(params, task, 1, 5, b);
  for (int j = 0; j < 5; ++j) {
    CHECK(ga.trajectories[static_cast<size_t>(j)].tokens ==
          gb.trajectories[static_cast<size_t>(j)].tokens);
  }
}

TEST_CASE("clip surrogate: single-token unclipped branch") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory traj;
  traj.prompt = 0;
  traj.tokens = {1};
  // ratio r = exp(logp_new - logp_old) = 0.5 by construction
  const ContextKey ctx = context_at(0, traj.tokens, 0, 2);
  const double lp_new = logp(params, ctx, 1);
  traj.behavior_logps = {lp_new + std::log(2.0)};
  GradTable grad;
  grad.vocab_size = 4;
  const double obj = clip_surrogate_trajectory(params, traj, 1.0, 0.2, grad);
  CHECK(obj == doctest::Approx(0.5).epsilon(1e-12));  // min(0.5, 0.8) = 0.5
  CHECK_FALSE(grad.empty_or_zero());
}

TEST_CASE("clip surrogate: binding clip zeroes the token gradient") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory traj;
  traj.prompt = 0;
  traj.tokens = {1};
  const ContextKey ctx = context_at(0, traj.tokens, 0, 2);
  const double lp_new = logp(params, ctx, 1);
  traj.behavior_logps = {lp_new - std::log(1.5)};  // r = 1.5 > 1.2
  GradTable grad;
  grad.vocab_size = 4;
  const double obj = clip_surrogate_trajectory(params, traj, 1.0, 0.2, grad);
  CHECK(obj == doctest::Approx(1.2).epsilon(1e-12));  // clipped value
  CHECK(grad.empty_or_zero());
}

TEST_CASE("clip surrogate: clipping never increases the magnitude") {
  Rng rng(404);
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  for (int rep = 0; rep < 200; ++rep) {
    Trajectory traj;
    traj.prompt = 0;
    traj.tokens = {static_cast<Token>(uniform_int(rng, 4))};
    const ContextKey ctx = context_at(0, traj.tokens, 0, 2);
    const double lp_new = logp(params, ctx, traj.tokens[0]);
    const double log_ratio = (uniform01(rng) - 0.5) * 3.0;
    traj.behavior_logps = {lp_new - log_ratio};
    const double advantage = (uniform01(rng) - 0.5) * 4.0;
    GradTable grad;
    grad.vocab_size = 4;
    const double obj =
        clip_surrogate_trajectory(params, traj, advantage, 0.2, grad);
    const double unclipped = std::exp(log_ratio) * advantage;
    CHECK(obj <= unclipped + 1e-12);
    CHECK(std::abs(obj) <= std::abs(unclipped) + 1e-12);
  }
}

TEST_CASE("clip surrogate: token/logp length mismatch is an input error") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory traj;
  traj.prompt = 0;
  traj.tokens = {1, 2};
  traj.behavior_logps = {std::log(0.25)};
  GradTable grad;
  grad.vocab_size = 4;
  CHECK_THROWS_AS(clip_surrogate_trajectory(params, traj, 1.0, 0.2, grad),
                  InputError);
}

TEST_CASE("at the rollout point the surrogate is group-baseline REINFORCE") {
  TaskSpec task = make_lock_task(4, 2, 2, 2, 64);
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  // Randomize a few reachable rows, then roll out on the same params.
  Rng rng(15);
  for (PromptId p : task.prompts) {
    for (auto& v : params.row(context_at(p, {}, 0, 2))) {
      v = (uniform01(rng) - 0.5) * 2.0;
    }
  }
  std::vector<Group> groups;
  for (PromptId p : task.prompts) {
    groups.push_back(rollout_group(params, task, p, 8, rng));
  }
  for (Group& g : groups) compute_advantages(g);

  Objective obj = grpo_batch_objective(params, groups, 0.2);

  // ratio == 1 everywhere: objective is sum_j A_j * |tau_j| / total tokens
  double expected = 0.0;
  long tokens = 0;
  for (const Group& g : groups) {
    for (int j = 0; j < g.n(); ++j) {
      expected += g.advantages[static_cast<size_t>(j)] *
                  static_cast<double>(
                      g.trajectories[static_cast<size_t>(j)].tokens.size());
      tokens +=
          static_cast<long>(g.trajectories[static_cast<size_t>(j)].tokens.size());
    }
  }
  expected /= static_cast<double>(tokens);
  CHECK(obj.value == doctest::Approx(expected).epsilon(1e-12));

  GradTable oracle = reinforce_oracle(params, groups);
  oracle.scale(1.0 / static_cast<double>(tokens));
  CHECK(max_entry_diff(obj.grad, oracle) < 1e-12);
}

TEST_CASE("degenerate batch produces exactly zero surrogate gradient") {
  TaskSpec task = make_lock_task(16, 2, 6, 1, 5);  // all-fail under uniform
  PolicyParams params;
  params.vocab_size = 16;
  params.context_order = 6;
  Rng rng(2);
  std::vector<Group> groups;
  for (PromptId p : task.prompts) {
    groups.push_back(rollout_group(params, task, p, 8, rng));
  }
  for (Group& g : groups) {
    REQUIRE(g.success_count == 0);
    compute_advantages(g);
  }
  Objective obj = grpo_batch_objective(params, groups, 0.2);
  CHECK(obj.value == 0.0);
  CHECK(obj.grad.empty_or_zero());
  CHECK(obj.grad.norm() == 0.0);
}
