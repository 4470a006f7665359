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

}  // namespace

TEST_CASE("sft objective: uniform policy scores log(1/4) per token") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 3;
  Trajectory demo;
  demo.prompt = 0;
  demo.tokens = {1, 2, 3};
  demo.is_teacher = true;
  Objective obj = sft_objective(params, {demo});
  CHECK(obj.value == doctest::Approx(std::log(0.25)).epsilon(1e-14));
}

TEST_CASE("sft objective: ascent drives the demo probability to one") {
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  Trajectory demo;
  demo.prompt = 0;
  demo.tokens = {2, 0};
  demo.is_teacher = true;
  for (int it = 0; it < 4000; ++it) {
    Objective obj = sft_objective(params, {demo});
    apply_update(params, obj.grad, 1.0);
  }
  CHECK(sequence_probability(params, 0, demo.tokens) > 0.99);
  CHECK(sft_objective(params, {demo}).value > -0.01);  // per-token loglik -> 0
}

TEST_CASE("sft gradient matches finite differences") {
  Rng rng(64);
  PolicyParams params;
  params.vocab_size = 4;
  params.context_order = 2;
  std::vector<Trajectory> demos;
  std::vector<ContextKey> contexts;
  for (PromptId p = 0; p < 2; ++p) {
    Trajectory d;
    d.prompt = p;
    d.tokens = {static_cast<Token>(uniform_int(rng, 4)),
                static_cast<Token>(uniform_int(rng, 4))};
    d.is_teacher = true;
    for (int t = 0; t < 2; ++t) {
      const ContextKey ctx = context_at(p, d.tokens, t, 2);
      contexts.push_back(ctx);
      for (auto& v : params.row(ctx)) v = (uniform01(rng) - 0.5) * 3.0;
    }
    demos.push_back(std::move(d));
  }
  Objective obj = sft_objective(params, demos);
  GradTable fd = finite_difference(
      [&](const PolicyParams& p) { return sft_objective(p, demos).value; },
      params, contexts, 1e-5);
  CHECK(max_entry_diff(obj.grad, fd) < 1e-6);
}

TEST_CASE("static mix equals the gated objective when the gate always opens") {
  const TaskSpec task = make_lock_task(5, 3, 2, 1, 17);
  PolicyParams params;
  params.vocab_size = 5;
  params.context_order = 2;
  Rng rng(8);
  std::vector<Group> rolled;
  for (PromptId p : task.prompts) {
    rolled.push_back(rollout_group(params, task, p, 4, rng));
  }

  // Gated path with a threshold above the max confidence (1+N)/(2+N).
  std::vector<Group> gated = rolled;
  GateConfig gate = GateConfig::constant(0.9);  // N=4: c <= 5/6 < 0.9
  gate_and_inject(gated, task, gate, 0);
  for (Group& g : gated) {
    REQUIRE(g.injected);
    compute_advantages(g);
  }
  Objective via_gate =
      hapo_batch_objective(params, gated, ShapingConfig{}, 0.2);

  // Static mixture with matched lambda/shaping.
  std::vector<Group> mixed = rolled;
  BaselineConfig config;
  config.method = Method::kStaticMix;
  config.lambda_mix = 1.0;
  config.use_shaping = true;
  Objective via_static = static_mix_objective(
      params, mixed, task, config, ShapingConfig{}, 0.2, AdvantageOptions{});

  CHECK(std::abs(via_gate.value - via_static.value) <= 1e-12);
  CHECK(max_entry_diff(via_gate.grad, via_static.grad) <= 1e-12);
}

TEST_CASE("static mix: teacher count equals the group count") {
  const TaskSpec task = make_lock_task(6, 4, 3, 1, 12);
  PolicyParams params;
  params.vocab_size = 6;
  params.context_order = 3;
  Rng rng(3);
  std::vector<Group> groups;
  for (PromptId p : task.prompts) {
    groups.push_back(rollout_group(params, task, p, 4, rng));
  }
  BaselineConfig config;
  config.method = Method::kStaticMix;
  BatchStats stats;
  std::vector<GateDecision> decisions;
  static_mix_objective(params, groups, task, config, ShapingConfig{}, 0.2,
                       AdvantageOptions{}, &stats, &decisions);
  CHECK(stats.teacher_trajectories == 4);
  CHECK(decisions.size() == 4);
  for (const auto& d : decisions) CHECK(d.opened);
  for (const Group& g : groups) {
    CHECK(g.injected);
    int teachers = 0;
    for (const auto& t : g.trajectories) teachers += t.is_teacher ? 1 : 0;
    CHECK(teachers == 1);
  }
}

TEST_CASE("static mix with lambda 0: surrogate only, teacher still in stats") {
  const TaskSpec task = make_lock_task(16, 2, 4, 1, 9);  // all-fail rollouts
  PolicyParams params;
  params.vocab_size = 16;
  params.context_order = 4;
  Rng rng(5);
  std::vector<Group> groups;
  for (PromptId p : task.prompts) {
    groups.push_back(rollout_group(params, task, p, 4, rng));
  }
  BaselineConfig config;
  config.method = Method::kStaticMix;
  config.lambda_mix = 0.0;
  BatchStats stats;
  Objective obj = static_mix_objective(params, groups, task, config,
                                       ShapingConfig{}, 0.2,
                                       AdvantageOptions{}, &stats);
  CHECK(stats.teacher_objective == 0.0);
  // The injected teacher reward still shifts the group statistics, so the
  // failed members carry negative advantages and a live gradient.
  CHECK_FALSE(obj.grad.empty_or_zero());
  for (const Group& g : groups) {
    for (int j = 0; j < g.n(); ++j) {
      if (!g.trajectories[static_cast<size_t>(j)].is_teacher) {
        CHECK(g.advantages[static_cast<size_t>(j)] < 0.0);
      }
    }
  }
}

TEST_CASE("plain-likelihood static mix differs from the shaped one") {
  const TaskSpec task = make_lock_task(5, 2, 2, 1, 23);
  PolicyParams params;
  params.vocab_size = 5;
  params.context_order = 2;
  Rng rng(7);
  std::vector<Group> a_groups;
  for (PromptId p : task.prompts) {
    a_groups.push_back(rollout_group(params, task, p, 4, rng));
  }
  std::vector<Group> b_groups = a_groups;

  BaselineConfig shaped;
  shaped.method = Method::kStaticMix;
  shaped.use_shaping = true;
  BaselineConfig plain;
  plain.method = Method::kStaticMix;
  plain.use_shaping = false;
  Objective oa = static_mix_objective(params, a_groups, task, shaped,
                                      ShapingConfig{}, 0.2, AdvantageOptions{});
  Objective ob = static_mix_objective(params, b_groups, task, plain,
                                      ShapingConfig{}, 0.2, AdvantageOptions{});
  CHECK(oa.value != ob.value);
}

TEST_CASE("method name round-trip") {
  for (const char* name :
       {"sft", "grpo", "sft_then_rl", "static_mix", "hapo"}) {
    CHECK(method_to_string(method_from_string(name)) == name);
  }
  CHECK_THROWS_AS(method_from_string("ppo"), ConfigError);
}
