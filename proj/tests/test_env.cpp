#include <doctest.h>

#include <filesystem>

#include "hapolab/env.hpp"

using namespace hapolab;

namespace {

TaskSpec tiny_lock_task() {
  TaskSpec task;
  task.family = "lock";
  task.vocab_size = 6;
  task.max_len = 3;
  task.prompts = {0};
  task.accepted[0] = {{2, 5, 1}};
  task.teacher_demos[0] = {2, 5, 1};
  task.validate();
  return task;
}

}  // namespace

TEST_CASE("verify: exact match on the lock task") {
  TaskSpec task = tiny_lock_task();
  CHECK(verify(task, 0, {2, 5, 1}) == 1);
  CHECK(verify(task, 0, {2, 5, 0}) == 0);
  CHECK(verify(task, 0, {2, 5}) == 0);
  CHECK_THROWS_AS(verify(task, 7, {2, 5, 1}), InputError);
}

TEST_CASE("verify: membership over a two-solution accepted set") {
  TaskSpec task;
  task.vocab_size = 4;
  task.max_len = 2;
  task.prompts = {0};
  task.accepted[0] = {{1, 1}, {3, 3}};
  task.teacher_demos[0] = {1, 1};
  task.validate();
  // oracle: membership by enumerating the accepted set
  auto member = [&](const TokenSeq& s) {
    for (const auto& a : task.accepted[0]) {
      if (a == s) return 1;
    }
    return 0;
  };
  for (Token a = 0; a < 4; ++a) {
    for (Token b = 0; b < 4; ++b) {
      const TokenSeq seq{a, b};
      CHECK(verify(task, 0, seq) == member(seq));
    }
  }
  CHECK(verify(task, 0, {3, 3}) == 1);
}

TEST_CASE("teacher_demo wraps the registered demonstration") {
  TaskSpec task = tiny_lock_task();
  Trajectory demo = teacher_demo(task, 0);
  CHECK(demo.tokens == TokenSeq{2, 5, 1});
  CHECK(demo.is_teacher);
  CHECK(demo.reward == 1);
  CHECK(demo.behavior_logps.empty());
  CHECK_THROWS_AS(teacher_demo(task, 3), ConfigError);
}

TEST_CASE("teacher_demo on a multi-solution task still verifies") {
  TaskSpec task = make_lock_task(5, 2, 3, 2, 42);
  for (PromptId p : task.prompts) {
    Trajectory demo = teacher_demo(task, p);
    CHECK(demo.reward == 1);
    CHECK(demo.tokens == task.accepted[p].front());
  }
}

TEST_CASE("unverified-teacher mode records the flag and a zero reward") {
  TaskSpec task = tiny_lock_task();
  TaskSpec ablated = with_unverified_demo(task, 0, {0, 0, 0});
  CHECK_FALSE(ablated.verified_teacher);
  Trajectory demo = teacher_demo(ablated, 0);
  CHECK(demo.reward == 0);
  CHECK(demo.is_teacher);
}

TEST_CASE("verified-teacher mode rejects a non-accepted demo") {
  TaskSpec task = tiny_lock_task();
  task.teacher_demos[0] = {0, 0, 0};
  CHECK_THROWS_AS(task.validate(), ConfigError);
}

TEST_CASE("make_lock_task: structure and determinism") {
  TaskSpec a = make_lock_task(8, 4, 4, 1, 7);
  TaskSpec b = make_lock_task(8, 4, 4, 1, 7);
  CHECK(a.prompts == b.prompts);
  CHECK(a.accepted == b.accepted);
  CHECK(a.teacher_demos == b.teacher_demos);
  CHECK(a.vocab_size == 8);
  CHECK(a.max_len == 4);
  for (PromptId p : a.prompts) {
    CHECK(a.accepted[p].size() == 1);
    CHECK(verify(a, p, a.teacher_demos[p]) == 1);
  }
  TaskSpec c = make_lock_task(8, 4, 4, 1, 8);
  CHECK(a.accepted != c.accepted);  // different seed, different locks
}

TEST_CASE("make_lock_task: degenerate full-coverage task accepts everything") {
  TaskSpec task = make_lock_task(2, 1, 1, 2, 3);
  CHECK(verify(task, 0, {0}) == 1);
  CHECK(verify(task, 0, {1}) == 1);
}

TEST_CASE("make_lock_task: infeasible solution count is rejected") {
  CHECK_THROWS_AS(make_lock_task(2, 1, 2, 5, 1), ConfigError);
}

TEST_CASE("lock task: uniform-random success rate matches the counting rate") {
  // vocab^len = 8^4 = 4096 states, one solution -> p = 2.44e-4
  TaskSpec task = make_lock_task(8, 1, 4, 1, 11);
  Rng rng(123);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    TokenSeq seq(4);
    for (auto& t : seq) t = uniform_int(rng, 8);
    hits += verify(task, 0, seq);
  }
  const double p = 1.0 / 4096.0;
  const double se = std::sqrt(p * (1.0 - p) * n);
  CHECK(std::abs(hits - n * p) <= 3.0 * se);
}

TEST_CASE("make_chain_task: EOS-terminated variable-length demos") {
  TaskSpec task = make_chain_task(6, 8, 2, 5, 21);
  REQUIRE(task.eos_token.has_value());
  CHECK(*task.eos_token == 5);
  bool saw_different_lengths = false;
  size_t first_len = task.teacher_demos[0].size();
  for (PromptId p : task.prompts) {
    const TokenSeq& demo = task.teacher_demos[p];
    CHECK(demo.back() == 5);
    CHECK(demo.size() >= 3);   // body >= 2 plus EOS
    CHECK(demo.size() <= 6);
    CHECK(verify(task, p, demo) == 1);
    if (demo.size() != first_len) saw_different_lengths = true;
  }
  CHECK(saw_different_lengths);
}

TEST_CASE("task serialization round-trips") {
  TaskSpec task = make_lock_task(7, 3, 3, 2, 99);
  const std::string path =
      (std::filesystem::temp_directory_path() / "hapolab_task_rt.json")
          .string();
  save_task(task, path);
  TaskSpec loaded = load_task(path);
  CHECK(loaded.family == task.family);
  CHECK(loaded.vocab_size == task.vocab_size);
  CHECK(loaded.max_len == task.max_len);
  CHECK(loaded.verified_teacher == task.verified_teacher);
  CHECK(loaded.prompts == task.prompts);
  CHECK(loaded.accepted == task.accepted);
  CHECK(loaded.teacher_demos == task.teacher_demos);
  CHECK(loaded.eos_token == task.eos_token);
  std::filesystem::remove(path);

  TaskSpec chain = make_chain_task(5, 2, 1, 3, 5);
  save_task(chain, path);
  TaskSpec chain_loaded = load_task(path);
  CHECK(chain_loaded.eos_token == chain.eos_token);
  CHECK(chain_loaded.accepted == chain.accepted);
  std::filesystem::remove(path);
}
