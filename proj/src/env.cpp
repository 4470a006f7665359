#include "hapolab/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hapolab {

namespace {

bool tokens_valid(const TokenSeq& seq, int vocab_size) {
  return std::all_of(seq.begin(), seq.end(), [&](Token t) {
    return t >= 0 && t < vocab_size;
  });
}

}  // namespace

void TaskSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("task: vocab_size must be >= 2");
  if (max_len < 1) throw ConfigError("task: max_len must be >= 1");
  if (prompts.empty()) throw ConfigError("task: no prompts");
  if (eos_token && (*eos_token < 0 || *eos_token >= vocab_size)) {
    throw ConfigError("task: eos_token outside the vocabulary");
  }
  for (PromptId p : prompts) {
    auto it = accepted.find(p);
    if (it == accepted.end() || it->second.empty()) {
      throw ConfigError("task: prompt " + std::to_string(p) +
                        " has no accepted sequences");
    }
    for (const TokenSeq& seq : it->second) {
      if (seq.empty()) {
        throw ConfigError("task: empty accepted sequence for prompt " +
                          std::to_string(p));
      }
      if (static_cast<int>(seq.size()) > max_len) {
        throw ConfigError("task: accepted sequence longer than max_len");
      }
      if (!tokens_valid(seq, vocab_size)) {
        throw ConfigError("task: accepted sequence token out of vocabulary");
      }
    }
    auto demo = teacher_demos.find(p);
    if (demo != teacher_demos.end()) {
      if (!tokens_valid(demo->second, vocab_size)) {
        throw ConfigError("task: teacher demo token out of vocabulary");
      }
      if (verified_teacher) {
        const auto& acc = it->second;
        if (std::find(acc.begin(), acc.end(), demo->second) == acc.end()) {
          throw ConfigError(
              "task: teacher demo for prompt " + std::to_string(p) +
              " is not an accepted sequence (verified-teacher mode)");
        }
      }
    }
  }
}

int verify(const TaskSpec& task, PromptId prompt, const TokenSeq& tokens) {
  auto it = task.accepted.find(prompt);
  if (it == task.accepted.end()) {
    throw InputError("verify: unknown prompt " + std::to_string(prompt));
  }
  const auto& acc = it->second;
  return std::find(acc.begin(), acc.end(), tokens) != acc.end() ? 1 : 0;
}

Trajectory teacher_demo(const TaskSpec& task, PromptId prompt) {
  auto it = task.teacher_demos.find(prompt);
  if (it == task.teacher_demos.end()) {
    throw ConfigError("teacher_demo: no demonstration registered for prompt " +
                      std::to_string(prompt));
  }
  Trajectory traj;
  traj.prompt = prompt;
  traj.tokens = it->second;
  traj.is_teacher = true;
  traj.reward = verify(task, prompt, traj.tokens);
  return traj;
}

TaskSpec make_lock_task(int vocab_size, int n_prompts, int seq_len,
                        int n_solutions_per_prompt, uint64_t seed) {
  if (vocab_size < 2) throw ConfigError("make_lock_task: vocab_size >= 2");
  if (seq_len < 1) throw ConfigError("make_lock_task: seq_len >= 1");
  if (n_prompts < 1) throw ConfigError("make_lock_task: n_prompts >= 1");
  if (n_solutions_per_prompt < 1) {
    throw ConfigError("make_lock_task: n_solutions_per_prompt >= 1");
  }
  // Feasibility: need n_solutions distinct sequences out of vocab^len.
  double space = std::pow(static_cast<double>(vocab_size),
                          static_cast<double>(seq_len));
  if (static_cast<double>(n_solutions_per_prompt) > space) {
    throw ConfigError("make_lock_task: more solutions requested than vocab^len");
  }

  TaskSpec task;
  task.family = "lock";
  task.vocab_size = vocab_size;
  task.max_len = seq_len;
  Rng rng(seed);
  for (int p = 0; p < n_prompts; ++p) {
    task.prompts.push_back(p);
    std::set<TokenSeq> solutions;
    while (static_cast<int>(solutions.size()) < n_solutions_per_prompt) {
      TokenSeq seq(static_cast<size_t>(seq_len));
      for (auto& t : seq) t = uniform_int(rng, vocab_size);
      solutions.insert(std::move(seq));
    }
    task.accepted[p] = std::vector<TokenSeq>(solutions.begin(),
                                             solutions.end());
    // The teacher always demonstrates the same single solution, so multi-
    // solution tasks have a distributionally narrow (suboptimal) teacher.
    task.teacher_demos[p] = task.accepted[p].front();
  }
  task.validate();
  return task;
}

TaskSpec make_chain_task(int vocab_size, int n_prompts, int min_len,
                         int max_len, uint64_t seed) {
  if (vocab_size < 3) throw ConfigError("make_chain_task: vocab_size >= 3");
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError("make_chain_task: need 1 <= min_len <= max_len");
  }

  TaskSpec task;
  task.family = "chain";
  task.vocab_size = vocab_size;
  task.max_len = max_len + 1;  // room for the EOS token
  const Token eos = vocab_size - 1;
  task.eos_token = eos;
  Rng rng(seed);
  for (int p = 0; p < n_prompts; ++p) {
    task.prompts.push_back(p);
    const int body = min_len + uniform_int(rng, max_len - min_len + 1);
    TokenSeq seq(static_cast<size_t>(body));
    for (auto& t : seq) t = uniform_int(rng, vocab_size - 1);  // non-EOS body
    seq.push_back(eos);
    task.accepted[p] = {seq};
    task.teacher_demos[p] = seq;
  }
  task.validate();
  return task;
}

TaskSpec with_unverified_demo(TaskSpec task, PromptId prompt, TokenSeq demo) {
  if (std::find(task.prompts.begin(), task.prompts.end(), prompt) ==
      task.prompts.end()) {
    throw InputError("with_unverified_demo: unknown prompt");
  }
  task.teacher_demos[prompt] = std::move(demo);
  task.verified_teacher = false;
  task.validate();
  return task;
}

std::string task_to_json(const TaskSpec& task) {
  nlohmann::ordered_json j;
  j["schema"] = "hapolab-task-v1";
  j["family"] = task.family;
  j["vocab_size"] = task.vocab_size;
  j["max_len"] = task.max_len;
  if (task.eos_token) {
    j["eos_token"] = *task.eos_token;
  } else {
    j["eos_token"] = nullptr;
  }
  j["verified_teacher"] = task.verified_teacher;
  j["prompts"] = task.prompts;
  nlohmann::ordered_json acc = nlohmann::ordered_json::object();
  for (const auto& [p, seqs] : task.accepted) acc[std::to_string(p)] = seqs;
  j["accepted"] = acc;
  nlohmann::ordered_json demos = nlohmann::ordered_json::object();
  for (const auto& [p, seq] : task.teacher_demos) demos[std::to_string(p)] = seq;
  j["teacher_demos"] = demos;
  return j.dump(2);
}

TaskSpec task_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task file: ") + e.what());
  }
  if (!j.contains("schema") || j["schema"] != "hapolab-task-v1") {
    throw ConfigError("task file: missing/unknown schema tag");
  }
  TaskSpec task;
  try {
    task.family = j.at("family").get<std::string>();
    task.vocab_size = j.at("vocab_size").get<int>();
    task.max_len = j.at("max_len").get<int>();
    if (!j.at("eos_token").is_null()) {
      task.eos_token = j.at("eos_token").get<Token>();
    }
    task.verified_teacher = j.at("verified_teacher").get<bool>();
    task.prompts = j.at("prompts").get<std::vector<PromptId>>();
    for (const auto& [key, value] : j.at("accepted").items()) {
      task.accepted[std::stoi(key)] = value.get<std::vector<TokenSeq>>();
    }
    for (const auto& [key, value] : j.at("teacher_demos").items()) {
      task.teacher_demos[std::stoi(key)] = value.get<TokenSeq>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task file: ") + e.what());
  }
  task.validate();
  return task;
}

void save_task(const TaskSpec& task, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("save_task: cannot open " + path);
  os << task_to_json(task) << "\n";
}

TaskSpec load_task(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("load_task: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return task_from_json(buf.str());
}

}  // namespace hapolab
