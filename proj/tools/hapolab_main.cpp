// hapolab: a desk-scale lab for gated teacher-injection policy optimization
// on synthetic verifiable tasks. Subcommands: train, compare, check-bounds,
// gradcheck, eval.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hapolab/config.hpp"
#include "hapolab/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Exit codes: 0 ok, 1 unexpected, 2 config error, 3 check/assertion failure,
// 4 numeric abort.
constexpr int kOk = 0;
constexpr int kGenericError = 1;
constexpr int kConfigError = 2;
constexpr int kCheckFailure = 3;
constexpr int kNumericAbort = 4;

json load_with_overrides(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  json j = hapolab::load_config_file(config_path);
  for (const auto& o : overrides) hapolab::apply_override(j, o);
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw hapolab::ConfigError("cannot open " + path);
  os << text;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& resume_from) {
  const json raw = load_with_overrides(config_path, overrides);
  hapolab::ExperimentConfig cfg = hapolab::parse_experiment_config(raw);
  const std::string out_dir = hapolab::resolve_output_dir(cfg.out_dir);
  fs::create_directories(out_dir);

  // Provenance echo: the resolved config (all defaults materialized).
  const std::string resolved = cfg.resolved.dump(2);
  write_text(out_dir + "/resolved_config.json", resolved + "\n");
  std::cout << resolved << std::endl;

  const hapolab::TaskSpec task = cfg.task.build();
  hapolab::save_task(task, out_dir + "/task.json");

  hapolab::RunMetrics run;
  hapolab::TrainState final_state;
  if (resume_from.empty()) {
    run = hapolab::run_method(cfg.method, task, cfg.train, out_dir,
                              &final_state, cfg.log_trajectories);
  } else {
    hapolab::TrainState state = hapolab::load_checkpoint(resume_from);
    run = hapolab::resume_method(cfg.method, task, cfg.train, std::move(state),
                                 out_dir, &final_state, cfg.log_trajectories);
  }

  std::cout << "run complete: steps=" << run.summary.steps
            << " final_quartile_reward=" << run.summary.final_window_reward
            << " total_injections=" << run.summary.total_injections
            << " max_grad_norm=" << run.summary.max_grad_norm << std::endl;
  return kOk;
}

struct CellResult {
  std::string label;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double final_window_reward = 0.0;
  double eval_success = 0.0;
  double non_teacher_prob = 0.0;
  double teacher_prob = 0.0;
  long total_injections = 0;
  double first_quartile_injection_rate = 0.0;
  double final_quartile_injection_rate = 0.0;
  double window_cosine = 0.0;
};

CellResult load_cell_summary(const std::string& path) {
  std::ifstream is(path);
  json j;
  is >> j;
  CellResult r;
  r.label = j.at("label").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.ok = true;
  r.final_window_reward = j.at("final_window_reward").get<double>();
  r.eval_success = j.at("eval_success").get<double>();
  r.non_teacher_prob = j.at("non_teacher_prob").get<double>();
  r.teacher_prob = j.at("teacher_prob").get<double>();
  r.total_injections = j.at("total_injections").get<long>();
  r.first_quartile_injection_rate =
      j.at("first_quartile_injection_rate").get<double>();
  r.final_quartile_injection_rate =
      j.at("final_quartile_injection_rate").get<double>();
  r.window_cosine = j.at("window_cosine").get<double>();
  return r;
}

void save_cell_summary(const std::string& path, const CellResult& r) {
  ordered_json j;
  j["label"] = r.label;
  j["seed"] = r.seed;
  j["final_window_reward"] = r.final_window_reward;
  j["eval_success"] = r.eval_success;
  j["non_teacher_prob"] = r.non_teacher_prob;
  j["teacher_prob"] = r.teacher_prob;
  j["total_injections"] = r.total_injections;
  j["first_quartile_injection_rate"] = r.first_quartile_injection_rate;
  j["final_quartile_injection_rate"] = r.final_quartile_injection_rate;
  j["window_cosine"] = r.window_cosine;
  write_text(path, j.dump(2) + "\n");
}

int cmd_compare(const std::string& config_path,
                const std::vector<std::string>& overrides) {
  const json raw = load_with_overrides(config_path, overrides);
  hapolab::ExperimentConfig base = hapolab::parse_experiment_config(raw);
  hapolab::CompareConfig cmp = hapolab::parse_compare_config(raw);
  const std::string out_root = hapolab::resolve_output_dir(base.out_dir);
  fs::create_directories(out_root);
  write_text(out_root + "/resolved_config.json", base.resolved.dump(2) + "\n");

  const hapolab::TaskSpec task = base.task.build();
  hapolab::save_task(task, out_root + "/task.json");

  std::vector<CellResult> cells;
  int failures = 0;
  for (const auto& spec : cmp.methods) {
    for (uint64_t seed : cmp.seeds) {
      const std::string cell_dir =
          out_root + "/" + spec.label + "/seed" + std::to_string(seed);
      const std::string summary_path = cell_dir + "/cell_summary.json";
      CellResult cell;
      cell.label = spec.label;
      cell.seed = seed;
      if (fs::exists(summary_path)) {
        // Interrupted matrices resume by skipping completed cells.
        cells.push_back(load_cell_summary(summary_path));
        continue;
      }
      try {
        hapolab::TrainConfig train = base.train;
        train.seed = seed;  // shared per-seed rollout seeds across methods
        hapolab::TrainState final_state;
        hapolab::RunMetrics run = hapolab::run_method(
            spec.config, task, train, cell_dir, &final_state,
            base.log_trajectories);
        hapolab::EvalReport eval = hapolab::evaluate(
            final_state.params, task, cmp.eval_samples, cmp.eval_temperature,
            seed ^ 0x9e3779b97f4a7c15ULL);
        write_text(cell_dir + "/eval.json", hapolab::eval_to_json(eval) + "\n");

        cell.ok = true;
        cell.final_window_reward = run.summary.final_window_reward;
        cell.eval_success = eval.success_rate;
        cell.non_teacher_prob = eval.non_teacher_solution_prob;
        cell.teacher_prob = eval.teacher_solution_prob;
        cell.total_injections = run.summary.total_injections;
        const long n = run.summary.steps;
        const long q = std::max<long>(1, n / 4);
        auto inj_rate = [&](long b, long e) {
          long inj = 0;
          for (long i = b; i < e; ++i) {
            inj += run.steps[static_cast<size_t>(i)].teacher_injection_count;
          }
          return static_cast<double>(inj) /
                 (static_cast<double>(e - b) * train.batch_prompts);
        };
        cell.first_quartile_injection_rate = inj_rate(0, q);
        cell.final_quartile_injection_rate = inj_rate(n - q, n);
        cell.window_cosine = run.summary.window_cosine;
        save_cell_summary(summary_path, cell);
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        ++failures;
      }
      cells.push_back(cell);
    }
  }

  // method x metric summary table
  std::ostringstream table;
  table << "label mean_final_reward mean_eval_success mean_non_teacher_prob "
           "mean_injection_rate_final_q cells\n";
  std::map<std::string, std::vector<const CellResult*>> by_label;
  for (const auto& c : cells) {
    if (c.ok) by_label[c.label].push_back(&c);
  }
  for (const auto& spec : cmp.methods) {
    const auto& group = by_label[spec.label];
    auto mean = [&](auto field) {
      double s = 0.0;
      for (const CellResult* c : group) s += field(*c);
      return group.empty() ? 0.0 : s / static_cast<double>(group.size());
    };
    table << spec.label << ' '
          << mean([](const CellResult& c) { return c.final_window_reward; })
          << ' ' << mean([](const CellResult& c) { return c.eval_success; })
          << ' ' << mean([](const CellResult& c) { return c.non_teacher_prob; })
          << ' '
          << mean([](const CellResult& c) {
               return c.final_quartile_injection_rate;
             })
          << ' ' << group.size() << "\n";
  }

  // Teacher-surpassing separation: matched-seed sign test on the exact
  // probability mass each method leaves on the solutions the teacher never
  // demonstrates, plus the injection-rate contrast.
  std::ostringstream separation;
  auto find_label = [&](hapolab::Method m) -> const std::string* {
    for (const auto& spec : cmp.methods) {
      if (spec.config.method == m) return &spec.label;
    }
    return nullptr;
  };
  const std::string* hapo_label = find_label(hapolab::Method::kHapo);
  const std::string* static_label = find_label(hapolab::Method::kStaticMix);
  if (hapo_label && static_label) {
    int wins = 0;
    int n_pairs = 0;
    double hapo_final_inj = 0.0;
    double static_final_inj = 0.0;
    for (uint64_t seed : cmp.seeds) {
      const CellResult* h = nullptr;
      const CellResult* s = nullptr;
      for (const auto& c : cells) {
        if (!c.ok || c.seed != seed) continue;
        if (c.label == *hapo_label) h = &c;
        if (c.label == *static_label) s = &c;
      }
      if (!h || !s) continue;
      ++n_pairs;
      if (h->non_teacher_prob > s->non_teacher_prob) ++wins;
      hapo_final_inj += h->final_quartile_injection_rate;
      static_final_inj += s->final_quartile_injection_rate;
    }
    const double p = n_pairs > 0 ? hapolab::sign_test_p_geq(n_pairs, wins) : 1.0;
    separation << "separation report (" << *hapo_label << " vs "
               << *static_label << ")\n";
    separation << "matched seeds: " << n_pairs << "\n";
    separation << "non_teacher_prob wins: " << wins << "/" << n_pairs
               << "  sign_test_p=" << p << "\n";
    if (n_pairs > 0) {
      separation << "final-quartile injection rate: " << *hapo_label << "="
                 << hapo_final_inj / n_pairs << "  " << *static_label << "="
                 << static_final_inj / n_pairs << "\n";
    }
    separation << "verdict: "
               << (p < 0.05 ? "separated (p < 0.05)" : "not separated")
               << "\n";
  } else {
    separation << "separation report: needs both hapo and static_mix in "
                  "compare.methods\n";
  }

  std::ostringstream manifest;
  for (const auto& c : cells) {
    if (!c.ok) {
      manifest << c.label << " seed" << c.seed << ": " << c.error << "\n";
    }
  }

  write_text(out_root + "/compare_summary.txt",
             table.str() + "\n" + separation.str());
  if (failures > 0) {
    write_text(out_root + "/failure_manifest.txt", manifest.str());
  }
  std::cout << table.str() << "\n" << separation.str();
  if (failures > 0) {
    std::cerr << failures << " cell(s) failed; see failure_manifest.txt\n";
    return kGenericError;
  }
  return kOk;
}

int cmd_check_bounds(const std::string& config_path,
                     const std::vector<std::string>& overrides) {
  const json raw = load_with_overrides(config_path, overrides);
  hapolab::BoundsConfig bc = hapolab::parse_bounds_config(raw);

  // Part 1: gate decision == threshold form, by exhaustive enumeration with
  // the threshold side in exact integer arithmetic (gamma = k/grid).
  long checked = 0;
  long mismatches = 0;
  const int grid = bc.threshold_grid + 1;
  for (int n = 1; n <= bc.max_enum_group_size; ++n) {
    for (int k = 1; k <= bc.threshold_grid; ++k) {
      const double gamma = static_cast<double>(k) / grid;
      for (int s = 0; s <= n; ++s) {
        const bool gate_open = hapolab::confidence_score(s, n) < gamma;
        // S < gamma*(2+N) - 1  <=>  grid*(1+S) < k*(2+N)
        const bool threshold_form =
            static_cast<long>(grid) * (1 + s) < static_cast<long>(k) * (2 + n);
        if (gate_open != threshold_form) ++mismatches;
        ++checked;
      }
    }
  }
  std::cout << "gate algebra enumeration: " << checked << " cases, "
            << mismatches << " mismatches\n";

  // Part 2: Hoeffding envelope suite on simulated Bernoulli policies.
  hapolab::BoundReport report = hapolab::run_hoeffding_suite(
      bc.group_sizes, bc.gammas, bc.mu_offsets, bc.mu_absolute, bc.n_groups,
      bc.seed);
  std::cout << report.to_text();

  const bool ok = mismatches == 0 && report.all_pass;
  return ok ? kOk : kCheckFailure;
}

int cmd_gradcheck(const std::string& config_path,
                  const std::vector<std::string>& overrides) {
  const json raw = load_with_overrides(config_path, overrides);
  hapolab::GradcheckConfig gc = hapolab::parse_gradcheck_config(raw);
  hapolab::GradCheckReport report =
      hapolab::run_gradcheck(gc.instances, gc.seed, gc.fd_step, gc.tolerance);
  std::cout << report.to_text();
  return report.pass ? kOk : kCheckFailure;
}

int cmd_eval(const std::string& run_dir, int samples, double temperature,
             uint64_t seed) {
  const std::string dir = hapolab::resolve_output_dir(run_dir);
  const hapolab::TaskSpec task = hapolab::load_task(dir + "/task.json");
  hapolab::TrainState state =
      hapolab::load_checkpoint(dir + "/checkpoint_final.txt");
  hapolab::EvalReport report =
      hapolab::evaluate(state.params, task, samples, temperature, seed);
  const std::string text = hapolab::eval_to_json(report);
  write_text(dir + "/eval.json", text + "\n");
  std::cout << text << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hapolab: gated teacher-injection policy optimization lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string resume_from;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")
        ->required();
    cmd->add_option("--set", overrides,
                    "dotted-path override, e.g. --set train.seed=7");
  };

  CLI::App* train = app.add_subcommand("train", "run one method end to end");
  add_common(train);
  train->add_option("--resume", resume_from, "checkpoint file to resume from");

  CLI::App* compare =
      app.add_subcommand("compare", "method x seed comparison matrix");
  add_common(compare);

  CLI::App* bounds = app.add_subcommand(
      "check-bounds", "gate algebra enumeration + concentration envelope");
  add_common(bounds);

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(gradcheck);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a finished run");
  std::string run_dir;
  int eval_samples = 1000;
  double eval_temperature = 0.6;
  uint64_t eval_seed = 777;
  eval->add_option("--run", run_dir, "run directory (train output)")
      ->required();
  eval->add_option("--samples", eval_samples, "samples per prompt");
  eval->add_option("--temperature", eval_temperature, "sampling temperature");
  eval->add_option("--seed", eval_seed, "evaluation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, overrides, resume_from);
    if (compare->parsed()) return cmd_compare(config_path, overrides);
    if (bounds->parsed()) return cmd_check_bounds(config_path, overrides);
    if (gradcheck->parsed()) return cmd_gradcheck(config_path, overrides);
    if (eval->parsed()) {
      return cmd_eval(run_dir, eval_samples, eval_temperature, eval_seed);
    }
  } catch (const hapolab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const hapolab::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const hapolab::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGenericError;
  }
  return kGenericError;
}
