#include "hapolab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace hapolab {

GradTable finite_difference(
    const std::function<double(const PolicyParams&)>& f, PolicyParams params,
    const std::vector<ContextKey>& contexts, double h) {
  GradTable g;
  g.vocab_size = params.vocab_size;
  for (const ContextKey& ctx : contexts) {
    auto& out = g.row(ctx);
    auto& row = params.row(ctx);
    for (int v = 0; v < params.vocab_size; ++v) {
      const double saved = row[static_cast<size_t>(v)];
      row[static_cast<size_t>(v)] = saved + h;
      const double up = f(params);
      row[static_cast<size_t>(v)] = saved - h;
      const double down = f(params);
      row[static_cast<size_t>(v)] = saved;
      out[static_cast<size_t>(v)] = (up - down) / (2.0 * h);
    }
  }
  return g;
}

namespace {

double table_rel_err(const GradTable& analytic, const GradTable& fd) {
  // ||a - f||_inf over the union of rows, scaled by max(1, ||a||_inf).
  double diff = 0.0;
  auto scan = [&](const GradTable& lhs, const GradTable& rhs) {
    for (const auto& [key, row] : lhs.rows) {
      auto it = rhs.rows.find(key);
      for (size_t v = 0; v < row.size(); ++v) {
        const double other = it == rhs.rows.end() ? 0.0 : it->second[v];
        diff = std::max(diff, std::abs(row[v] - other));
      }
    }
  };
  scan(analytic, fd);
  scan(fd, analytic);
  return diff / std::max(1.0, analytic.max_abs());
}

std::vector<ContextKey> contexts_of(const PolicyParams& params,
                                    const TaskSpec& task,
                                    const std::vector<Group>& groups) {
  std::set<ContextKey> keys;
  auto add_traj = [&](const Trajectory& t) {
    for (int i = 0; i < static_cast<int>(t.tokens.size()); ++i) {
      keys.insert(context_at(t.prompt, t.tokens, i, params.context_order));
    }
  };
  for (const Group& g : groups) {
    for (const Trajectory& t : g.trajectories) add_traj(t);
    if (g.replaced_original) add_traj(*g.replaced_original);
  }
  for (PromptId p : task.prompts) add_traj(teacher_demo(task, p));
  return {keys.begin(), keys.end()};
}

void randomize_rows(PolicyParams& params,
                    const std::vector<ContextKey>& contexts, Rng& rng) {
  for (const ContextKey& ctx : contexts) {
    for (double& v : params.row(ctx)) {
      v = (uniform01(rng) - 0.5) * 3.0;  // U[-1.5, 1.5]
    }
  }
}

}  // namespace

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  os << "gradcheck: " << instances << " instances, fd_step=" << fd_step
     << ", tolerance=" << tolerance << "\n";
  os << "max_rel_err=" << max_rel_err << " (" << worst.what << ")\n";
  os << "verdict: " << (pass ? "PASS" : "FAIL") << "\n";
  return os.str();
}

GradCheckReport run_gradcheck(int instances, uint64_t seed, double fd_step,
                              double tolerance) {
  if (instances < 1) throw ConfigError("gradcheck: instances must be >= 1");
  GradCheckReport report;
  report.instances = instances;
  report.fd_step = fd_step;
  report.tolerance = tolerance;

  Rng rng(seed);
  for (int inst = 0; inst < instances; ++inst) {
    // Small random instance: the tables stay tiny so full-table central
    // differences are cheap.
    const int vocab = 3 + uniform_int(rng, 4);    // 3..6
    const int len = 2 + uniform_int(rng, 2);      // 2..3
    const int n_prompts = 1 + uniform_int(rng, 2);  // 1..2
    const int n_solutions = 1 + uniform_int(rng, 2);  // 1..2
    const TaskSpec task =
        make_lock_task(vocab, n_prompts, len, n_solutions, rng());

    PolicyParams params;
    params.vocab_size = vocab;
    params.context_order = len;

    // Roll out the batch first so every context that can carry gradient is
    // known, then randomize those rows and re-roll on the randomized policy.
    {
      Rng warm(rng());
      std::vector<Group> warm_groups;
      for (PromptId p : task.prompts) {
        warm_groups.push_back(rollout_group(params, task, p, 4, warm));
      }
      randomize_rows(params, contexts_of(params, task, warm_groups), rng);
    }

    std::vector<Group> groups;
    for (PromptId p : task.prompts) {
      groups.push_back(rollout_group(params, task, p, 4, rng));
    }
    const std::vector<ContextKey> contexts = contexts_of(params, task, groups);
    // Materialize every probed row so perturbation hits real storage.
    for (const ContextKey& ctx : contexts) params.row(ctx);

    auto record = [&](const std::string& what, double err) {
      report.cases.push_back({what, err});
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = report.cases.back();
      }
    };
    const std::string tag = "instance " + std::to_string(inst);

    // 1) token log-probability
    {
      const ContextKey ctx =
          contexts[static_cast<size_t>(uniform_int(rng, static_cast<int>(contexts.size())))];
      const Token tok = uniform_int(rng, vocab);
      GradTable analytic;
      analytic.vocab_size = vocab;
      analytic.row(ctx) = grad_logp_row(params, ctx, tok);
      GradTable fd = finite_difference(
          [&](const PolicyParams& p) { return logp(p, ctx, tok); }, params,
          {ctx}, fd_step);
      record(tag + ": logp", table_rel_err(analytic, fd));
    }

    // 2) imitation objective on the demos
    {
      std::vector<Trajectory> demos;
      for (PromptId p : task.prompts) demos.push_back(teacher_demo(task, p));
      Objective obj = sft_objective(params, demos);
      GradTable fd = finite_difference(
          [&](const PolicyParams& p) { return sft_objective(p, demos).value; },
          params, contexts, fd_step);
      record(tag + ": sft", table_rel_err(obj.grad, fd));
    }

    // 3) shaped teacher loss
    {
      const PromptId p = task.prompts[0];
      const Trajectory demo = teacher_demo(task, p);
      ShapingConfig shaping;
      shaping.beta_shape = 0.05 + 0.45 * uniform01(rng);
      shaping.confidence_anneal = uniform01(rng) < 0.5;
      const double conf = 0.1 + 0.8 * uniform01(rng);
      GradTable analytic;
      analytic.vocab_size = vocab;
      const double val = teacher_loss(params, demo, conf, shaping, analytic);
      (void)val;
      GradTable fd = finite_difference(
          [&](const PolicyParams& pp) {
            GradTable scratch;
            scratch.vocab_size = pp.vocab_size;
            return teacher_loss(pp, demo, conf, shaping, scratch);
          },
          params, contexts, fd_step);
      record(tag + ": teacher_loss", table_rel_err(analytic, fd));
    }

    // 4) full batch objective at the rollout point
    {
      std::vector<Group> gated = groups;
      GateConfig gate = GateConfig::constant(0.8);
      gate_and_inject(gated, task, gate, 0);
      for (Group& g : gated) compute_advantages(g);
      ShapingConfig shaping;
      Objective obj =
          hapo_batch_objective(params, gated, shaping, /*eps_clip=*/0.2);
      GradTable fd = finite_difference(
          [&](const PolicyParams& pp) {
            return hapo_batch_objective(pp, gated, shaping, 0.2).value;
          },
          params, contexts, fd_step);
      record(tag + ": hapo_batch", table_rel_err(obj.grad, fd));
    }
  }

  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace hapolab
