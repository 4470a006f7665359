#include "hapolab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace hapolab {

namespace {

// %.17g round-trips doubles exactly and gives stable bytes across runs.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_stream(const std::string& path, bool append) {
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw ConfigError("metrics: cannot open " + path);
  return os;
}

}  // namespace

std::string MetricsWriter::csv_header() {
  return "# hapolab-metrics-v1\n"
         "step,mean_reward,mean_gen_length,teacher_injection_count,"
         "mean_confidence,threshold,grad_norm,objective_value,grpo_cosine";
}

std::string MetricsWriter::format_step(const StepMetrics& m) {
  std::string row = std::to_string(m.step);
  row += ',';
  row += fmt(m.mean_reward);
  row += ',';
  row += fmt(m.mean_gen_length);
  row += ',';
  row += std::to_string(m.teacher_injection_count);
  row += ',';
  row += fmt(m.mean_confidence);
  row += ',';
  row += fmt(m.threshold);
  row += ',';
  row += fmt(m.grad_norm);
  row += ',';
  row += fmt(m.objective_value);
  row += ',';
  row += fmt(m.grpo_cosine);
  return row;
}

void MetricsWriter::open_csv(const std::string& path, bool append) {
  csv_path_ = path;
  const bool fresh = !append;
  auto os = open_stream(path, append);
  if (fresh) os << csv_header() << "\n";
  csv_open_ = true;
}

void MetricsWriter::open_jsonl(const std::string& path, bool append) {
  jsonl_path_ = path;
  auto os = open_stream(path, append);
  jsonl_open_ = true;
}

void MetricsWriter::write_step(const StepMetrics& m) {
  if (!csv_open_) return;
  auto os = open_stream(csv_path_, /*append=*/true);
  os << format_step(m) << "\n";
}

void MetricsWriter::write_gate_decisions(long step,
                                         const std::vector<GateDecision>& ds) {
  if (!jsonl_open_) return;
  auto os = open_stream(jsonl_path_, /*append=*/true);
  for (const auto& d : ds) {
    nlohmann::ordered_json j;
    j["type"] = "gate";
    j["step"] = step;
    j["group"] = d.group_index;
    j["prompt"] = d.prompt;
    j["successes"] = d.successes;
    j["confidence"] = d.confidence;
    j["threshold"] = d.threshold;
    j["opened"] = d.opened;
    if (d.opened) j["replaced_index"] = d.replaced_index;
    os << j.dump() << "\n";
  }
}

void MetricsWriter::write_trajectories(long step,
                                       const std::vector<Group>& groups) {
  if (!jsonl_open_) return;
  auto os = open_stream(jsonl_path_, /*append=*/true);
  for (size_t i = 0; i < groups.size(); ++i) {
    const Group& g = groups[i];
    for (int j = 0; j < g.n(); ++j) {
      const Trajectory& t = g.trajectories[static_cast<size_t>(j)];
      nlohmann::ordered_json rec;
      rec["type"] = "traj";
      rec["step"] = step;
      rec["group"] = static_cast<int>(i);
      rec["prompt"] = t.prompt;
      rec["j"] = j;
      rec["tokens"] = t.tokens;
      rec["reward"] = t.reward;
      rec["is_teacher"] = t.is_teacher;
      if (g.has_advantages()) {
        rec["advantage"] = g.advantages[static_cast<size_t>(j)];
      }
      os << rec.dump() << "\n";
    }
    // The displaced member is still a policy sample; emit it so teacher-
    // excluded aggregates can be rebuilt exactly from the dump.
    if (g.injected && g.replaced_original) {
      const Trajectory& t = *g.replaced_original;
      nlohmann::ordered_json rec;
      rec["type"] = "traj";
      rec["step"] = step;
      rec["group"] = static_cast<int>(i);
      rec["prompt"] = t.prompt;
      rec["j"] = g.replaced_index;
      rec["tokens"] = t.tokens;
      rec["reward"] = t.reward;
      rec["is_teacher"] = false;
      rec["replaced"] = true;
      os << rec.dump() << "\n";
    }
  }
}

void MetricsWriter::flush() {}

std::vector<StepMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("metrics: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "# hapolab-metrics-v1") {
    throw ConfigError("metrics: bad version header in " + path);
  }
  std::getline(is, line);  // column names
  std::vector<StepMetrics> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    StepMetrics m;
    ls >> m.step >> m.mean_reward >> m.mean_gen_length >>
        m.teacher_injection_count >> m.mean_confidence >> m.threshold >>
        m.grad_norm >> m.objective_value >> m.grpo_cosine;
    if (ls.fail()) throw ConfigError("metrics: malformed row in " + path);
    rows.push_back(m);
  }
  return rows;
}

// --- bound checking ----------------------------------------------------------

double hoeffding_bound(int n, double mu, double gamma) {
  const double d = mu - gamma;
  return std::exp(-2.0 * static_cast<double>(n) * d * d);
}

double exact_gate_open_probability(int n, double mu, double gamma) {
  if (n < 1) throw InputError("exact_gate_open_probability: n >= 1");
  if (mu < 0.0 || mu > 1.0) {
    throw InputError("exact_gate_open_probability: mu outside [0,1]");
  }
  // Binomial pmf by the stable multiplicative recurrence, summed over the
  // gate-open states (the same predicate the gate itself evaluates).
  double tail = 0.0;
  for (int s = 0; s <= n; ++s) {
    if (!(confidence_score(s, n) < gamma)) continue;
    // pmf(s) = C(n,s) mu^s (1-mu)^(n-s), via logs for robustness
    double logpmf = std::lgamma(n + 1.0) - std::lgamma(s + 1.0) -
                    std::lgamma(n - s + 1.0);
    if (s > 0) {
      if (mu == 0.0) continue;  // pmf 0
      logpmf += s * std::log(mu);
    }
    if (n - s > 0) {
      if (mu == 1.0) continue;  // pmf 0
      logpmf += (n - s) * std::log(1.0 - mu);
    }
    tail += std::exp(logpmf);
  }
  return tail;
}

HoeffdingCell check_hoeffding(int n, double mu, double gamma, long n_groups,
                              Rng& rng) {
  HoeffdingCell cell;
  cell.n = n;
  cell.gamma = gamma;
  cell.mu = mu;
  cell.n_groups = n_groups;
  cell.bound = hoeffding_bound(n, mu, gamma);
  cell.exact_tail = exact_gate_open_probability(n, mu, gamma);

  if (!(mu > gamma)) {
    cell.regime_ok = false;
    cell.regime_note = "mu <= gamma: outside the theorem's regime";
    return cell;
  }
  // Structurally unclosable gate: even an all-success group scores below
  // gamma, so every group opens and the deviation bound cannot apply.
  const double max_confidence = confidence_score(n, n);
  if (!(max_confidence >= gamma)) {
    cell.regime_ok = false;
    cell.regime_note =
        "gamma exceeds (1+N)/(2+N): gate opens for every S, bound inapplicable";
    return cell;
  }
  cell.regime_ok = true;

  long opened = 0;
  for (long g = 0; g < n_groups; ++g) {
    int s = 0;
    for (int j = 0; j < n; ++j) s += uniform01(rng) < mu ? 1 : 0;
    if (confidence_score(s, n) < gamma) ++opened;
  }
  cell.empirical =
      static_cast<double>(opened) / static_cast<double>(n_groups);
  // Standard error at the true open-probability (we know it exactly here).
  cell.stderr_empirical = std::sqrt(cell.exact_tail * (1.0 - cell.exact_tail) /
                                    static_cast<double>(n_groups));
  cell.empirical_pass =
      cell.empirical <= cell.bound + 3.0 * cell.stderr_empirical;
  cell.tail_pass = cell.exact_tail <= cell.bound;
  return cell;
}

std::string BoundReport::to_text() const {
  std::ostringstream os;
  os << "hapolab gate-open bound report\n";
  os << "cells: " << cells.size() << "  regime-excluded: " << n_regime_excluded
     << "  verdict: " << (all_pass ? "PASS" : "FAIL") << "\n";
  os << "N gamma mu bound exact_tail empirical 3se status\n";
  for (const auto& c : cells) {
    os << c.n << ' ' << fmt(c.gamma) << ' ' << fmt(c.mu) << ' ' << fmt(c.bound)
       << ' ' << fmt(c.exact_tail) << ' ';
    if (c.regime_ok) {
      os << fmt(c.empirical) << ' ' << fmt(3.0 * c.stderr_empirical) << ' '
         << (c.pass() ? "pass" : "FAIL");
    } else {
      os << "- - skip(" << c.regime_note << ")";
    }
    os << "\n";
  }
  return os.str();
}

BoundReport run_hoeffding_suite(const std::vector<int>& group_sizes,
                                const std::vector<double>& gammas,
                                const std::vector<double>& mu_offsets,
                                const std::vector<double>& mu_absolute,
                                long n_groups, uint64_t seed) {
  BoundReport report;
  Rng rng(seed);
  for (int n : group_sizes) {
    for (double gamma : gammas) {
      std::vector<double> mus;
      for (double off : mu_offsets) mus.push_back(std::min(gamma + off, 1.0));
      for (double mu : mu_absolute) mus.push_back(mu);
      for (double mu : mus) {
        HoeffdingCell cell = check_hoeffding(n, mu, gamma, n_groups, rng);
        if (!cell.regime_ok) {
          ++report.n_regime_excluded;
        } else if (!cell.pass()) {
          report.all_pass = false;
        }
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

double sign_test_p_geq(int n, int k) {
  if (n < 0 || k < 0 || k > n) throw InputError("sign_test_p_geq: bad inputs");
  // One-sided P(X >= k), X ~ Binomial(n, 1/2); exact in doubles for small n.
  double coeff = 1.0;  // C(n, 0)
  double sum = 0.0;
  for (int i = 0; i <= n; ++i) {
    if (i >= k) sum += coeff;
    coeff = coeff * static_cast<double>(n - i) / static_cast<double>(i + 1);
  }
  return sum * std::pow(0.5, n);
}

// --- consistency probe --------------------------------------------------------

ConsistencyReport consistency_probe(const RunMetrics& run, long window) {
  const long n = static_cast<long>(run.steps.size());
  if (window < 1 || window > n) {
    throw InputError("consistency_probe: window must lie in [1, run length]");
  }
  ConsistencyReport rep;
  rep.window = window;

  auto injection_rate = [&](long begin, long end) {
    long injections = 0;
    long steps = 0;
    for (long i = begin; i < end; ++i) {
      injections += run.steps[static_cast<size_t>(i)].teacher_injection_count;
      ++steps;
    }
    const long groups_per_step =
        run.summary.total_groups > 0 && run.summary.steps > 0
            ? run.summary.total_groups / run.summary.steps
            : 1;
    return steps > 0 ? static_cast<double>(injections) /
                           static_cast<double>(steps * groups_per_step)
                     : 0.0;
  };
  rep.injection_rate_first_window = injection_rate(0, window);
  rep.injection_rate_final_window = injection_rate(n - window, n);

  double sum_cos = 0.0;
  long n_cos = 0;
  double min_cos = 1.0;
  for (long i = n - window; i < n; ++i) {
    const double c = run.steps[static_cast<size_t>(i)].grpo_cosine;
    if (std::isnan(c)) continue;
    sum_cos += c;
    min_cos = std::min(min_cos, c);
    ++n_cos;
  }
  rep.mean_step_cosine = n_cos > 0 ? sum_cos / static_cast<double>(n_cos) : 1.0;
  rep.min_step_cosine = n_cos > 0 ? min_cos : 1.0;
  if (window == run.summary.probe_window) {
    rep.window_cosine = run.summary.window_cosine;
  }
  return rep;
}

// --- curve export --------------------------------------------------------------

void export_curves(const RunMetrics& run, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("export_curves: cannot open " + path);
  os << "step\tmean_reward\tmean_gen_length\tteacher_injection_count\n";
  for (const auto& m : run.steps) {
    os << m.step << '\t' << fmt(m.mean_reward) << '\t'
       << fmt(m.mean_gen_length) << '\t' << m.teacher_injection_count << "\n";
  }

  std::ofstream sum(path + ".summary.txt");
  if (!sum) throw ConfigError("export_curves: cannot open summary file");
  const long n = static_cast<long>(run.steps.size());
  auto window_mean = [&](long begin, long end, auto field) {
    double s = 0.0;
    for (long i = begin; i < end; ++i) s += field(run.steps[static_cast<size_t>(i)]);
    return end > begin ? s / static_cast<double>(end - begin) : 0.0;
  };
  const long q = std::max<long>(1, n / 4);
  sum << "method: " << run.summary.method << "\n";
  sum << "steps: " << n << "\n";
  sum << "final_quartile_mean_reward: "
      << fmt(window_mean(n - q, n, [](const StepMetrics& m) { return m.mean_reward; }))
      << "\n";
  sum << "final_quartile_mean_gen_length: "
      << fmt(window_mean(n - q, n,
                         [](const StepMetrics& m) { return m.mean_gen_length; }))
      << "\n";
  sum << "first_quartile_injections_per_step: "
      << fmt(window_mean(0, q,
                         [](const StepMetrics& m) {
                           return static_cast<double>(m.teacher_injection_count);
                         }))
      << "\n";
  sum << "final_quartile_injections_per_step: "
      << fmt(window_mean(n - q, n,
                         [](const StepMetrics& m) {
                           return static_cast<double>(m.teacher_injection_count);
                         }))
      << "\n";
  sum << "max_grad_norm: " << fmt(run.summary.max_grad_norm) << "\n";
  sum << "window_cosine: " << fmt(run.summary.window_cosine) << "\n";
}

}  // namespace hapolab
