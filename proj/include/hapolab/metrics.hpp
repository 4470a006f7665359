#pragma once

#include <iosfwd>
#include <limits>

#include "hapolab/gating.hpp"

namespace hapolab {

// One row of the per-step metrics stream. Reward and generation length are
// averaged over non-teacher trajectories only, so injected samples never
// inflate the training curves.
struct StepMetrics {
  long step = 0;
  double mean_reward = 0.0;
  double mean_gen_length = 0.0;
  int teacher_injection_count = 0;
  double mean_confidence = std::numeric_limits<double>::quiet_NaN();
  double threshold = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = 0.0;
  double objective_value = 0.0;
  // Cosine between the applied batch gradient and the pure on-policy
  // gradient recomputed with injections stripped. Exactly 1 on
  // injection-free steps; NaN for methods where the probe is meaningless.
  double grpo_cosine = std::numeric_limits<double>::quiet_NaN();
};

struct RunSummary {
  std::string method;
  long steps = 0;
  double max_grad_norm = 0.0;
  long total_injections = 0;
  long total_groups = 0;
  double final_window_reward = 0.0;  // mean over the final quartile
  // Cosine of the window-summed HAPO vs stripped-GRPO gradients over the
  // final quartile (the expected-gradient comparison); NaN when not probed.
  double window_cosine = std::numeric_limits<double>::quiet_NaN();
  long probe_window = 0;
};

struct RunMetrics {
  std::vector<StepMetrics> steps;
  RunSummary summary;
};

// Compact per-step CSV plus optional full trajectory/gate JSONL. The CSV
// carries a versioned header; both formats are documented in the README.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  // Append mode: reopening an existing stream does not rewrite the header.
  void open_csv(const std::string& path, bool append = false);
  void open_jsonl(const std::string& path, bool append = false);
  bool jsonl_enabled() const { return jsonl_open_; }

  void write_step(const StepMetrics& m);
  void write_gate_decisions(long step, const std::vector<GateDecision>& ds);
  void write_trajectories(long step, const std::vector<Group>& groups);
  void flush();

  static std::string csv_header();
  static std::string format_step(const StepMetrics& m);

 private:
  std::string csv_path_;
  std::string jsonl_path_;
  bool csv_open_ = false;
  bool jsonl_open_ = false;
};

// Reads a metrics CSV back into rows (header verified).
std::vector<StepMetrics> read_metrics_csv(const std::string& path);

// --- Theorem-style bound checking -----------------------------------------

// Exact lower-tail mass of Binomial(n, mu) over the gate-open states
// { S : confidence(S, n) < gamma }. This is the tight reference the
// Hoeffding envelope is compared against.
double exact_gate_open_probability(int n, double mu, double gamma);

// exp(-2 N (mu - gamma)^2)
double hoeffding_bound(int n, double mu, double gamma);

struct HoeffdingCell {
  int n = 0;
  double gamma = 0.0;
  double mu = 0.0;
  long n_groups = 0;
  double bound = 0.0;
  double exact_tail = 0.0;
  double empirical = 0.0;
  double stderr_empirical = 0.0;
  bool regime_ok = false;     // mu > gamma and the gate is closable
  std::string regime_note;    // why the cell is excluded, when it is
  bool empirical_pass = false;  // empirical <= bound + 3 SE
  bool tail_pass = false;       // exact tail <= bound
  bool pass() const { return empirical_pass && tail_pass; }
};

// Simulates n_groups Bernoulli(mu) groups of size n and checks the
// empirical gate-open frequency against the exponential envelope and the
// exact tail. mu <= gamma is the out-of-regime error from the theorem's
// premise; a structurally unclosable gate (gamma > (1+N)/(2+N)) is reported
// as a regime error too, because the low-confidence event is then not a
// lower-deviation event and the envelope does not apply.
HoeffdingCell check_hoeffding(int n, double mu, double gamma, long n_groups,
                              Rng& rng);

struct BoundReport {
  std::vector<HoeffdingCell> cells;
  int n_regime_excluded = 0;
  bool all_pass = true;  // over in-regime cells
  std::string to_text() const;
};

// Grid suite over group sizes x thresholds; per threshold the checked mus
// are {gamma + offset} for each offset plus the absolute entries.
BoundReport run_hoeffding_suite(const std::vector<int>& group_sizes,
                                const std::vector<double>& gammas,
                                const std::vector<double>& mu_offsets,
                                const std::vector<double>& mu_absolute,
                                long n_groups, uint64_t seed);

// One-sided sign-test p-value P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p_geq(int n, int k);

// --- Asymptotic-consistency probe ------------------------------------------

struct ConsistencyReport {
  long window = 0;
  double injection_rate_first_window = 0.0;  // injections per group, steps [0, window)
  double injection_rate_final_window = 0.0;  // same over the last window steps
  double mean_step_cosine = 1.0;  // over final-window steps with a probe value
  double min_step_cosine = 1.0;
  // Cosine of window-summed gradients, copied from the run summary when the
  // requested window matches the recorded probe window (NaN otherwise).
  double window_cosine = std::numeric_limits<double>::quiet_NaN();
};

// Reports injection decay and gradient agreement over the final `window`
// steps of a completed run. Throws InputError when window exceeds the run.
ConsistencyReport consistency_probe(const RunMetrics& run, long window);

// --- Curve extraction -------------------------------------------------------

// Writes the training-dynamics series (step, mean_reward, mean_gen_length,
// teacher_injection_count) as a tab-separated file plus a short text summary
// next to it ("<path>.summary.txt").
void export_curves(const RunMetrics& run, const std::string& path);

}  // namespace hapolab
