#pragma once

#include <array>
#include <cstddef>
#include <unordered_map>
#include <vector>

#include "hapolab/env.hpp"

namespace hapolab {

// Hard cap on how many trailing tokens a context key can carry. Keeps the
// key POD-sized; tasks needing longer memory are out of scope for a tabular
// policy anyway.
inline constexpr int kMaxContextOrder = 8;

// State key for the autoregressive table: prompt, emission position, and the
// last min(k, t) generated tokens. Suffix slots beyond suffix_len are kept
// zero so the key hashes as raw bytes.
struct ContextKey {
  PromptId prompt = 0;
  int16_t position = 0;
  int16_t suffix_len = 0;
  std::array<int16_t, kMaxContextOrder> suffix{};

  bool operator==(const ContextKey& o) const = default;
  // Canonical ordering used everywhere a float reduction or serialization
  // must be independent of hash-map iteration order.
  bool operator<(const ContextKey& o) const;
};

struct ContextKeyHash {
  size_t operator()(const ContextKey& k) const;
};

using LogitRow = std::vector<double>;

// Tabular softmax policy. Rows are lazily created as all-zero (uniform
// next-token distribution), mirroring an untrained maximum-entropy policy.
struct PolicyParams {
  int vocab_size = 0;
  int context_order = 0;  // k
  std::unordered_map<ContextKey, LogitRow, ContextKeyHash> logits;

  // nullptr when the context was never touched (implicitly all-zero row).
  const LogitRow* find_row(const ContextKey& key) const;
  // Lazy zero-initialized access.
  LogitRow& row(const ContextKey& key);
  std::vector<ContextKey> sorted_keys() const;
};

// Context for emitting tokens[t] given the prefix tokens[0..t).
ContextKey context_at(PromptId prompt, const TokenSeq& tokens, int t,
                      int context_order);

// log softmax(logits[ctx])[token]; rows sum to 1 within 1e-12 in prob space.
double logp(const PolicyParams& params, const ContextKey& ctx, Token token);
// Full log-probability row over the vocabulary.
std::vector<double> logp_row(const PolicyParams& params, const ContextKey& ctx);
// Probability row with temperature-scaled logits. temperature == 0 returns
// the greedy one-hot (first argmax).
std::vector<double> prob_row(const PolicyParams& params, const ContextKey& ctx,
                             double temperature = 1.0);

// d logp(ctx, token) / d logits[ctx, v] = 1{v == token} - softmax(ctx)[v].
// Zero for every other context, hence "sparse": one row.
std::vector<double> grad_logp_row(const PolicyParams& params,
                                  const ContextKey& ctx, Token token);

// Autoregressive rollout. Fixed length max_len for lock-style tasks; stops
// after emitting the task's EOS token when one is defined. Records the
// sampling-time log-probabilities and the verified reward.
Trajectory sample_trajectory(const PolicyParams& params, const TaskSpec& task,
                             PromptId prompt, Rng& rng,
                             double temperature = 1.0);

// Exact probability of emitting exactly `tokens` for this prompt (product of
// per-token softmax probabilities). No sampling involved.
double sequence_logprob(const PolicyParams& params, PromptId prompt,
                        const TokenSeq& tokens);
double sequence_probability(const PolicyParams& params, PromptId prompt,
                            const TokenSeq& tokens);

// Sparse gradient over the logit table. Same keying as PolicyParams.
struct GradTable {
  int vocab_size = 0;
  std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash> rows;

  std::vector<double>& row(const ContextKey& key);
  // this += a * other
  void axpy(double a, const GradTable& other);
  void scale(double s);
  // Reductions run in canonical key order so results do not depend on
  // hash-map layout (required for bit-identical resume).
  double squared_norm() const;
  double norm() const;
  double max_abs() const;
  bool all_finite() const;
  bool empty_or_zero() const;
  std::vector<ContextKey> sorted_keys() const;
};

// coeff * grad_logp(ctx, token) accumulated into g.
void add_grad_logp(GradTable& g, const PolicyParams& params,
                   const ContextKey& ctx, Token token, double coeff);

double dot(const GradTable& a, const GradTable& b);
// Cosine of the two tables seen as flat vectors; 1.0 when both are zero,
// 0.0 when exactly one is.
double cosine_similarity(const GradTable& a, const GradTable& b);

// Ascent step: params.logits[ctx] += step_size * grad rows.
void apply_update(PolicyParams& params, const GradTable& grad,
                  double step_size);

// Flat text table (context key fields + hexfloat logits per row, canonical
// order). Hexfloats round-trip bit-exactly, which checkpoint-resume needs.
void save_params(const PolicyParams& params, std::ostream& os);
PolicyParams load_params(std::istream& is);

}  // namespace hapolab
