#include "hapolab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace hapolab {

bool ContextKey::operator<(const ContextKey& o) const {
  if (prompt != o.prompt) return prompt < o.prompt;
  if (position != o.position) return position < o.position;
  if (suffix_len != o.suffix_len) return suffix_len < o.suffix_len;
  return suffix < o.suffix;
}

size_t ContextKeyHash::operator()(const ContextKey& k) const {
  // FNV-1a over the packed fields; suffix slots beyond suffix_len are zero
  // by construction, so hashing the whole array is well-defined.
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mix(static_cast<uint64_t>(static_cast<uint32_t>(k.prompt)));
  mix(static_cast<uint64_t>(static_cast<uint16_t>(k.position)));
  mix(static_cast<uint64_t>(static_cast<uint16_t>(k.suffix_len)));
  for (int16_t t : k.suffix) mix(static_cast<uint64_t>(static_cast<uint16_t>(t)));
  return static_cast<size_t>(h);
}

const LogitRow* PolicyParams::find_row(const ContextKey& key) const {
  auto it = logits.find(key);
  return it == logits.end() ? nullptr : &it->second;
}

LogitRow& PolicyParams::row(const ContextKey& key) {
  auto it = logits.find(key);
  if (it == logits.end()) {
    it = logits.emplace(key, LogitRow(static_cast<size_t>(vocab_size), 0.0))
             .first;
  }
  return it->second;
}

std::vector<ContextKey> PolicyParams::sorted_keys() const {
  std::vector<ContextKey> keys;
  keys.reserve(logits.size());
  for (const auto& [k, _] : logits) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  return keys;
}

ContextKey context_at(PromptId prompt, const TokenSeq& tokens, int t,
                      int context_order) {
  if (context_order < 0 || context_order > kMaxContextOrder) {
    throw ConfigError("context_at: context_order out of [0, 8]");
  }
  ContextKey key;
  key.prompt = prompt;
  key.position = static_cast<int16_t>(t);
  const int take = std::min(context_order, t);
  key.suffix_len = static_cast<int16_t>(take);
  for (int i = 0; i < take; ++i) {
    key.suffix[static_cast<size_t>(i)] =
        static_cast<int16_t>(tokens[static_cast<size_t>(t - take + i)]);
  }
  return key;
}

namespace {

// log-sum-exp of a row, max-shifted for stability.
double log_sum_exp(const LogitRow& row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

const LogitRow& row_or_zero(const PolicyParams& params, const ContextKey& ctx,
                            LogitRow& scratch) {
  if (const LogitRow* r = params.find_row(ctx)) return *r;
  scratch.assign(static_cast<size_t>(params.vocab_size), 0.0);
  return scratch;
}

}  // namespace

double logp(const PolicyParams& params, const ContextKey& ctx, Token token) {
  if (token < 0 || token >= params.vocab_size) {
    throw InputError("logp: token outside vocabulary");
  }
  LogitRow scratch;
  const LogitRow& row = row_or_zero(params, ctx, scratch);
  return row[static_cast<size_t>(token)] - log_sum_exp(row);
}

std::vector<double> logp_row(const PolicyParams& params,
                             const ContextKey& ctx) {
  LogitRow scratch;
  const LogitRow& row = row_or_zero(params, ctx, scratch);
  const double lse = log_sum_exp(row);
  std::vector<double> out(row.size());
  for (size_t v = 0; v < row.size(); ++v) out[v] = row[v] - lse;
  return out;
}

std::vector<double> prob_row(const PolicyParams& params, const ContextKey& ctx,
                             double temperature) {
  LogitRow scratch;
  const LogitRow& row = row_or_zero(params, ctx, scratch);
  std::vector<double> out(row.size(), 0.0);
  if (temperature <= 0.0) {
    // Greedy limit: all mass on the first argmax.
    size_t best = 0;
    for (size_t v = 1; v < row.size(); ++v) {
      if (row[v] > row[best]) best = v;
    }
    out[best] = 1.0;
    return out;
  }
  LogitRow scaled(row.size());
  for (size_t v = 0; v < row.size(); ++v) scaled[v] = row[v] / temperature;
  const double lse = log_sum_exp(scaled);
  for (size_t v = 0; v < row.size(); ++v) out[v] = std::exp(scaled[v] - lse);
  return out;
}

std::vector<double> grad_logp_row(const PolicyParams& params,
                                  const ContextKey& ctx, Token token) {
  if (token < 0 || token >= params.vocab_size) {
    throw InputError("grad_logp_row: token outside vocabulary");
  }
  std::vector<double> g = prob_row(params, ctx);
  for (double& v : g) v = -v;
  g[static_cast<size_t>(token)] += 1.0;
  return g;
}

Trajectory sample_trajectory(const PolicyParams& params, const TaskSpec& task,
                             PromptId prompt, Rng& rng, double temperature) {
  if (std::find(task.prompts.begin(), task.prompts.end(), prompt) ==
      task.prompts.end()) {
    throw InputError("sample_trajectory: unknown prompt");
  }
  Trajectory traj;
  traj.prompt = prompt;
  traj.tokens.reserve(static_cast<size_t>(task.max_len));
  for (int t = 0; t < task.max_len; ++t) {
    const ContextKey ctx =
        context_at(prompt, traj.tokens, t, params.context_order);
    const std::vector<double> probs = prob_row(params, ctx, temperature);
    const Token a = sample_categorical(rng, probs);
    traj.tokens.push_back(a);
    traj.behavior_logps.push_back(std::log(probs[static_cast<size_t>(a)]));
    if (task.eos_token && a == *task.eos_token) break;
  }
  traj.reward = verify(task, prompt, traj.tokens);
  return traj;
}

double sequence_logprob(const PolicyParams& params, PromptId prompt,
                        const TokenSeq& tokens) {
  double lp = 0.0;
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    const ContextKey ctx = context_at(prompt, tokens, t, params.context_order);
    lp += logp(params, ctx, tokens[static_cast<size_t>(t)]);
  }
  return lp;
}

double sequence_probability(const PolicyParams& params, PromptId prompt,
                            const TokenSeq& tokens) {
  return std::exp(sequence_logprob(params, prompt, tokens));
}

std::vector<double>& GradTable::row(const ContextKey& key) {
  auto it = rows.find(key);
  if (it == rows.end()) {
    it = rows.emplace(key, std::vector<double>(static_cast<size_t>(vocab_size),
                                               0.0))
             .first;
  }
  return it->second;
}

void GradTable::axpy(double a, const GradTable& other) {
  for (const auto& [key, src] : other.rows) {
    auto& dst = row(key);
    for (size_t v = 0; v < src.size(); ++v) dst[v] += a * src[v];
  }
}

void GradTable::scale(double s) {
  for (auto& [_, r] : rows) {
    for (double& v : r) v *= s;
  }
}

std::vector<ContextKey> GradTable::sorted_keys() const {
  std::vector<ContextKey> keys;
  keys.reserve(rows.size());
  for (const auto& [k, _] : rows) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  return keys;
}

double GradTable::squared_norm() const {
  double s = 0.0;
  for (const ContextKey& k : sorted_keys()) {
    for (double v : rows.at(k)) s += v * v;
  }
  return s;
}

double GradTable::norm() const { return std::sqrt(squared_norm()); }

double GradTable::max_abs() const {
  double m = 0.0;
  for (const auto& [_, r] : rows) {
    for (double v : r) m = std::max(m, std::abs(v));
  }
  return m;
}

bool GradTable::all_finite() const {
  for (const auto& [_, r] : rows) {
    for (double v : r) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

bool GradTable::empty_or_zero() const {
  for (const auto& [_, r] : rows) {
    for (double v : r) {
      if (v != 0.0) return false;
    }
  }
  return true;
}

void add_grad_logp(GradTable& g, const PolicyParams& params,
                   const ContextKey& ctx, Token token, double coeff) {
  const std::vector<double> probs = prob_row(params, ctx);
  auto& dst = g.row(ctx);
  for (size_t v = 0; v < probs.size(); ++v) dst[v] -= coeff * probs[v];
  dst[static_cast<size_t>(token)] += coeff;
}

double dot(const GradTable& a, const GradTable& b) {
  // Iterate the smaller table in canonical order against the larger.
  const GradTable& small = a.rows.size() <= b.rows.size() ? a : b;
  const GradTable& large = a.rows.size() <= b.rows.size() ? b : a;
  double s = 0.0;
  for (const ContextKey& k : small.sorted_keys()) {
    auto it = large.rows.find(k);
    if (it == large.rows.end()) continue;
    const auto& ra = small.rows.at(k);
    const auto& rb = it->second;
    for (size_t v = 0; v < ra.size(); ++v) s += ra[v] * rb[v];
  }
  return s;
}

double cosine_similarity(const GradTable& a, const GradTable& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

void apply_update(PolicyParams& params, const GradTable& grad,
                  double step_size) {
  for (const auto& [key, g] : grad.rows) {
    auto& dst = params.row(key);
    for (size_t v = 0; v < g.size(); ++v) dst[v] += step_size * g[v];
  }
}

namespace {

void write_key(std::ostream& os, const ContextKey& k) {
  os << k.prompt << ' ' << k.position << ' ' << k.suffix_len;
  for (int i = 0; i < k.suffix_len; ++i) os << ' ' << k.suffix[static_cast<size_t>(i)];
}

ContextKey read_key(std::istringstream& is) {
  ContextKey k;
  int position = 0, suffix_len = 0;
  if (!(is >> k.prompt >> position >> suffix_len)) {
    throw ConfigError("policy table: malformed context key");
  }
  if (suffix_len < 0 || suffix_len > kMaxContextOrder) {
    throw ConfigError("policy table: suffix length out of range");
  }
  k.position = static_cast<int16_t>(position);
  k.suffix_len = static_cast<int16_t>(suffix_len);
  for (int i = 0; i < suffix_len; ++i) {
    int t = 0;
    if (!(is >> t)) throw ConfigError("policy table: truncated suffix");
    k.suffix[static_cast<size_t>(i)] = static_cast<int16_t>(t);
  }
  return k;
}

std::string hex_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double parse_hex_double(const std::string& s) {
  return std::strtod(s.c_str(), nullptr);
}

}  // namespace

void save_params(const PolicyParams& params, std::ostream& os) {
  os << "hapolab-policy-v1 " << params.vocab_size << ' '
     << params.context_order << ' ' << params.logits.size() << "\n";
  for (const ContextKey& k : params.sorted_keys()) {
    write_key(os, k);
    for (double v : params.logits.at(k)) os << ' ' << hex_double(v);
    os << "\n";
  }
}

PolicyParams load_params(std::istream& is) {
  std::string tag;
  size_t n_rows = 0;
  PolicyParams params;
  is >> tag >> params.vocab_size >> params.context_order >> n_rows;
  if (tag != "hapolab-policy-v1" || !is) {
    throw ConfigError("policy table: bad header");
  }
  std::string line;
  std::getline(is, line);  // consume end of header line
  for (size_t i = 0; i < n_rows; ++i) {
    if (!std::getline(is, line)) {
      throw ConfigError("policy table: truncated");
    }
    std::istringstream ls(line);
    const ContextKey key = read_key(ls);
    LogitRow row(static_cast<size_t>(params.vocab_size), 0.0);
    std::string tok;
    for (auto& v : row) {
      if (!(ls >> tok)) throw ConfigError("policy table: short row");
      v = parse_hex_double(tok);
    }
    params.logits.emplace(key, std::move(row));
  }
  return params;
}

}  // namespace hapolab
