#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hapolab {

using Token = int;
using PromptId = int;
using TokenSeq = std::vector<Token>;

// Single RNG engine for the whole lab. mt19937_64 state streams to/from text
// exactly, which the checkpoint format relies on.
using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps each class to a distinct exit code.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Uniform in [0,1) with 53 random bits. The standard library distributions
// are not pinned by the standard, so all sampling goes through these helpers
// to keep runs reproducible independent of the C++ runtime.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n). Rejection sampling; unbiased.
inline int uniform_int(Rng& rng, int n) {
  if (n <= 0) throw InputError("uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<int>(x % un);
}

// Draws an index from an explicit probability vector (assumed to sum to ~1).
// Walks the CDF in index order; any residual mass lands on the last entry.
inline int sample_categorical(Rng& rng, const std::vector<double>& probs) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (size_t i = 0; i + 1 < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

// Beta(a, b) draw for positive integer parameters via the order-statistic
// identity: the a-th smallest of a+b-1 iid uniforms is Beta(a, b). Exact,
// and reproducible because it only consumes uniform01 draws.
double beta_sample_int(Rng& rng, int alpha, int beta);

}  // namespace hapolab
