#include "hapolab/common.hpp"

#include <algorithm>

namespace hapolab {

double beta_sample_int(Rng& rng, int alpha, int beta) {
  if (alpha < 1 || beta < 1) {
    throw InputError("beta_sample_int: parameters must be positive integers");
  }
  const int n = alpha + beta - 1;
  std::vector<double> u(static_cast<size_t>(n));
  for (auto& x : u) x = uniform01(rng);
  // alpha-th smallest (0-based index alpha-1)
  std::nth_element(u.begin(), u.begin() + (alpha - 1), u.end());
  return u[static_cast<size_t>(alpha - 1)];
}

}  // namespace hapolab
