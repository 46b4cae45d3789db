#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "deq/rng.hpp"
#include "deq/tensor.hpp"

namespace deq::test {

inline double rel_err(const Tensor& a, const Tensor& b) {
  const double d = frobenius_norm(a - b);
  return d / std::max(frobenius_norm(b), 1e-300);
}

// Random h x w x r abundances, each pixel strictly inside the simplex.
inline AbundanceTensor random_simplex(std::size_t h, std::size_t w, std::size_t r, Rng& rng) {
  AbundanceTensor a({h, w, r});
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) s += a[p * r + k] = 0.05 + rng.uniform();
    for (std::size_t k = 0; k < r; ++k) a[p * r + k] /= s;
  }
  return a;
}

// Largest ANC or ASC violation over all pixels.
inline double simplex_error(const AbundanceTensor& a) {
  const std::size_t r = a.dim(a.rank() - 1);
  double worst = 0.0;
  for (std::size_t p = 0; p < a.size() / r; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      worst = std::max(worst, -a[p * r + k]);
      s += a[p * r + k];
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

}  // namespace deq::test
