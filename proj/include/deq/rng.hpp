#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "deq/tensor.hpp"

namespace deq {

// Identifies a reproducible random stream. Streams with equal (seed, stream)
// produce identical draws on every platform: the engine is mt19937_64 (fully
// specified by the standard) and all distributions are implemented here rather
// than taken from <random>, whose distributions are implementation-defined.
struct RngState {
  std::string algorithm = "mt19937_64";
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

class Rng {
 public:
  explicit Rng(const RngState& state);
  Rng(std::uint64_t seed, std::uint64_t stream = 0) : Rng(RngState{"mt19937_64", seed, stream}) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; caches the second variate.
  double normal();
  std::size_t index(std::size_t n);

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derive an independent seed for sub-stream `stream` of `seed` (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace deq
