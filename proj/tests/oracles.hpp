#pragma once

// Reference computations shared by the unit tests and the acceptance runner.

#include <cmath>
#include <utility>
#include <vector>

#include "deq/data_io.hpp"
#include "deq/equilibrium.hpp"
#include "deq/implicit.hpp"
#include "deq/ops.hpp"
#include "deq/training.hpp"
#include "test_util.hpp"

namespace deq::test {

// Solves M x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> dense_solve(std::vector<std::vector<double>> m, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[c], m[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= m[i][k] * x[k];
    x[i] = s / m[i][i];
  }
  return x;
}

// Random n x n matrix rescaled to spectral norm `norm` (power iteration on J^T J).
inline Matrix contraction_matrix(std::size_t n, double norm, Rng& rng) {
  Matrix j = rng.normal_tensor({n, n});
  std::vector<double> v(n, 1.0);
  double sigma = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> jv(n, 0.0), jtjv(n, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) jv[r] += j(r, c) * v[c];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) jtjv[c] += j(r, c) * jv[r];
    double s = 0.0;
    for (double e : jtjv) s += e * e;
    s = std::sqrt(s);
    sigma = std::sqrt(s);
    for (std::size_t c = 0; c < n; ++c) v[c] = jtjv[c] / s;
  }
  j *= norm / sigma;
  return j;
}

// Relative error of the Neumann adjoint against the dense (I - J)^{-T} g
// solve on a linear map with ||J|| = norm.
inline double neumann_dense_error(std::size_t n, double norm, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix j = contraction_matrix(n, norm, rng);
  const Tensor g = rng.normal_tensor({n});
  auto jt = [&](const Tensor& v) {
    Tensor out({n});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) out[c] += j(r, c) * v[r];
    return out;
  };
  BackwardConfig cfg;
  cfg.t_max = 2000;
  cfg.tol = 1e-14;
  const AdjointState st = neumann_series(jt, g, cfg);
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) m[r][c] = (r == c ? 1.0 : 0.0) - j(c, r);
  const auto x = dense_solve(m, std::vector<double>(g.values().begin(), g.values().end()));
  return rel_err(st.v, Tensor({n}, x));
}

struct GradientComparison {
  double theta = 0.0;
  double lambda = 0.0;
  double w = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// Tiny equilibrium instance: 6 x 6 x 8 cube, R = 3, C = 4.
struct TinyInstance {
  EquilibriumLayer layer;
  HsiCube y;
  AbundanceTensor a0;
};

inline TinyInstance tiny_instance(std::uint64_t seed) {
  Rng rng(seed);
  TinyInstance t;
  const Matrix lib = builtin_library(8).spectra;
  Matrix w({8, 3});
  for (std::size_t l = 0; l < 8; ++l)
    for (std::size_t k = 0; k < 3; ++k) w(l, k) = lib(l, k);
  const AbundanceTensor truth = random_simplex(6, 6, 3, rng);
  t.y = mode3_product(truth, w);
  for (auto& v : t.y.values()) v += 0.01 * rng.normal();
  t.layer.gtheta = GThetaOperator::xavier(8, 4, 4, rng);
  for (auto& v : t.layer.gtheta.theta()[kHeadBias].values()) v = 0.05 * rng.normal();
  t.layer.w = w;
  for (auto& v : t.layer.w.values()) v *= 1.0 + 0.1 * rng.uniform(-1, 1);
  t.layer.lambda_pre = Tensor({1}, {ops::softplus_inverse(0.05)});
  t.layer.eta = 0.5;
  t.layer.gamma = 2.0;
  t.a0 = random_simplex(6, 6, 3, rng);
  return t;
}

inline double group_error(const GradSet& a, const GradSet& b, std::size_t first, std::size_t last) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = first; i < last; ++i) {
    const Tensor d = a[i] - b[i];
    num += dot(d, d);
    den += dot(b[i], b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// Implicit (solve + Neumann) gradients against backprop through an unrolled
// tape with as many layers as the solver used.
inline GradientComparison implicit_vs_unrolled(std::uint64_t seed, double tol = 1e-10) {
  const TinyInstance t = tiny_instance(seed);
  SolverConfig solver;
  solver.k_max = 5000;
  solver.tol = tol;
  BackwardConfig backward;
  backward.t_max = 5000;
  backward.tol = 1e-13;
  const StepGradients implicit =
      deq_gradients(t.layer, t.a0, t.y, 1.0, solver, SolverMode::kPicard, backward);
  GradientComparison out;
  out.iterations = implicit.trace.iterations;
  out.converged = implicit.trace.converged;
  const UnrolledModel model = UnrolledModel::from_layer(t.layer, implicit.trace.iterations, true);
  const StepGradients unrolled = unrolled_gradients(model, t.a0, t.y, 1.0);
  out.theta = group_error(implicit.grads, unrolled.grads, 0, kThetaSlotCount);
  out.lambda = group_error(implicit.grads, unrolled.grads, kThetaSlotCount, kThetaSlotCount + 1);
  out.w = group_error(implicit.grads, unrolled.grads, kThetaSlotCount + 1, kThetaSlotCount + 2);
  return out;
}

}  // namespace deq::test
