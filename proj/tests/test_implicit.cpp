#include <doctest.h>

#include <cmath>
#include <numbers>

#include "deq/fd_check.hpp"
#include "deq/implicit.hpp"
#include "deq/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace deq;
using test::rel_err;

TEST_CASE("reconstruction error loss") {
  Rng rng(1);
  const HsiCube y = rng.uniform_tensor({2, 3, 4}, 0.0, 1.0);
  Tensor g;
  CHECK(loss_re(y, y, &g) == 0.0);
  CHECK(max_abs(g) == 0.0);
  CHECK(loss_re(Tensor({1, 1, 2}, {0.0, 0.0}), Tensor({1, 1, 2}, {3.0, 4.0})) == doctest::Approx(25.0));
  // N counts pixels, not entries.
  CHECK(loss_re(Tensor({1, 2, 2}), Tensor({1, 2, 2}, {3.0, 4.0, 0.0, 0.0})) == doctest::Approx(12.5));
  const HsiCube yhat = rng.uniform_tensor({2, 3, 4}, 0.0, 1.0);
  const ScalarFunction f{[&](const Tensor& x) { return loss_re(y, x); },
                         [&](const Tensor& x) {
                           Tensor gr;
                           loss_re(y, x, &gr);
                           return gr;
                         }};
  for (int p = 0; p < 5; ++p) CHECK(fd_check(f, yhat, rng.normal_tensor(yhat.shape()), 1e-5) < 1e-8);
  CHECK_THROWS_AS(loss_re(y, Tensor({2, 3, 5})), DimensionError);
}

TEST_CASE("spectral angle loss") {
  Rng rng(2);
  const HsiCube y = rng.uniform_tensor({3, 2, 5}, 0.1, 1.0);
  CHECK(loss_sad(y, y) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss_sad(y, 2.0 * y) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss_sad(Tensor({1, 1, 2}, {1.0, 0.0}), Tensor({1, 1, 2}, {0.0, 3.0})) ==
        doctest::Approx(std::numbers::pi / 2).epsilon(1e-15));
  SUBCASE("gradient is zero at the clamp") {
    Tensor g;
    loss_sad(y, y, &g);
    CHECK(max_abs(g) == 0.0);
  }
  SUBCASE("zero-norm pixel names its location") {
    HsiCube z = y;
    for (std::size_t l = 0; l < 5; ++l) z[(1 * 2 + 1) * 5 + l] = 0.0;
    try {
      loss_sad(y, z);
      FAIL("expected DomainError");
    } catch (const DomainError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("row 1") != std::string::npos);
      CHECK(msg.find("col 1") != std::string::npos);
    }
  }
  SUBCASE("finite differences away from the clamp") {
    const HsiCube yhat = rng.uniform_tensor({3, 2, 5}, 0.1, 1.0);
    const ScalarFunction f{[&](const Tensor& x) { return loss_sad(y, x); },
                           [&](const Tensor& x) {
                             Tensor gr;
                             loss_sad(y, x, &gr);
                             return gr;
                           }};
    for (int p = 0; p < 10; ++p) CHECK(fd_check(f, yhat, rng.normal_tensor(yhat.shape()), 1e-5) < 1e-6);
  }
}

TEST_CASE("total loss is alpha-linear") {
  Rng rng(3);
  const HsiCube y = rng.uniform_tensor({2, 2, 6}, 0.1, 1.0);
  const HsiCube yhat = rng.uniform_tensor({2, 2, 6}, 0.1, 1.0);
  for (double alpha : {0.0, 0.1, 1.0, 10.0}) {
    Tensor gt, gre, gsad;
    const LossValue v = total_loss(y, yhat, alpha, &gt);
    const double re = loss_re(y, yhat, &gre);
    const double sad = loss_sad(y, yhat, &gsad);
    CHECK(v.total == doctest::Approx(alpha * re + sad).epsilon(1e-14));
    CHECK(v.re_component == re);
    CHECK(v.sad_component == sad);
    CHECK(rel_err(gt, alpha * gre + gsad) < 1e-14);
  }
}

TEST_CASE("reconstruct") {
  Rng rng(4);
  const Matrix w = rng.uniform_tensor({5, 3}, 0.0, 1.0);
  AbundanceTensor onehot({1, 3, 3});
  for (std::size_t p = 0; p < 3; ++p) onehot[p * 3 + p] = 1.0;
  const HsiCube yh = reconstruct(onehot, w);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t l = 0; l < 5; ++l) CHECK(yh[p * 5 + l] == w(l, p));
  const AbundanceTensor a = test::random_simplex(2, 2, 4, rng);
  CHECK(reconstruct(a, identity_matrix(4)) == a);
  const AbundanceTensor b = test::random_simplex(3, 2, 3, rng);
  const HsiCube r = reconstruct(b, w);
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t l = 0; l < 5; ++l) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += w(l, k) * b[p * 3 + k];
      CHECK(r[p * 5 + l] == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("neumann series on linear fixtures") {
  SUBCASE("matches the dense adjoint solve") {
    for (std::uint64_t seed : {1, 2, 3}) CHECK(test::neumann_dense_error(20, 0.85, seed) < 1e-6);
  }
  SUBCASE("J = 0 collapses to the loss gradient after one term") {
    Rng rng(5);
    const Tensor g = rng.normal_tensor({20});
    const AdjointState st = neumann_series([](const Tensor& v) { return Tensor(v.shape()); }, g, BackwardConfig{});
    CHECK(st.terms_used == 1);
    CHECK(st.v == g);
  }
  SUBCASE("zero loss gradient gives zero") {
    const AdjointState st = neumann_series([](const Tensor& v) { return 0.5 * v; }, Tensor({7}), BackwardConfig{});
    CHECK(max_abs(st.v) == 0.0);
  }
  SUBCASE("term norms shrink geometrically on a contraction") {
    Rng rng(6);
    const Matrix j = test::contraction_matrix(15, 0.7, rng);
    auto jt = [&](const Tensor& v) {
      Tensor out({15});
      for (std::size_t r = 0; r < 15; ++r)
        for (std::size_t c = 0; c < 15; ++c) out[c] += j(r, c) * v[r];
      return out;
    };
    BackwardConfig cfg;
    cfg.t_max = 50;
    cfg.tol = 1e-12;
    const AdjointState st = neumann_series(jt, rng.normal_tensor({15}), cfg);
    REQUIRE(st.term_norms.size() > 2);
    for (std::size_t n = 1; n < st.term_norms.size(); ++n) {
      CHECK(st.term_norms[n] / st.term_norms[n - 1] < 1.0);
    }
  }
  SUBCASE("stops at t_max or the relative tolerance") {
    auto half = [](const Tensor& v) { return 0.5 * v; };
    BackwardConfig cfg;
    cfg.t_max = 4;
    cfg.tol = 1e-12;
    const AdjointState st = neumann_series(half, Tensor({1}, {1.0}), cfg);
    CHECK(st.terms_used == 4);
    CHECK(st.v[0] == doctest::Approx(1.875));
    cfg.t_max = 100;
    cfg.tol = 0.1;
    // Terms 1, .5, .25, .125: .125 / 1.75 < 0.1 stops before adding it.
    const AdjointState st2 = neumann_series(half, Tensor({1}, {1.0}), cfg);
    CHECK(st2.terms_used == 3);
    CHECK(st2.v[0] == doctest::Approx(1.75));
  }
  SUBCASE("divergence policy") {
    auto grow = [](const Tensor& v) { return 1.5 * v; };
    BackwardConfig cfg;
    cfg.t_max = 50;
    CHECK_THROWS_AS(neumann_series(grow, Tensor({2}, {1.0, 1.0}), cfg), BackwardError);
    cfg.on_divergence = DivergencePolicy::kTruncate;
    const AdjointState st = neumann_series(grow, Tensor({2}, {1.0, 1.0}), cfg);
    CHECK(st.diverged);
    CHECK(st.terms_used < 50);
    CHECK(all_finite(st.v));
  }
  SUBCASE("configuration") {
    BackwardConfig cfg;
    cfg.t_max = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(parse_divergence_policy("truncate") == DivergencePolicy::kTruncate);
    CHECK_THROWS_AS(parse_divergence_policy("ignore"), ConfigError);
  }
}

TEST_CASE("parameter gradients") {
  const test::TinyInstance t = test::tiny_instance(7);
  SolverConfig solver;
  solver.k_max = 200;
  solver.tol = 1e-10;
  const AbundanceTensor a_star = solve_fixed_point(t.a0, t.y, t.layer, solver, SolverMode::kAnderson).a;
  SUBCASE("v = 0 gives all zeros") {
    const GradSet g = param_gradients(t.layer, a_star, t.y, Tensor(a_star.shape()));
    REQUIRE(g.size() == t.layer.parameters().size());
    for (const Tensor& x : g) CHECK(max_abs(x) == 0.0);
  }
  SUBCASE("the linearization reproduces the step and its input VJP") {
    StepLinearization lin(t.layer, a_star, t.y);
    CHECK(rel_err(lin.output(), equilibrium_step(a_star, t.y, t.layer)) < 1e-13);
    Rng rng(8);
    const Tensor cot = rng.normal_tensor(a_star.shape());
    // FD along directions tangent to the simplex.
    for (int p = 0; p < 3; ++p) {
      Tensor dir = rng.normal_tensor(a_star.shape());
      for (std::size_t px = 0; px < 36; ++px) {
        double m = 0;
        for (std::size_t k = 0; k < 3; ++k) m += dir[px * 3 + k] / 3;
        for (std::size_t k = 0; k < 3; ++k) dir[px * 3 + k] -= m;
      }
      const double h = 1e-6;
      const double fd = (dot(cot, equilibrium_step(a_star + h * dir, t.y, t.layer)) -
                         dot(cot, equilibrium_step(a_star - h * dir, t.y, t.layer))) / (2 * h);
      CHECK(std::abs(dot(lin.input_vjp(cot), dir) - fd) < 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("implicit gradients match backprop through the solver") {
  const test::GradientComparison c = test::implicit_vs_unrolled(11);
  REQUIRE(c.converged);
  CHECK(c.theta < 1e-2);
  CHECK(c.lambda < 1e-2);
  CHECK(c.w < 1e-2);
}

TEST_CASE("implicit gradient matches finite differences of the whole pipeline") {
  const test::TinyInstance t = test::tiny_instance(12);
  SolverConfig solver;
  solver.k_max = 2000;
  solver.tol = 1e-12;
  BackwardConfig backward;
  backward.t_max = 2000;
  backward.tol = 1e-13;
  const StepGradients sg = deq_gradients(t.layer, t.a0, t.y, 1.0, solver, SolverMode::kAnderson, backward);
  Rng rng(13);
  EquilibriumLayer probe = t.layer;
  const auto params = probe.parameters();
  std::vector<Tensor> dirs;
  double analytic = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    dirs.push_back(rng.normal_tensor(params[i]->shape()));
    analytic += dot(sg.grads[i], dirs[i]);
  }
  auto loss_at = [&](double h) {
    EquilibriumLayer l = t.layer;
    const auto ps = l.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) axpy(h, dirs[i], *ps[i]);
    const AbundanceTensor a = solve_fixed_point(t.a0, t.y, l, solver, SolverMode::kAnderson).a;
    return total_loss(t.y, reconstruct(a, l.w), 1.0).total;
  };
  const double h = 1e-4;
  const double fd = (loss_at(h) - loss_at(-h)) / (2 * h);
  CHECK(std::abs(analytic - fd) / std::abs(fd) < 1e-2);
}
