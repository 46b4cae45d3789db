#include <doctest.h>

#include <cmath>

#include "deq/equilibrium.hpp"
#include "deq/fd_check.hpp"
#include "deq/ops.hpp"
#include "deq/rng.hpp"
#include "deq/tape.hpp"
#include "test_util.hpp"
#include "vjp_suite.hpp"

using namespace deq;
using test::rel_err;

namespace {

// Direct nested-loop cross-correlation with zero padding.
Tensor conv3d_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t ci = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  Tensor y({co, d, h, wd});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (int dz = -1; dz <= 1; ++dz)
              for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                  const long zz = long(z) + dz, ii = long(i) + di, jj = long(j) + dj;
                  if (zz < 0 || ii < 0 || jj < 0 || zz >= long(d) || ii >= long(h) || jj >= long(wd)) continue;
                  s += w(o, c, dz + 1, di + 1, dj + 1) * x(c, zz, ii, jj);
                }
          y(o, z, i, j) = s;
        }
  return y;
}

Tensor conv2d_oracle(const Tensor& x4, const Tensor& w, const Tensor& b) {
  const std::size_t h = x4.dim(x4.rank() - 2), wd = x4.dim(x4.rank() - 1);
  const std::size_t ci = x4.size() / (h * wd), co = w.dim(0);
  const Tensor x = x4.reshaped({ci, h, wd});
  Tensor y({co, h, wd});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j) {
        double s = b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const long ii = long(i) + di, jj = long(j) + dj;
              if (ii < 0 || jj < 0 || ii >= long(h) || jj >= long(wd)) continue;
              s += w(o, c, di + 1, dj + 1) * x(c, ii, jj);
            }
        y(o, i, j) = s;
      }
  return y;
}

}  // namespace

TEST_CASE("conv3d forward") {
  Rng rng(1);
  SUBCASE("delta kernel selects a channel") {
    const Tensor x = rng.normal_tensor({3, 4, 5, 5});
    Tensor w({2, 3, 3, 3, 3});
    w(1, 2, 1, 1, 1) = 1.0;
    const Tensor y = ops::conv3d_forward(x, w, Tensor({2}));
    for (std::size_t i = 0; i < 100; ++i) {
      CHECK(y[i] == 0.0);
      CHECK(y[100 + i] == x[200 + i]);
    }
  }
  SUBCASE("zero weights give the bias") {
    const Tensor y = ops::conv3d_forward(rng.normal_tensor({2, 3, 4, 4}), Tensor({2, 2, 3, 3, 3}), Tensor({2}, {1.5, -2}));
    for (std::size_t i = 0; i < 48; ++i) CHECK(y[i] == 1.5);
    for (std::size_t i = 48; i < 96; ++i) CHECK(y[i] == -2.0);
  }
  SUBCASE("matches nested loops") {
    for (const Shape& s : {Shape{2, 4, 5, 5}, Shape{3, 2, 1, 7}, Shape{1, 5, 6, 3}, Shape{2, 1, 1, 1}}) {
      const Tensor x = rng.normal_tensor(s);
      const Tensor w = rng.normal_tensor({3, s[0], 3, 3, 3});
      const Tensor b = rng.normal_tensor({3});
      CHECK(rel_err(ops::conv3d_forward(x, w, b), conv3d_oracle(x, w, b)) < 1e-12);
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(ops::conv3d_forward(Tensor({2, 3, 3, 3}), Tensor({1, 3, 3, 3, 3}), Tensor({1})), DimensionError);
    CHECK_THROWS_AS(ops::conv3d_forward(Tensor({2, 3, 3, 3}), Tensor({1, 2, 3, 3, 3}), Tensor({2})), DimensionError);
  }
}

TEST_CASE("conv3d vjp against the adjoint of the loop oracle") {
  // <gy, conv(x)> is bilinear, so the VJPs are checked through exact inner
  // product identities with the oracle.
  Rng rng(2);
  for (const Shape& s : {Shape{2, 3, 4, 5}, Shape{1, 2, 6, 1}, Shape{3, 1, 3, 3}}) {
    const Tensor x = rng.normal_tensor(s);
    const Tensor w = rng.normal_tensor({2, s[0], 3, 3, 3});
    const Tensor gy = rng.normal_tensor({2, s[1], s[2], s[3]});
    const Tensor dx = rng.normal_tensor(s);
    const Tensor dw = rng.normal_tensor(w.shape());
    const Tensor zero_b({2});
    const auto g = ops::conv3d_vjp(x, w, gy);
    CHECK(std::abs(dot(g.x, dx) - dot(gy, conv3d_oracle(dx, w, zero_b))) < 1e-10);
    CHECK(std::abs(dot(g.w, dw) - dot(gy, conv3d_oracle(x, dw, zero_b))) < 1e-10);
    double bsum = 0.0;
    for (std::size_t i = 0; i < gy.size() / 2; ++i) bsum += gy[i];
    CHECK(std::abs(g.b[0] - bsum) < 1e-10);
  }
}

TEST_CASE("conv3d vjp on a 1x2x3x3 input passes central differences") {
  Rng rng(3);
  for (int p = 0; p < 5; ++p) {
    const Tensor x = rng.normal_tensor({1, 2, 3, 3});
    const Tensor w = rng.normal_tensor({2, 1, 3, 3, 3});
    const Tensor b = rng.normal_tensor({2});
    const Tensor cot = rng.normal_tensor({2, 2, 3, 3});
    const auto fx = contract([&](const Tensor& v) { return ops::conv3d_forward(v, w, b); },
                             [&](const Tensor& v, const Tensor& c) { return ops::conv3d_vjp(v, w, c).x; }, cot);
    const auto fw = contract([&](const Tensor& v) { return ops::conv3d_forward(x, v, b); },
                             [&](const Tensor& v, const Tensor& c) { return ops::conv3d_vjp(x, v, c).w; }, cot);
    const auto fb = contract([&](const Tensor& v) { return ops::conv3d_forward(x, w, v); },
                             [&](const Tensor&, const Tensor& c) { return ops::conv3d_vjp(x, w, c).b; }, cot);
    CHECK(fd_check(fx, x, rng.normal_tensor(x.shape()), 1e-5) < 1e-6);
    CHECK(fd_check(fw, w, rng.normal_tensor(w.shape()), 1e-5) < 1e-6);
    CHECK(fd_check(fb, b, rng.normal_tensor(b.shape()), 1e-5) < 1e-6);
  }
}

TEST_CASE("conv vjps: zero cotangent and linearity") {
  Rng rng(4);
  const Tensor x = rng.normal_tensor({2, 3, 4, 4});
  const Tensor w3 = rng.normal_tensor({3, 2, 3, 3, 3});
  const Tensor w2 = rng.normal_tensor({3, 6, 3, 3});
  const Tensor gy3 = rng.normal_tensor({3, 3, 4, 4});
  const Tensor gy2 = rng.normal_tensor({3, 4, 4});
  const auto z3 = ops::conv3d_vjp(x, w3, Tensor(gy3.shape()));
  const auto z2 = ops::conv2d_vjp(x, w2, Tensor(gy2.shape()));
  CHECK(max_abs(z3.x) + max_abs(z3.w) + max_abs(z3.b) == 0.0);
  CHECK(max_abs(z2.x) + max_abs(z2.w) + max_abs(z2.b) == 0.0);
  const auto a3 = ops::conv3d_vjp(x, w3, gy3);
  const auto b3 = ops::conv3d_vjp(x, w3, 2.0 * gy3);
  CHECK(rel_err(b3.x, 2.0 * a3.x) < 1e-14);
  CHECK(rel_err(b3.w, 2.0 * a3.w) < 1e-14);
  const auto a2 = ops::conv2d_vjp(x, w2, gy2);
  const auto b2 = ops::conv2d_vjp(x, w2, 2.0 * gy2);
  CHECK(rel_err(b2.x, 2.0 * a2.x) < 1e-14);
  CHECK(rel_err(b2.w, 2.0 * a2.w) < 1e-14);
  SUBCASE("requested cotangents only") {
    const auto only_x = ops::conv3d_vjp(x, w3, gy3, true, false);
    CHECK(only_x.w.empty());
    CHECK(only_x.x == a3.x);
  }
}

TEST_CASE("conv2d forward") {
  Rng rng(5);
  SUBCASE("delta kernel selects a flattened channel") {
    const Tensor x = rng.normal_tensor({2, 3, 4, 5});
    Tensor w({1, 6, 3, 3});
    w(0, 4, 1, 1) = 1.0;
    const Tensor y = ops::conv2d_forward(x, w, Tensor({1}));
    for (std::size_t i = 0; i < 20; ++i) CHECK(y[i] == x[4 * 20 + i]);
  }
  SUBCASE("zero weights give the bias") {
    const Tensor y = ops::conv2d_forward(rng.normal_tensor({2, 4, 4}), Tensor({1, 2, 3, 3}), Tensor({1}, {0.25}));
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.25);
  }
  SUBCASE("matches nested loops") {
    for (const Shape& s : {Shape{2, 3, 4, 5}, Shape{4, 1, 7}, Shape{1, 2, 1, 1}}) {
      const Tensor x = rng.normal_tensor(s);
      const std::size_t ci = x.size() / (s[s.size() - 2] * s.back());
      const Tensor w = rng.normal_tensor({3, ci, 3, 3});
      const Tensor b = rng.normal_tensor({3});
      CHECK(rel_err(ops::conv2d_forward(x, w, b), conv2d_oracle(x, w, b)) < 1e-12);
    }
  }
}

TEST_CASE("channel attention") {
  Rng rng(6);
  SUBCASE("zero MLP gates at one half") {
    const Tensor x = rng.normal_tensor({4, 2, 3, 3});
    const Tensor y = ops::channel_attention_forward(x, Tensor({1, 4}), Tensor({1}), Tensor({4, 1}), Tensor({4}),
                                                    nullptr);
    // mlp(avg) + mlp(max) = 0, sigmoid(0) = 0.5
    CHECK(rel_err(y, 0.5 * x) < 1e-15);
  }
  SUBCASE("constant channels pool identically") {
    Tensor x({2, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
      x[i] = 0.7;
      x[4 + i] = -0.3;
    }
    const Tensor f1 = rng.normal_tensor({1, 2}), b1 = rng.normal_tensor({1});
    const Tensor f2 = rng.normal_tensor({2, 1}), b2 = rng.normal_tensor({2});
    ops::AttentionCache cache;
    const Tensor y = ops::channel_attention_forward(x, f1, b1, f2, b2, &cache);
    CHECK(cache.avg == cache.max);
    for (std::size_t c = 0; c < 2; ++c) {
      const double xc = x[c * 4];
      const double h = std::max(0.0, f1(0, 0) * 0.7 + f1(0, 1) * -0.3 + b1[0]);
      const double z = 2.0 * (f2(c, 0) * h + b2[c]);
      CHECK(y[c * 4] == doctest::Approx(xc / (1.0 + std::exp(-z))).epsilon(1e-14));
    }
  }
  SUBCASE("divisibility") {
    CHECK(ops::attention_hidden_width(8, 4) == 2);
    CHECK_THROWS_AS(ops::attention_hidden_width(6, 4), ConfigError);
  }
  SUBCASE("max-pool ties route to the first maximal index") {
    Tensor x({1, 1, 1, 3}, {2.0, 2.0, 1.0});
    const Tensor f1({1, 1}, {1.0}), b1({1}), f2({1, 1}, {1.0}), b2({1});
    ops::AttentionCache cache;
    ops::channel_attention_forward(x, f1, b1, f2, b2, &cache);
    CHECK(cache.argmax[0] == 0);
  }
}

TEST_CASE("layer norm") {
  Rng rng(7);
  SUBCASE("constant groups map to the offset") {
    Tensor x({2, 3, 2, 2});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t p = 0; p < 4; ++p) x[(c * 3 + l) * 4 + p] = 1.5 + 0.1 * p;
    const Tensor gain({2}, {2.0, 3.0}), offset({2}, {0.25, -0.5});
    const Tensor y = ops::layer_norm_forward(x, gain, offset, nullptr);
    for (std::size_t i = 0; i < 12; ++i) CHECK(y[i] == doctest::Approx(0.25).epsilon(1e-12));
    for (std::size_t i = 12; i < 24; ++i) CHECK(y[i] == doctest::Approx(-0.5).epsilon(1e-12));
  }
  SUBCASE("zero mean and unit variance per position before the affine map") {
    const Tensor x = rng.normal_tensor({3, 4, 2, 3}, 1.0, 2.0);
    const Tensor y = ops::layer_norm_forward(x, Tensor({3}, 1.0), Tensor({3}), nullptr);
    for (std::size_t p = 0; p < 6; ++p) {
      double m = 0, v = 0;
      for (std::size_t g = 0; g < 12; ++g) m += y[g * 6 + p];
      m /= 12;
      for (std::size_t g = 0; g < 12; ++g) v += (y[g * 6 + p] - m) * (y[g * 6 + p] - m);
      v /= 12;
      CHECK(std::abs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator
    }
  }
}

TEST_CASE("soft threshold") {
  CHECK(ops::soft_threshold_forward(Tensor({2}, {0.8, -0.2}), 0.5)[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(ops::soft_threshold_forward(Tensor({2}, {0.8, -0.2}), 0.5)[1] == 0.0);
  CHECK(ops::soft_threshold_forward(Tensor({1}, {-0.9}), 0.5)[0] == doctest::Approx(-0.4).epsilon(1e-15));
  Rng rng(8);
  const Tensor x = rng.normal_tensor({20});
  CHECK(ops::soft_threshold_forward(x, 0.0) == x);
  CHECK_THROWS_AS(ops::soft_threshold_forward(x, -0.1), DomainError);
  // Zero derivative exactly at the kink.
  const auto g = ops::soft_threshold_vjp(Tensor({2}, {0.5, -0.5}), 0.5, Tensor({2}, {1.0, 1.0}));
  CHECK(g.x[0] == 0.0);
  CHECK(g.x[1] == 0.0);
}

TEST_CASE("temperature softmax") {
  CHECK(ops::softmax_temp_forward(Tensor({2}, {0.0, 0.0}), 3.7) == Tensor({2}, {0.5, 0.5}));
  const Tensor big = ops::softmax_temp_forward(Tensor({2}, {1000.0, 0.0}), 1.0);
  CHECK(all_finite(big));
  CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big[1] < 1e-300);
  // Full Jacobian of one R = 4 pixel by columns.
  Rng rng(9);
  const Tensor x = rng.normal_tensor({4});
  const double gamma = 0.8;
  const Tensor y = ops::softmax_temp_forward(x, gamma);
  for (std::size_t k = 0; k < 4; ++k) {
    Tensor e({4});
    e[k] = 1.0;
    const Tensor row = ops::softmax_temp_vjp(y, gamma, e);  // d y_k / d x
    for (std::size_t j = 0; j < 4; ++j) {
      Tensor xp = x, xm = x;
      xp[j] += 1e-6;
      xm[j] -= 1e-6;
      const double fd = (ops::softmax_temp_forward(xp, gamma)[k] - ops::softmax_temp_forward(xm, gamma)[k]) / 2e-6;
      CHECK(std::abs(row[j] - fd) < 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("softplus pair") {
  for (double v : {1e-4, 0.01, 0.5, 3.0, 40.0}) {
    CHECK(ops::softplus(ops::softplus_inverse(v)) == doctest::Approx(v).epsilon(1e-12));
  }
  CHECK(ops::softplus(-800.0) >= 0.0);
  CHECK(std::isfinite(ops::softplus(800.0)));
  CHECK(ops::softplus_grad(0.0) == doctest::Approx(0.5));
}

TEST_CASE("fd_check behaviour on simple maps") {
  Rng rng(10);
  const Tensor a = rng.normal_tensor({5});
  const ScalarFunction lin{[&](const Tensor& x) { return dot(a, x); }, [&](const Tensor&) { return a; }};
  for (double step : {10.0, 1.0, 1e-2, 1e-4}) {
    CHECK(fd_check(lin, rng.normal_tensor({5}), rng.normal_tensor({5}), step) < 1e-10);
  }
  const auto relu = contract([](const Tensor& x) { return ops::relu_forward(x); },
                             [](const Tensor& x, const Tensor& c) { return ops::relu_vjp(x, c); }, Tensor({1}, {1.0}));
  CHECK(fd_check(relu, Tensor({1}, {1.0}), Tensor({1}, {1.0}), 1e-5) < 1e-7);
}

TEST_CASE("property: every tape primitive passes finite differences at 20 random points") {
  for (const auto& s : test::run_vjp_checks(20, 123)) {
    INFO(s.name << " worst " << s.worst);
    CHECK(s.worst < 1e-6);
  }
}

TEST_CASE("property: vjps are linear in the cotangent") {
  Rng rng(11);
  for (const auto& check : test::vjp_checks()) {
    const test::Instance inst = check.sample(rng);
    Tape tape;
    std::vector<NodeId> leaves;
    for (const Tensor& t : inst.inputs) leaves.push_back(tape.input(t));
    const NodeId out = inst.record(tape, leaves);
    const Tensor c1 = rng.normal_tensor(tape.value(out).shape());
    const Tensor c2 = rng.normal_tensor(c1.shape());
    const NodeId target[] = {leaves[check.wrt]};
    const Tensor g1 = tape.backward(out, c1, target)[0];
    const Tensor g2 = tape.backward(out, c2, target)[0];
    const Tensor g12 = tape.backward(out, 1.5 * c1 + c2, target)[0];
    INFO(check.name);
    CHECK(frobenius_norm(g12 - (1.5 * g1 + g2)) <= 1e-12 * std::max(1.0, frobenius_norm(g12)));
  }
}

TEST_CASE("property: forward passes are pure") {
  Rng rng(12);
  for (const auto& check : test::vjp_checks()) {
    const test::Instance inst = check.sample(rng);
    Tape t1, t2;
    std::vector<NodeId> l1, l2;
    for (const Tensor& t : inst.inputs) {
      l1.push_back(t1.input(t));
      l2.push_back(t2.input(t));
    }
    INFO(check.name);
    CHECK(t1.value(inst.record(t1, l1)) == t2.value(inst.record(t2, l2)));
  }
}

TEST_CASE("G_theta composite passes finite differences") {
  Rng rng(13);
  const std::size_t bands = 6;
  GThetaOperator g = GThetaOperator::xavier(bands, 4, 2, rng);
  // Nonzero biases and gains so every branch is exercised.
  for (std::size_t s = 0; s < g.theta().size(); ++s) {
    for (auto& v : g.theta()[s].values()) v += 0.1 * rng.normal();
  }
  const HsiCube y = rng.uniform_tensor({3, 3, bands}, 0.1, 1.0);
  const Tensor recon = rng.uniform_tensor({3, 3, bands}, 0.1, 1.0);
  const Tensor cot = rng.normal_tensor({3, 3, bands});
  auto value = [&](const Tensor& r) { return dot(cot, g.apply(r, y)); };
  auto grad = [&](const Tensor& r) {
    Tape tape;
    const Tensor yv = ops::cube_to_volume(y);
    const NodeId rn = tape.input(r), yc = tape.input(y), yvn = tape.input(yv);
    const auto th = g.bind(tape);
    const NodeId out = g.record(tape, rn, yc, yvn, th);
    const NodeId target[] = {rn};
    return tape.backward(out, cot, target)[0];
  };
  for (int p = 0; p < 5; ++p) {
    CHECK(fd_check({value, grad}, recon, rng.normal_tensor(recon.shape()), 1e-5) < 1e-5);
  }
}

TEST_CASE("tape backward gives zeros for targets that do not influence the output") {
  Tape tape;
  const Tensor a({2}, {1.0, 2.0}), b({2}, {3.0, 4.0});
  const NodeId na = tape.input(a), nb = tape.input(b);
  const NodeId out = tape.scale(na, 2.0);
  const NodeId targets[] = {na, nb};
  const auto g = tape.backward(out, Tensor({2}, {1.0, 1.0}), targets);
  CHECK(g[0] == Tensor({2}, {2.0, 2.0}));
  CHECK(g[1] == Tensor({2}, {0.0, 0.0}));
}
