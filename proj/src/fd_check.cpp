#include "deq/fd_check.hpp"

#include <cmath>

namespace deq {

double fd_check(const ScalarFunction& op, const Tensor& point, const Tensor& direction, double step) {
  point.require_same_shape(direction, "fd_check");
  Tensor plus = point;
  Tensor minus = point;
  axpy(step, direction, plus);
  axpy(-step, direction, minus);
  const double central = (op.value(plus) - op.value(minus)) / (2.0 * step);
  const double analytic = dot(op.gradient(point), direction);
  return std::abs(analytic - central) / (std::abs(central) + 1e-12);
}

ScalarFunction contract(std::function<Tensor(const Tensor&)> forward,
                        std::function<Tensor(const Tensor& x, const Tensor& cotangent)> vjp, Tensor cotangent) {
  ScalarFunction f;
  f.value = [forward, cotangent](const Tensor& x) { return dot(cotangent, forward(x)); };
  f.gradient = [vjp = std::move(vjp), cotangent](const Tensor& x) { return vjp(x, cotangent); };
  return f;
}

}  // namespace deq
