#pragma once

#include <functional>

#include "deq/tensor.hpp"

namespace deq {

// A scalar-valued function with its gradient. Vector-valued primitives are
// checked by contracting their output with a fixed cotangent, so the gradient
// here is exactly the primitive's VJP applied to that cotangent.
struct ScalarFunction {
  std::function<double(const Tensor&)> value;
  std::function<Tensor(const Tensor&)> gradient;
};

// |<grad, direction> - central difference| / (|central difference| + 1e-12)
double fd_check(const ScalarFunction& op, const Tensor& point, const Tensor& direction, double step);

// Wraps a vector map and its VJP as <cotangent, f(x)>.
ScalarFunction contract(std::function<Tensor(const Tensor&)> forward,
                        std::function<Tensor(const Tensor& x, const Tensor& cotangent)> vjp, Tensor cotangent);

}  // namespace deq
