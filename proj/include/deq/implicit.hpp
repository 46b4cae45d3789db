#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "deq/equilibrium.hpp"
#include "deq/ledger.hpp"
#include "deq/tape.hpp"
#include "deq/tensor.hpp"

namespace deq {

// Bound on the arccos argument so identical spectra keep a finite derivative.
inline constexpr double kSadClamp = 1e-9;

struct LossValue {
  double total = 0.0;
  double re_component = 0.0;
  double sad_component = 0.0;
  double alpha = 1.0;
};

// ||yhat - y||_F^2 / N with N the pixel count. `grad` receives d/dyhat.
double loss_re(const HsiCube& y, const HsiCube& yhat, Tensor* grad = nullptr);
// Mean per-pixel spectral angle. The gradient is zero on pixels whose cosine
// hits the clamp.
double loss_sad(const HsiCube& y, const HsiCube& yhat, Tensor* grad = nullptr);
// alpha * RE + SAD.
LossValue total_loss(const HsiCube& y, const HsiCube& yhat, double alpha, Tensor* grad = nullptr);

HsiCube reconstruct(const AbundanceTensor& a_star, const Matrix& w);

enum class DivergencePolicy { kThrow, kTruncate };

DivergencePolicy parse_divergence_policy(std::string_view name);
std::string_view divergence_policy_name(DivergencePolicy policy);

struct BackwardConfig {
  std::size_t t_max = 10;
  double tol = 1e-4;
  DivergencePolicy on_divergence = DivergencePolicy::kThrow;

  void validate() const;
};

struct AdjointState {
  Tensor v;
  std::vector<double> term_norms;  // norm of every accumulated term
  std::size_t terms_used = 0;
  bool diverged = false;  // truncated after rising term norms
};

// Number of consecutive rising term norms treated as divergence.
inline constexpr std::size_t kDivergenceRun = 3;

// v = sum_n (J^T)^n g where `jt` applies J^T. Stops before adding a term whose
// norm relative to the running sum is below tol, or after t_max terms.
AdjointState neumann_series(const std::function<Tensor(const Tensor&)>& jt, const Tensor& g,
                            const BackwardConfig& cfg, MemoryLedger* ledger = nullptr);

// One recorded application of the layer at a fixed point. The tape is kept
// for the lifetime of the object so every Neumann term reuses the same
// intermediates; its size does not depend on the forward or backward
// iteration counts. `layer` and `y` must outlive the object.
class StepLinearization {
 public:
  StepLinearization(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                    MemoryLedger* ledger = nullptr);
  StepLinearization(const StepLinearization&) = delete;
  StepLinearization& operator=(const StepLinearization&) = delete;

  const Tensor& output() const { return tape_.value(nodes_.out); }
  // (df/da)^T v
  Tensor input_vjp(const Tensor& v) const;
  // (df/dTheta)^T v, ordered like EquilibriumLayer::parameters().
  GradSet param_vjp(const Tensor& v) const;

 private:
  Tensor a_star_;
  Tensor y_volume_;
  Tape tape_;
  StepLeaves leaves_;
  NodeId a_node_;
  StepNodes nodes_;
};

AdjointState neumann_vjp(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                         const Tensor& loss_grad, const BackwardConfig& cfg, MemoryLedger* ledger = nullptr);

GradSet param_gradients(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                        const Tensor& v_star, MemoryLedger* ledger = nullptr);

GradSet zero_grads(const EquilibriumLayer& layer);

}  // namespace deq
