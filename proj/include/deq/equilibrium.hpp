#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deq/ledger.hpp"
#include "deq/rng.hpp"
#include "deq/tape.hpp"
#include "deq/tensor.hpp"

namespace deq {

// Parameter slots of the learned gradient operator, in storage order.
enum ThetaSlot : std::size_t {
  kConv1Weight,
  kConv1Bias,
  kAttention1Fc1Weight,
  kAttention1Fc1Bias,
  kAttention1Fc2Weight,
  kAttention1Fc2Bias,
  kNormGain,
  kNormOffset,
  kConv2Weight,
  kConv2Bias,
  kAttention2Fc1Weight,
  kAttention2Fc1Bias,
  kAttention2Fc2Weight,
  kAttention2Fc2Bias,
  kHeadWeight,
  kHeadBias,
  kThetaSlotCount
};

std::string_view theta_slot_name(std::size_t slot);

// Learned replacement for the data-fidelity gradient:
//   G(recon, y) = (recon - y) + head(block2(block1(concat(recon, y))))
// block1 = conv3d(2 -> C), channel attention, layer norm, ReLU
// block2 = conv3d(C -> C), channel attention, ReLU
// head   = conv2d over the C*L feature planes back to L bands.
class GThetaOperator {
 public:
  GThetaOperator() = default;
  // All weights zero, layer-norm gain one.
  GThetaOperator(std::size_t bands, std::size_t hidden, std::size_t attention_ratio);

  // Xavier-uniform convolution and MLP weights, zero biases.
  static GThetaOperator xavier(std::size_t bands, std::size_t hidden, std::size_t attention_ratio, Rng& rng);

  std::size_t bands() const { return bands_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t attention_ratio() const { return ratio_; }

  std::vector<Tensor>& theta() { return theta_; }
  const std::vector<Tensor>& theta() const { return theta_; }
  std::size_t parameter_count() const;

  // Record the operator on a tape. `theta` holds one node per slot.
  NodeId record(Tape& tape, NodeId recon, NodeId y_cube, NodeId y_volume, std::span<const NodeId> theta) const;
  std::vector<NodeId> bind(Tape& tape) const;

  // Tape-free evaluation on h x w x L cubes.
  Tensor apply(const Tensor& recon, const HsiCube& y) const;

 private:
  std::size_t bands_ = 0;
  std::size_t hidden_ = 0;
  std::size_t ratio_ = 1;
  std::vector<Tensor> theta_;
};

enum class ParamGroup { kEndmembers, kOperator };

// f(A) = Softmax_gamma(ST_{eta * lambda}(A - eta * G(A x3 W, Y) x3 W^T)).
// lambda = softplus(lambda_pre) so it stays nonnegative under updates.
struct EquilibriumLayer {
  GThetaOperator gtheta;
  Matrix w;           // L x R
  Tensor lambda_pre;  // single element
  double eta = 0.04;
  double gamma = 1.0;

  double lambda() const;
  std::size_t bands() const { return w.rows(); }
  std::size_t endmembers() const { return w.cols(); }

  // Flat parameter view: theta slots, lambda_pre, then W.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::vector<ParamGroup> parameter_groups() const;
};

// Gradient with one tensor per entry of EquilibriumLayer::parameters().
using GradSet = std::vector<Tensor>;

// Tape leaves for one application of the layer.
struct StepLeaves {
  std::vector<NodeId> theta;
  NodeId lambda_pre;
  NodeId w;
  NodeId y_cube;
  NodeId y_volume;
};

struct StepNodes {
  NodeId thresholded;  // ST output, before the temperature softmax
  NodeId out;
};

// Binds layer parameters and the observation as leaves. `y_volume` must be
// ops::cube_to_volume(y); both must outlive the tape.
StepLeaves bind_step_leaves(Tape& tape, const EquilibriumLayer& layer, const HsiCube& y, const Tensor& y_volume);
StepNodes record_equilibrium_step(Tape& tape, NodeId a, const StepLeaves& leaves, const GThetaOperator& gtheta,
                                  double eta, double gamma);

// Thrown when an iterate stops being finite; carries the offending tensor.
class NonFiniteIterate : public SolverError {
 public:
  NonFiniteIterate(const std::string& what, Tensor iterate) : SolverError(what), iterate_(std::move(iterate)) {}
  const Tensor& iterate() const { return iterate_; }

 private:
  Tensor iterate_;
};

// One application of the layer. Requires `a` on the simplex within 1e-6.
AbundanceTensor equilibrium_step(const AbundanceTensor& a, const HsiCube& y, const EquilibriumLayer& layer);

// Gradient-operator output G(recon, y) for the layer's operator.
Tensor gtheta_apply(const GThetaOperator& gtheta, const Tensor& recon, const HsiCube& y);

struct SolverConfig {
  std::size_t k_max = 10;
  double tol = 1e-3;
  std::size_t anderson_memory = 5;
  double anderson_ridge = 1e-4;
  double damping = 1.0;

  void validate() const;
};

enum class SolverMode { kPicard, kAnderson };

SolverMode parse_solver_mode(std::string_view name);
std::string_view solver_mode_name(SolverMode mode);

struct SolveTrace {
  std::size_t iterations = 0;
  std::vector<double> residuals;  // relative change per iteration
  bool converged = false;

  void write_csv(std::ostream& os) const;
};

struct SolveResult {
  Tensor a;
  SolveTrace trace;
};

// A fixed-point map split as a = project(pre(a)). Anderson mixing works on the
// `pre` values; every returned iterate is a projection. `lift`, when set, maps
// an iterate back to pre-projection space so the initial point can join the
// mixing history.
struct FixedPointProblem {
  std::function<Tensor(const Tensor&)> pre;
  std::function<Tensor(const Tensor&)> project;
  std::function<Tensor(const Tensor&)> lift;
};

SolveResult solve_fixed_point(const Tensor& a0, const FixedPointProblem& problem, const SolverConfig& cfg,
                              SolverMode mode, MemoryLedger* ledger = nullptr);

// The equilibrium layer as a fixed-point problem; `pre` is gamma * ST(...),
// `project` the per-pixel softmax.
FixedPointProblem layer_problem(const EquilibriumLayer& layer, const HsiCube& y, MemoryLedger* ledger = nullptr);

SolveResult solve_fixed_point(const AbundanceTensor& a0, const HsiCube& y, const EquilibriumLayer& layer,
                              const SolverConfig& cfg, SolverMode mode, MemoryLedger* ledger = nullptr);

// Largest deviation from nonnegativity / sum-to-one over all pixels.
struct SimplexViolation {
  double negativity = 0.0;
  double sum_error = 0.0;
};
SimplexViolation simplex_violation(const AbundanceTensor& a);

}  // namespace deq
