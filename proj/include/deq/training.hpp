#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "deq/equilibrium.hpp"
#include "deq/implicit.hpp"
#include "deq/ledger.hpp"
#include "deq/tensor.hpp"

namespace deq {

struct TrainConfig {
  std::size_t epochs = 200;
  double lr_endmembers = 0.005;
  double lr_operator = 0.01;
  double decay_endmembers = 1e-5;
  double decay_operator = 1e-5;
  double alpha = 1.0;
  double gamma = 0.8;
  double eta = 0.04;
  double lambda0 = 0.01;
  std::size_t hidden = 8;
  std::size_t attention_ratio = 4;
  std::uint64_t seed = 0;
  SolverConfig solver;
  SolverMode solver_mode = SolverMode::kAnderson;
  BackwardConfig backward;

  void validate() const;

  // Global synthetic-scene settings; the W learning rate and temperature
  // depend on the noise level (15 dB vs 30 dB).
  static TrainConfig synthetic(double snr_db);
  static TrainConfig samson();
};

struct AdamGroup {
  double lr = 0.0;
  double weight_decay = 0.0;
};

// Indexed by ParamGroup.
using AdamGroups = std::array<AdamGroup, 2>;

AdamGroups adam_groups(const TrainConfig& cfg);

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerState for_params(const std::vector<Tensor*>& params);
};

// Decoupled weight decay followed by the bias-corrected adaptive-moment update.
// Endmember-group tensors are clamped to >= 0 afterwards. Returns false (and
// leaves everything untouched) when a gradient entry is not finite.
bool adam_step(const std::vector<Tensor*>& params, const GradSet& grads, const std::vector<ParamGroup>& groups,
               OptimizerState& state, const AdamGroups& settings);

// The update operator stacked `layers` times. With `shared` every layer uses
// operators[0] and lambda_pres[0]; otherwise each layer has its own. W is
// always shared.
struct UnrolledModel {
  std::vector<GThetaOperator> operators;
  std::vector<Tensor> lambda_pres;
  Matrix w;
  double eta = 0.04;
  double gamma = 1.0;
  std::size_t layers = 1;
  bool shared = true;

  static UnrolledModel from_layer(const EquilibriumLayer& layer, std::size_t layers, bool shared);

  // Per distinct layer: theta slots then lambda_pre; W last.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<ParamGroup> parameter_groups() const;
  std::size_t parameter_count() const;
};

// Scalar count of every trainable tensor in a group set.
std::size_t parameter_count(const std::vector<const Tensor*>& params);

// d loss / d W from the reconstruction yhat = a x3 W, given d loss / d yhat.
Matrix endmember_gradient(const Tensor& grad_yhat, const AbundanceTensor& a);

struct StepGradients {
  LossValue loss;
  GradSet grads;
  AbundanceTensor a;
  SolveTrace trace;      // DEQ only
  AdjointState adjoint;  // DEQ only
};

// Forward solve, loss, Neumann adjoint and parameter gradients for one step.
StepGradients deq_gradients(const EquilibriumLayer& layer, const AbundanceTensor& a0, const HsiCube& y, double alpha,
                            const SolverConfig& solver, SolverMode mode, const BackwardConfig& backward,
                            MemoryLedger* ledger = nullptr);

// Loss and full backprop through the recorded stack of layers.
StepGradients unrolled_gradients(const UnrolledModel& model, const AbundanceTensor& a0, const HsiCube& y, double alpha,
                                 MemoryLedger* ledger = nullptr);

AbundanceTensor unrolled_forward(const UnrolledModel& model, const AbundanceTensor& a0, const HsiCube& y);

struct TrainReport {
  std::string method;
  std::vector<LossValue> loss_curve;
  std::vector<double> step_seconds;
  std::vector<std::size_t> solver_iterations;
  std::vector<std::size_t> backward_terms;
  std::size_t unconverged_solves = 0;
  std::size_t skipped_steps = 0;
  std::size_t diverged_backwards = 0;
  std::size_t ledger_peak = 0;
  std::size_t ledger_forward_peak = 0;
  std::size_t ledger_backward_peak = 0;
  std::size_t parameter_count = 0;

  EquilibriumLayer layer;  // final DEQ parameters
  UnrolledModel unrolled;  // final unrolled parameters
  Matrix vca_endmembers;
  AbundanceTensor initial_abundances;
  AbundanceTensor abundances;  // final estimate
  Matrix endmembers;           // final estimate

  std::string to_json() const;
  void write_loss_csv(std::ostream& os) const;
};

// VCA endmembers and FCLS abundances used to initialize every method.
struct Initialization {
  Matrix w;
  AbundanceTensor a0;
};
Initialization initialize(const HsiCube& y, std::size_t r, std::uint64_t seed);

EquilibriumLayer make_layer(const HsiCube& y, const Matrix& w, const TrainConfig& cfg);

// Called after every epoch with the loss and the estimate (a, W) that the
// epoch's gradient was computed at.
using EpochCallback =
    std::function<void(std::size_t epoch, const LossValue& loss, const AbundanceTensor& a, const Matrix& w)>;

TrainReport train_deq(const HsiCube& y, std::size_t r, const TrainConfig& cfg);
TrainReport train_deq(const HsiCube& y, const Initialization& init, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});
TrainReport train_unrolled(const HsiCube& y, std::size_t r, const TrainConfig& cfg, bool share_params,
                           std::size_t k_layers);
TrainReport train_unrolled(const HsiCube& y, const Initialization& init, const TrainConfig& cfg, bool share_params,
                           std::size_t k_layers, const EpochCallback& on_epoch = {});

}  // namespace deq
