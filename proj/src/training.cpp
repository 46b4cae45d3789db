#include "deq/training.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <json.hpp>
#include <ostream>
#include <utility>

#include "deq/classical.hpp"
#include "deq/ops.hpp"
#include "deq/rng.hpp"
#include "deq/tape.hpp"

namespace deq {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(lr_endmembers > 0.0) || !(lr_operator > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (!(decay_endmembers >= 0.0) || !(decay_operator >= 0.0)) throw ConfigError("train: weight decay must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("train: alpha must be >= 0");
  if (!(gamma > 0.0)) throw ConfigError("train: gamma must be > 0");
  if (!(eta > 0.0)) throw ConfigError("train: eta must be > 0");
  if (!(lambda0 > 0.0)) throw ConfigError("train: lambda0 must be > 0");
  if (hidden < 1) throw ConfigError("train: hidden width must be >= 1");
  ops::attention_hidden_width(hidden, attention_ratio);
  solver.validate();
  backward.validate();
}

TrainConfig TrainConfig::synthetic(double snr_db) {
  TrainConfig cfg;
  cfg.lambda0 = 0.01;
  cfg.solver.k_max = 10;
  cfg.eta = 0.04;
  cfg.alpha = 1.0;
  cfg.decay_endmembers = cfg.decay_operator = 1e-5;
  cfg.lr_operator = 0.01;
  if (snr_db <= 22.5) {
    cfg.lr_endmembers = 0.003;
    cfg.gamma = 0.9;
  } else {
    cfg.lr_endmembers = 0.005;
    cfg.gamma = 0.8;
  }
  return cfg;
}

TrainConfig TrainConfig::samson() {
  TrainConfig cfg;
  cfg.lambda0 = 0.1;
  cfg.solver.k_max = 10;
  cfg.eta = 0.01;
  cfg.lr_operator = 0.01;
  cfg.lr_endmembers = 0.006;
  cfg.decay_endmembers = cfg.decay_operator = 1e-5;
  cfg.gamma = 1.0;
  cfg.alpha = 0.1;
  return cfg;
}

AdamGroups adam_groups(const TrainConfig& cfg) {
  AdamGroups g;
  g[static_cast<std::size_t>(ParamGroup::kEndmembers)] = {cfg.lr_endmembers, cfg.decay_endmembers};
  g[static_cast<std::size_t>(ParamGroup::kOperator)] = {cfg.lr_operator, cfg.decay_operator};
  return g;
}

OptimizerState OptimizerState::for_params(const std::vector<Tensor*>& params) {
  OptimizerState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

bool adam_step(const std::vector<Tensor*>& params, const GradSet& grads, const std::vector<ParamGroup>& groups,
               OptimizerState& state, const AdamGroups& settings) {
  if (params.size() != grads.size() || params.size() != groups.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw DimensionError("adam_step: parameter, gradient, group and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->require_same_shape(grads[i], "adam_step gradient");
    params[i]->require_same_shape(state.m[i], "adam_step moment");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!all_finite(grads[i])) {
      std::cerr << "warning: non-finite gradient in parameter " << i << ", optimizer step skipped\n";
      return false;
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const AdamGroup& g = settings[static_cast<std::size_t>(groups[i])];
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& gr = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] -= g.lr * g.weight_decay * p[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gr[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gr[k] * gr[k];
      p[k] -= g.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
    if (groups[i] == ParamGroup::kEndmembers) {
      for (double& x : p.values()) x = std::max(x, 0.0);
    }
  }
  return true;
}

UnrolledModel UnrolledModel::from_layer(const EquilibriumLayer& layer, std::size_t layers, bool shared) {
  if (layers < 1) throw ConfigError("unrolled model needs at least one layer");
  UnrolledModel m;
  m.layers = layers;
  m.shared = shared;
  m.w = layer.w;
  m.eta = layer.eta;
  m.gamma = layer.gamma;
  const std::size_t copies = shared ? 1 : layers;
  m.operators.assign(copies, layer.gtheta);
  m.lambda_pres.assign(copies, layer.lambda_pre);
  return m;
}

std::vector<Tensor*> UnrolledModel::parameters() {
  std::vector<Tensor*> out;
  for (std::size_t k = 0; k < operators.size(); ++k) {
    for (Tensor& t : operators[k].theta()) out.push_back(&t);
    out.push_back(&lambda_pres[k]);
  }
  out.push_back(&w);
  return out;
}

std::vector<const Tensor*> UnrolledModel::parameters() const {
  std::vector<const Tensor*> out;
  for (std::size_t k = 0; k < operators.size(); ++k) {
    for (const Tensor& t : operators[k].theta()) out.push_back(&t);
    out.push_back(&lambda_pres[k]);
  }
  out.push_back(&w);
  return out;
}

std::vector<ParamGroup> UnrolledModel::parameter_groups() const {
  std::vector<ParamGroup> out;
  for (const GThetaOperator& op : operators) out.insert(out.end(), op.theta().size() + 1, ParamGroup::kOperator);
  out.push_back(ParamGroup::kEndmembers);
  return out;
}

std::size_t parameter_count(const std::vector<const Tensor*>& params) {
  std::size_t n = 0;
  for (const Tensor* p : params) n += p->size();
  return n;
}

std::size_t UnrolledModel::parameter_count() const { return deq::parameter_count(parameters()); }

Matrix endmember_gradient(const Tensor& grad_yhat, const AbundanceTensor& a) {
  const std::size_t n = pixel_count(a);
  const std::size_t r = a.dim(a.rank() - 1);
  const std::size_t l = grad_yhat.dim(grad_yhat.rank() - 1);
  if (pixel_count(grad_yhat) != n) throw DimensionError("endmember_gradient: pixel counts differ");
  Matrix g({l, r});
  for (std::size_t p = 0; p < n; ++p) {
    const double* gy = grad_yhat.ptr() + p * l;
    const double* ap = a.ptr() + p * r;
    for (std::size_t band = 0; band < l; ++band) {
      double* row = g.ptr() + band * r;
      for (std::size_t k = 0; k < r; ++k) row[k] += gy[band] * ap[k];
    }
  }
  return g;
}

namespace {

// Loss at the estimate and its cotangents for a and W.
struct LossGrads {
  LossValue loss;
  Tensor grad_a;
  Matrix grad_w;
};

LossGrads loss_and_grads(const AbundanceTensor& a, const HsiCube& y, const Matrix& w, double alpha) {
  LossGrads out;
  const HsiCube yhat = reconstruct(a, w);
  Tensor grad_yhat;
  out.loss = total_loss(y, yhat, alpha, &grad_yhat);
  out.grad_a = mode3_product_adjoint(grad_yhat, w);
  out.grad_w = endmember_gradient(grad_yhat, a);
  return out;
}

}  // namespace

StepGradients deq_gradients(const EquilibriumLayer& layer, const AbundanceTensor& a0, const HsiCube& y, double alpha,
                            const SolverConfig& solver, SolverMode mode, const BackwardConfig& backward,
                            MemoryLedger* ledger) {
  StepGradients out;
  SolveResult solved = solve_fixed_point(a0, y, layer, solver, mode, ledger);
  out.a = std::move(solved.a);
  out.trace = std::move(solved.trace);
  LossGrads lg = loss_and_grads(out.a, y, layer.w, alpha);
  out.loss = lg.loss;
  {
    StepLinearization lin(layer, out.a, y, ledger);
    out.adjoint = neumann_series([&lin](const Tensor& t) { return lin.input_vjp(t); }, lg.grad_a, backward, ledger);
    out.grads = frobenius_norm(out.adjoint.v) == 0.0 ? zero_grads(layer) : lin.param_vjp(out.adjoint.v);
  }
  out.grads.back() += lg.grad_w;
  return out;
}

namespace {

struct UnrolledTape {
  Tape tape;
  Tensor y_volume;
  std::vector<StepLeaves> leaves;  // one per distinct layer
  NodeId a0;
  NodeId out;

  UnrolledTape(const UnrolledModel& model, const AbundanceTensor& a0_value, const HsiCube& y, MemoryLedger* ledger)
      : tape(ledger, LedgerPhase::kForward), y_volume(ops::cube_to_volume(y)) {
    if (model.operators.empty() || model.operators.size() != model.lambda_pres.size() ||
        (!model.shared && model.operators.size() != model.layers)) {
      throw ConfigError("unrolled model: inconsistent layer storage");
    }
    const NodeId w = tape.input(model.w);
    const NodeId y_cube = tape.input(y);
    const NodeId y_vol = tape.input(y_volume);
    for (std::size_t k = 0; k < model.operators.size(); ++k) {
      StepLeaves l;
      l.theta = model.operators[k].bind(tape);
      l.lambda_pre = tape.input(model.lambda_pres[k]);
      l.w = w;
      l.y_cube = y_cube;
      l.y_volume = y_vol;
      leaves.push_back(std::move(l));
    }
    a0 = tape.input(a0_value);
    NodeId a = a0;
    for (std::size_t k = 0; k < model.layers; ++k) {
      const std::size_t slot = model.shared ? 0 : k;
      a = record_equilibrium_step(tape, a, leaves[slot], model.operators[slot], model.eta, model.gamma).out;
    }
    out = a;
  }
};

}  // namespace

AbundanceTensor unrolled_forward(const UnrolledModel& model, const AbundanceTensor& a0, const HsiCube& y) {
  const Tensor y_volume = ops::cube_to_volume(y);
  AbundanceTensor a = a0;
  for (std::size_t k = 0; k < model.layers; ++k) {
    const std::size_t slot = model.shared ? 0 : k;
    Tape tape;
    StepLeaves l;
    l.theta = model.operators[slot].bind(tape);
    l.lambda_pre = tape.input(model.lambda_pres[slot]);
    l.w = tape.input(model.w);
    l.y_cube = tape.input(y);
    l.y_volume = tape.input(y_volume);
    const NodeId out = record_equilibrium_step(tape, tape.input(a), l, model.operators[slot], model.eta, model.gamma).out;
    a = tape.value(out);
  }
  return a;
}

StepGradients unrolled_gradients(const UnrolledModel& model, const AbundanceTensor& a0, const HsiCube& y, double alpha,
                                 MemoryLedger* ledger) {
  UnrolledTape ut(model, a0, y, ledger);
  StepGradients out;
  out.a = ut.tape.value(ut.out);
  LossGrads lg = loss_and_grads(out.a, y, model.w, alpha);
  out.loss = lg.loss;
  std::vector<NodeId> targets;
  for (const StepLeaves& l : ut.leaves) {
    targets.insert(targets.end(), l.theta.begin(), l.theta.end());
    targets.push_back(l.lambda_pre);
  }
  targets.push_back(ut.leaves[0].w);
  out.grads = ut.tape.backward(ut.out, lg.grad_a, targets);
  out.grads.back() += lg.grad_w;
  return out;
}

Initialization initialize(const HsiCube& y, std::size_t r, std::uint64_t seed) {
  Initialization init;
  VcaResult v = vca(y, r, RngState{"mt19937_64", seed, 0});
  init.w = std::move(v.endmembers);
  init.a0 = fcls(y, init.w).abundances;
  return init;
}

EquilibriumLayer make_layer(const HsiCube& y, const Matrix& w, const TrainConfig& cfg) {
  Rng rng(cfg.seed, 1);
  EquilibriumLayer layer;
  layer.gtheta = GThetaOperator::xavier(y.dim(2), cfg.hidden, cfg.attention_ratio, rng);
  layer.w = w;
  layer.lambda_pre = Tensor({1}, {ops::softplus_inverse(cfg.lambda0)});
  layer.eta = cfg.eta;
  layer.gamma = cfg.gamma;
  return layer;
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename Error>
[[noreturn]] void rethrow_at_epoch(const Error& e, std::size_t epoch) {
  throw Error("epoch " + std::to_string(epoch) + ": " + e.what());
}

void note_ledger(TrainReport& report, const MemoryLedger& ledger) {
  report.ledger_peak = std::max(report.ledger_peak, ledger.peak());
  report.ledger_forward_peak = std::max(report.ledger_forward_peak, ledger.phase_peak(LedgerPhase::kForward));
  report.ledger_backward_peak = std::max(report.ledger_backward_peak, ledger.phase_peak(LedgerPhase::kBackward));
}

}  // namespace

TrainReport train_deq(const HsiCube& y, std::size_t r, const TrainConfig& cfg) {
  cfg.validate();
  return train_deq(y, initialize(y, r, cfg.seed), cfg);
}

TrainReport train_deq(const HsiCube& y, const Initialization& init, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  cfg.validate();
  if (y.rank() != 3) throw DimensionError("train_deq: expected h x w x L cube, got " + shape_string(y.shape()));
  TrainReport report;
  report.method = "deq";
  report.vca_endmembers = init.w;
  report.initial_abundances = init.a0;
  EquilibriumLayer layer = make_layer(y, init.w, cfg);
  const std::vector<Tensor*> params = layer.parameters();
  const std::vector<ParamGroup> groups = layer.parameter_groups();
  OptimizerState state = OptimizerState::for_params(params);
  const AdamGroups settings = adam_groups(cfg);
  MemoryLedger ledger;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ledger.reset();
    const auto t0 = Clock::now();
    StepGradients sg;
    try {
      sg = deq_gradients(layer, init.a0, y, cfg.alpha, cfg.solver, cfg.solver_mode, cfg.backward, &ledger);
    } catch (const BackwardError& e) {
      rethrow_at_epoch(e, epoch);
    } catch (const SolverError& e) {
      rethrow_at_epoch(e, epoch);
    }
    if (on_epoch) on_epoch(epoch, sg.loss, sg.a, *params.back());
    if (!adam_step(params, sg.grads, groups, state, settings)) ++report.skipped_steps;
    report.step_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    report.loss_curve.push_back(sg.loss);
    report.solver_iterations.push_back(sg.trace.iterations);
    report.backward_terms.push_back(sg.adjoint.terms_used);
    if (!sg.trace.converged) ++report.unconverged_solves;
    if (sg.adjoint.diverged) ++report.diverged_backwards;
    note_ledger(report, ledger);
  }
  if (report.diverged_backwards > 0) {
    std::cerr << "warning: neumann series diverged and was truncated in " << report.diverged_backwards << " of "
              << cfg.epochs << " epochs\n";
  }

  report.abundances = solve_fixed_point(init.a0, y, layer, cfg.solver, cfg.solver_mode).a;
  report.endmembers = layer.w;
  report.parameter_count = parameter_count(std::as_const(layer).parameters());
  report.layer = std::move(layer);
  return report;
}

TrainReport train_unrolled(const HsiCube& y, std::size_t r, const TrainConfig& cfg, bool share_params,
                           std::size_t k_layers) {
  cfg.validate();
  return train_unrolled(y, initialize(y, r, cfg.seed), cfg, share_params, k_layers);
}

TrainReport train_unrolled(const HsiCube& y, const Initialization& init, const TrainConfig& cfg, bool share_params,
                           std::size_t k_layers, const EpochCallback& on_epoch) {
  cfg.validate();
  if (k_layers < 1) throw ConfigError("train_unrolled: k_layers must be >= 1");
  TrainReport report;
  report.method = share_params ? "unroll-s" : "unroll";
  report.vca_endmembers = init.w;
  report.initial_abundances = init.a0;
  UnrolledModel model = UnrolledModel::from_layer(make_layer(y, init.w, cfg), k_layers, share_params);
  if (!share_params) {
    // Independent initial weights per layer.
    for (std::size_t k = 1; k < k_layers; ++k) {
      Rng rng(cfg.seed, 1 + k);
      model.operators[k] = GThetaOperator::xavier(y.dim(2), cfg.hidden, cfg.attention_ratio, rng);
    }
  }
  const std::vector<Tensor*> params = model.parameters();
  const std::vector<ParamGroup> groups = model.parameter_groups();
  OptimizerState state = OptimizerState::for_params(params);
  const AdamGroups settings = adam_groups(cfg);
  MemoryLedger ledger;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ledger.reset();
    const auto t0 = Clock::now();
    StepGradients sg;
    try {
      sg = unrolled_gradients(model, init.a0, y, cfg.alpha, &ledger);
    } catch (const SolverError& e) {
      rethrow_at_epoch(e, epoch);
    }
    if (on_epoch) on_epoch(epoch, sg.loss, sg.a, *params.back());
    if (!adam_step(params, sg.grads, groups, state, settings)) ++report.skipped_steps;
    report.step_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    report.loss_curve.push_back(sg.loss);
    report.solver_iterations.push_back(k_layers);
    report.backward_terms.push_back(0);
    note_ledger(report, ledger);
  }

  report.abundances = unrolled_forward(model, init.a0, y);
  report.endmembers = model.w;
  report.parameter_count = model.parameter_count();
  report.unrolled = std::move(model);
  return report;
}

std::string TrainReport::to_json() const {
  using nlohmann::json;
  json curve = json::array();
  for (const LossValue& l : loss_curve) {
    curve.push_back({{"total", l.total}, {"re", l.re_component}, {"sad", l.sad_component}, {"alpha", l.alpha}});
  }
  double seconds = 0.0;
  for (double s : step_seconds) seconds += s;
  json j = {{"method", method},
            {"epochs", loss_curve.size()},
            {"final_loss", loss_curve.empty() ? json(nullptr) : json(loss_curve.back().total)},
            {"loss_curve", curve},
            {"seconds_total", seconds},
            {"seconds_per_step", step_seconds.empty() ? 0.0 : seconds / static_cast<double>(step_seconds.size())},
            {"solver_iterations", solver_iterations},
            {"backward_terms", backward_terms},
            {"unconverged_solves", unconverged_solves},
            {"skipped_steps", skipped_steps},
            {"diverged_backwards", diverged_backwards},
            {"ledger_peak", ledger_peak},
            {"ledger_forward_peak", ledger_forward_peak},
            {"ledger_backward_peak", ledger_backward_peak},
            {"parameter_count", parameter_count}};
  return j.dump(2);
}

void TrainReport::write_loss_csv(std::ostream& os) const {
  os << "epoch,total,re,sad\n";
  os.precision(17);
  for (std::size_t i = 0; i < loss_curve.size(); ++i) {
    os << i + 1 << ',' << loss_curve[i].total << ',' << loss_curve[i].re_component << ','
       << loss_curve[i].sad_component << '\n';
  }
}

}  // namespace deq
