#include "deq/equilibrium.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "deq/ops.hpp"

namespace deq {

std::string_view theta_slot_name(std::size_t slot) {
  static constexpr std::string_view kNames[kThetaSlotCount] = {
      "conv1.weight",        "conv1.bias",          "attention1.fc1.weight", "attention1.fc1.bias",
      "attention1.fc2.weight", "attention1.fc2.bias", "norm.gain",             "norm.offset",
      "conv2.weight",        "conv2.bias",          "attention2.fc1.weight", "attention2.fc1.bias",
      "attention2.fc2.weight", "attention2.fc2.bias", "head.weight",           "head.bias"};
  return slot < kThetaSlotCount ? kNames[slot] : "unknown";
}

GThetaOperator::GThetaOperator(std::size_t bands, std::size_t hidden, std::size_t attention_ratio)
    : bands_(bands), hidden_(hidden), ratio_(attention_ratio) {
  if (bands == 0 || hidden == 0) throw ConfigError("gradient operator needs bands > 0 and hidden width > 0");
  const std::size_t mid = ops::attention_hidden_width(hidden, attention_ratio);
  const std::size_t c = hidden;
  theta_.resize(kThetaSlotCount);
  theta_[kConv1Weight] = Tensor({c, 2, 3, 3, 3});
  theta_[kConv1Bias] = Tensor({c});
  theta_[kConv2Weight] = Tensor({c, c, 3, 3, 3});
  theta_[kConv2Bias] = Tensor({c});
  for (std::size_t base : {kAttention1Fc1Weight, kAttention2Fc1Weight}) {
    theta_[base] = Tensor({mid, c});
    theta_[base + 1] = Tensor({mid});
    theta_[base + 2] = Tensor({c, mid});
    theta_[base + 3] = Tensor({c});
  }
  theta_[kNormGain] = Tensor({c}, 1.0);
  theta_[kNormOffset] = Tensor({c});
  theta_[kHeadWeight] = Tensor({bands, c * bands, 3, 3});
  theta_[kHeadBias] = Tensor({bands});
}

GThetaOperator GThetaOperator::xavier(std::size_t bands, std::size_t hidden, std::size_t attention_ratio, Rng& rng) {
  GThetaOperator op(bands, hidden, attention_ratio);
  auto fill = [&rng](Tensor& t, double fan_in, double fan_out) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
  };
  const double c = static_cast<double>(hidden);
  const double mid = static_cast<double>(op.theta_[kAttention1Fc1Weight].dim(0));
  const double l = static_cast<double>(bands);
  fill(op.theta_[kConv1Weight], 2.0 * 27.0, c * 27.0);
  fill(op.theta_[kAttention1Fc1Weight], c, mid);
  fill(op.theta_[kAttention1Fc2Weight], mid, c);
  fill(op.theta_[kConv2Weight], c * 27.0, c * 27.0);
  fill(op.theta_[kAttention2Fc1Weight], c, mid);
  fill(op.theta_[kAttention2Fc2Weight], mid, c);
  fill(op.theta_[kHeadWeight], c * l * 9.0, l * 9.0);
  return op;
}

std::size_t GThetaOperator::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : theta_) n += t.size();
  return n;
}

std::vector<NodeId> GThetaOperator::bind(Tape& tape) const {
  std::vector<NodeId> ids;
  ids.reserve(theta_.size());
  for (const Tensor& t : theta_) ids.push_back(tape.input(t));
  return ids;
}

NodeId GThetaOperator::record(Tape& tape, NodeId recon, NodeId y_cube, NodeId y_volume,
                              std::span<const NodeId> theta) const {
  if (theta.size() != kThetaSlotCount) throw DimensionError("gradient operator: wrong number of parameter nodes");
  const NodeId features = tape.concat_channels(tape.cube_to_volume(recon), y_volume);

  NodeId h = tape.conv3d(features, theta[kConv1Weight], theta[kConv1Bias]);
  h = tape.channel_attention(h, theta[kAttention1Fc1Weight], theta[kAttention1Fc1Bias], theta[kAttention1Fc2Weight],
                             theta[kAttention1Fc2Bias]);
  h = tape.layer_norm(h, theta[kNormGain], theta[kNormOffset]);
  h = tape.relu(h);

  h = tape.conv3d(h, theta[kConv2Weight], theta[kConv2Bias]);
  h = tape.channel_attention(h, theta[kAttention2Fc1Weight], theta[kAttention2Fc1Bias], theta[kAttention2Fc2Weight],
                             theta[kAttention2Fc2Bias]);
  h = tape.relu(h);

  const NodeId head = tape.volume_to_cube(tape.conv2d(h, theta[kHeadWeight], theta[kHeadBias]));
  const NodeId residual = tape.add(recon, y_cube, 1.0, -1.0);
  return tape.add(residual, head);
}

Tensor GThetaOperator::apply(const Tensor& recon, const HsiCube& y) const {
  recon.require_same_shape(y, "gradient operator");
  if (y.rank() != 3 || y.dim(2) != bands_) {
    throw DimensionError("gradient operator built for " + std::to_string(bands_) + " bands, got cube " +
                         shape_string(y.shape()));
  }
  Tape tape;
  const Tensor y_volume = ops::cube_to_volume(y);
  const std::vector<NodeId> theta = bind(tape);
  const NodeId out = record(tape, tape.input(recon), tape.input(y), tape.input(y_volume), theta);
  return tape.value(out);
}

Tensor gtheta_apply(const GThetaOperator& gtheta, const Tensor& recon, const HsiCube& y) {
  return gtheta.apply(recon, y);
}

double EquilibriumLayer::lambda() const { return ops::softplus(lambda_pre[0]); }

std::vector<Tensor*> EquilibriumLayer::parameters() {
  std::vector<Tensor*> out;
  for (Tensor& t : gtheta.theta()) out.push_back(&t);
  out.push_back(&lambda_pre);
  out.push_back(&w);
  return out;
}

std::vector<const Tensor*> EquilibriumLayer::parameters() const {
  std::vector<const Tensor*> out;
  for (const Tensor& t : gtheta.theta()) out.push_back(&t);
  out.push_back(&lambda_pre);
  out.push_back(&w);
  return out;
}

std::vector<std::string> EquilibriumLayer::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < gtheta.theta().size(); ++i) out.emplace_back(theta_slot_name(i));
  out.emplace_back("lambda_pre");
  out.emplace_back("endmembers");
  return out;
}

std::vector<ParamGroup> EquilibriumLayer::parameter_groups() const {
  std::vector<ParamGroup> out(gtheta.theta().size() + 1, ParamGroup::kOperator);
  out.push_back(ParamGroup::kEndmembers);
  return out;
}

StepLeaves bind_step_leaves(Tape& tape, const EquilibriumLayer& layer, const HsiCube& y, const Tensor& y_volume) {
  StepLeaves leaves;
  leaves.theta = layer.gtheta.bind(tape);
  leaves.lambda_pre = tape.input(layer.lambda_pre);
  leaves.w = tape.input(layer.w);
  leaves.y_cube = tape.input(y);
  leaves.y_volume = tape.input(y_volume);
  return leaves;
}

StepNodes record_equilibrium_step(Tape& tape, NodeId a, const StepLeaves& leaves, const GThetaOperator& gtheta,
                                  double eta, double gamma) {
  const NodeId recon = tape.mode3_product(a, leaves.w);
  const NodeId grad = gtheta.record(tape, recon, leaves.y_cube, leaves.y_volume, leaves.theta);
  const NodeId back = tape.mode3_adjoint(grad, leaves.w);
  const NodeId moved = tape.add(a, back, 1.0, -eta);
  const NodeId threshold = tape.scale(tape.softplus(leaves.lambda_pre), eta);
  const NodeId thresholded = tape.soft_threshold(moved, threshold);
  return {thresholded, tape.softmax_temp(thresholded, gamma)};
}

SimplexViolation simplex_violation(const AbundanceTensor& a) {
  SimplexViolation v;
  const std::size_t r = a.dim(a.rank() - 1);
  const std::size_t n = a.size() / r;
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      const double x = a[p * r + k];
      v.negativity = std::max(v.negativity, -x);
      s += x;
    }
    v.sum_error = std::max(v.sum_error, std::abs(s - 1.0));
  }
  return v;
}

namespace {

void check_layer_shapes(const AbundanceTensor& a, const HsiCube& y, const EquilibriumLayer& layer) {
  if (a.rank() != 3 || y.rank() != 3 || a.dim(0) != y.dim(0) || a.dim(1) != y.dim(1)) {
    throw DimensionError("equilibrium layer: abundances " + shape_string(a.shape()) + " vs cube " +
                         shape_string(y.shape()));
  }
  if (layer.w.rank() != 2 || layer.w.rows() != y.dim(2) || layer.w.cols() != a.dim(2)) {
    throw DimensionError("equilibrium layer: endmembers " + shape_string(layer.w.shape()) + " incompatible with " +
                         shape_string(y.shape()) + " / " + shape_string(a.shape()));
  }
  if (layer.gtheta.bands() != y.dim(2)) throw DimensionError("equilibrium layer: operator band count mismatch");
}

std::string iterate_summary(const Tensor& t) {
  std::size_t bad = 0;
  for (double v : t.values()) bad += std::isfinite(v) ? 0 : 1;
  std::ostringstream os;
  os << bad << " of " << t.size() << " entries non-finite in " << shape_string(t.shape());
  return os.str();
}

void require_finite(const Tensor& t, const std::string& where) {
  if (!all_finite(t)) throw NonFiniteIterate(where + ": " + iterate_summary(t), t);
}

}  // namespace

AbundanceTensor equilibrium_step(const AbundanceTensor& a, const HsiCube& y, const EquilibriumLayer& layer) {
  check_layer_shapes(a, y, layer);
  const SimplexViolation v = simplex_violation(a);
  if (v.negativity > 1e-6 || v.sum_error > 1e-6) {
    throw DomainError("equilibrium_step: input abundances are off the simplex (negativity " +
                      std::to_string(v.negativity) + ", sum error " + std::to_string(v.sum_error) + ")");
  }
  Tape tape;
  const Tensor y_volume = ops::cube_to_volume(y);
  const StepLeaves leaves = bind_step_leaves(tape, layer, y, y_volume);
  const StepNodes nodes = record_equilibrium_step(tape, tape.input(a), leaves, layer.gtheta, layer.eta, layer.gamma);
  Tensor out = tape.value(nodes.out);
  require_finite(out, "equilibrium_step");
  return out;
}

void SolverConfig::validate() const {
  if (k_max < 1) throw ConfigError("solver: k_max must be >= 1");
  if (!(tol > 0.0)) throw ConfigError("solver: tol must be > 0");
  if (anderson_memory < 1 || anderson_memory > k_max) {
    throw ConfigError("solver: anderson memory must be in [1, k_max], got " + std::to_string(anderson_memory));
  }
  if (!(anderson_ridge >= 0.0)) throw ConfigError("solver: anderson ridge must be >= 0");
  if (!(damping > 0.0)) throw ConfigError("solver: damping must be > 0");
}

SolverMode parse_solver_mode(std::string_view name) {
  if (name == "picard") return SolverMode::kPicard;
  if (name == "anderson") return SolverMode::kAnderson;
  throw ConfigError("unknown solver mode: " + std::string(name));
}

std::string_view solver_mode_name(SolverMode mode) { return mode == SolverMode::kPicard ? "picard" : "anderson"; }

void SolveTrace::write_csv(std::ostream& os) const {
  os << "iteration,residual\n";
  os.precision(17);
  for (std::size_t i = 0; i < residuals.size(); ++i) os << i + 1 << ',' << residuals[i] << '\n';
}

namespace {

// Anderson history of (x, f(x)) pairs in pre-projection space.
class AndersonHistory {
 public:
  AndersonHistory(std::size_t memory, MemoryLedger* ledger) : capacity_(memory + 1), ledger_(ledger) {}

  void push(Tensor x, Tensor f) {
    xs_.push_back(std::move(x));
    fs_.push_back(std::move(f));
    if (xs_.size() > capacity_) {
      xs_.pop_front();
      fs_.pop_front();
    }
    hold_.resize(2 * xs_.size() * xs_.back().size());
  }

  std::size_t size() const { return xs_.size(); }
  const Tensor& last_f() const { return fs_.back(); }

  // x_new = x_k + beta r_k - (dX + beta dR) c, with c the ridge least-squares
  // fit of r_k by the residual differences dR.
  Tensor mix(double ridge, double beta) const {
    const std::size_t h = xs_.size();
    const std::size_t n = xs_.back().size();
    const std::size_t cols = h - 1;
    std::vector<Tensor> res(h);
    for (std::size_t i = 0; i < h; ++i) res[i] = fs_[i] - xs_[i];
    Matrix dr({n, cols});
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < n; ++i) dr[i * cols + j] = res[j + 1][i] - res[j][i];
    }
    const Tensor& rk = res.back();
    const std::vector<double> c = least_squares_solve(dr, rk.values(), ridge);
    Tensor out = xs_.back();
    axpy(beta, rk, out);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = xs_[j + 1][i] - xs_[j][i];
        out[i] -= c[j] * (dx + beta * dr[i * cols + j]);
      }
    }
    return out;
  }

 private:
  std::size_t capacity_;
  MemoryLedger* ledger_;
  std::deque<Tensor> xs_;
  std::deque<Tensor> fs_;
  LedgerHold hold_{ledger_, 0, LedgerPhase::kForward};
};

}  // namespace

SolveResult solve_fixed_point(const Tensor& a0, const FixedPointProblem& problem, const SolverConfig& cfg,
                              SolverMode mode, MemoryLedger* ledger) {
  cfg.validate();
  if (!problem.pre || !problem.project) throw ConfigError("fixed-point problem needs pre and project maps");
  require_finite(a0, "solve_fixed_point initial iterate");

  SolveResult result;
  Tensor a = a0;
  LedgerHold iterate_hold(ledger, 2 * a0.size(), LedgerPhase::kForward);
  AndersonHistory history(cfg.anderson_memory, ledger);
  const bool anderson = mode == SolverMode::kAnderson;
  std::optional<Tensor> z;
  if (anderson && problem.lift) z = problem.lift(a0);

  for (std::size_t k = 0; k < cfg.k_max; ++k) {
    Tensor f = problem.pre(a);
    require_finite(f, "solve_fixed_point iteration " + std::to_string(k + 1));
    Tensor z_next;
    if (anderson && z) {
      history.push(std::move(*z), f);
      z_next = history.size() >= 2 ? history.mix(cfg.anderson_ridge, cfg.damping) : std::move(f);
    } else {
      z_next = std::move(f);
    }
    Tensor a_next = problem.project(z_next);
    require_finite(a_next, "solve_fixed_point iteration " + std::to_string(k + 1));
    if (anderson) z = std::move(z_next);

    const double denom = std::max(frobenius_norm(a), 1e-12);
    const double residual = frobenius_norm(a_next - a) / denom;
    a = std::move(a_next);
    result.trace.residuals.push_back(residual);
    result.trace.iterations = k + 1;
    if (residual < cfg.tol) {
      result.trace.converged = true;
      break;
    }
  }
  result.a = std::move(a);
  return result;
}

FixedPointProblem layer_problem(const EquilibriumLayer& layer, const HsiCube& y, MemoryLedger* ledger) {
  auto y_volume = std::make_shared<const Tensor>(ops::cube_to_volume(y));
  FixedPointProblem problem;
  problem.pre = [&layer, &y, y_volume, ledger](const Tensor& a) {
    check_layer_shapes(a, y, layer);
    Tape tape(ledger, LedgerPhase::kForward);
    const StepLeaves leaves = bind_step_leaves(tape, layer, y, *y_volume);
    const StepNodes nodes = record_equilibrium_step(tape, tape.input(a), leaves, layer.gtheta, layer.eta, layer.gamma);
    return layer.gamma * tape.value(nodes.thresholded);
  };
  problem.project = [](const Tensor& z) { return ops::softmax_temp_forward(z, 1.0); };
  return problem;
}

SolveResult solve_fixed_point(const AbundanceTensor& a0, const HsiCube& y, const EquilibriumLayer& layer,
                              const SolverConfig& cfg, SolverMode mode, MemoryLedger* ledger) {
  check_layer_shapes(a0, y, layer);
  const SimplexViolation v = simplex_violation(a0);
  if (v.negativity > 1e-6 || v.sum_error > 1e-6) {
    throw DomainError("solve_fixed_point: initial abundances are off the simplex");
  }
  return solve_fixed_point(a0, layer_problem(layer, y, ledger), cfg, mode, ledger);
}

}  // namespace deq
