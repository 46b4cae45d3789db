#include "deq/implicit.hpp"

#include <algorithm>
#include <cmath>

#include "deq/ops.hpp"

namespace deq {

double loss_re(const HsiCube& y, const HsiCube& yhat, Tensor* grad) {
  y.require_same_shape(yhat, "loss_re");
  const double n = static_cast<double>(pixel_count(y));
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = yhat[i] - y[i];
    sum += d * d;
  }
  if (grad) {
    *grad = Tensor(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) (*grad)[i] = 2.0 / n * (yhat[i] - y[i]);
  }
  return sum / n;
}

double loss_sad(const HsiCube& y, const HsiCube& yhat, Tensor* grad) {
  y.require_same_shape(yhat, "loss_sad");
  const std::size_t n = pixel_count(y);
  const std::size_t l = y.dim(y.rank() - 1);
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) *grad = Tensor(y.shape());
  double sum = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double* a = y.ptr() + p * l;
    const double* b = yhat.ptr() + p * l;
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t k = 0; k < l; ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    const double na = std::sqrt(aa);
    const double nb = std::sqrt(bb);
    if (!(na > 1e-12) || !(nb > 1e-12)) {
      throw DomainError("loss_sad: pixel " + std::to_string(p) + " (row " + std::to_string(p / y.dim(1)) + ", col " +
                        std::to_string(p % y.dim(1)) + ") has zero norm");
    }
    const double c = ab / (na * nb);
    const double lo = -1.0 + kSadClamp;
    const double hi = 1.0 - kSadClamp;
    // Angle between the unit vectors as 2 atan2(|u - v|, |u + v|): exact zero
    // for parallel spectra, where acos(c) loses half the digits. The clamp
    // only gates the gradient.
    double dm = 0.0;
    double dp = 0.0;
    for (std::size_t k = 0; k < l; ++k) {
      const double u = a[k] / na;
      const double v = b[k] / nb;
      dm += (u - v) * (u - v);
      dp += (u + v) * (u + v);
    }
    sum += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
    if (grad && c > lo && c < hi) {
      const double dc = -inv_n / std::sqrt(1.0 - c * c);
      double* g = grad->ptr() + p * l;
      for (std::size_t k = 0; k < l; ++k) g[k] = dc * (a[k] / (na * nb) - c * b[k] / bb);
    }
  }
  return sum * inv_n;
}

LossValue total_loss(const HsiCube& y, const HsiCube& yhat, double alpha, Tensor* grad) {
  LossValue v;
  v.alpha = alpha;
  if (grad) {
    Tensor g_sad;
    v.re_component = loss_re(y, yhat, grad);
    v.sad_component = loss_sad(y, yhat, &g_sad);
    *grad *= alpha;
    *grad += g_sad;
  } else {
    v.re_component = loss_re(y, yhat);
    v.sad_component = loss_sad(y, yhat);
  }
  v.total = alpha * v.re_component + v.sad_component;
  return v;
}

HsiCube reconstruct(const AbundanceTensor& a_star, const Matrix& w) { return mode3_product(a_star, w); }

DivergencePolicy parse_divergence_policy(std::string_view name) {
  if (name == "throw") return DivergencePolicy::kThrow;
  if (name == "truncate") return DivergencePolicy::kTruncate;
  throw ConfigError("unknown divergence policy: " + std::string(name));
}

std::string_view divergence_policy_name(DivergencePolicy policy) {
  return policy == DivergencePolicy::kThrow ? "throw" : "truncate";
}

void BackwardConfig::validate() const {
  if (t_max < 1) throw ConfigError("backward: t_max must be >= 1");
  if (!(tol >= 0.0)) throw ConfigError("backward: tol must be >= 0");
}

AdjointState neumann_series(const std::function<Tensor(const Tensor&)>& jt, const Tensor& g,
                            const BackwardConfig& cfg, MemoryLedger* ledger) {
  cfg.validate();
  AdjointState state;
  state.v = Tensor(g.shape());
  // v, the current term and the scratch tensor jt produces.
  LedgerHold hold(ledger, 3 * g.size(), LedgerPhase::kBackward);
  Tensor term = g;
  std::size_t rises = 0;
  for (std::size_t n = 0; n < cfg.t_max; ++n) {
    if (!all_finite(term)) throw BackwardError("neumann: non-finite term at index " + std::to_string(n));
    const double norm = frobenius_norm(term);
    if (norm == 0.0) break;
    const double vnorm = frobenius_norm(state.v);
    if (vnorm > 0.0 && norm / vnorm < cfg.tol) break;
    if (!state.term_norms.empty()) {
      rises = norm > state.term_norms.back() ? rises + 1 : 0;
      if (rises >= kDivergenceRun) {
        if (cfg.on_divergence == DivergencePolicy::kThrow) {
          throw BackwardError("neumann: term norms rose " + std::to_string(rises) + " times in a row (last " +
                              std::to_string(norm) + " at index " + std::to_string(n) + "), Jacobian not contractive");
        }
        state.diverged = true;
        break;
      }
    }
    state.v += term;
    state.term_norms.push_back(norm);
    ++state.terms_used;
    if (n + 1 < cfg.t_max) term = jt(term);
  }
  return state;
}

StepLinearization::StepLinearization(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                                     MemoryLedger* ledger)
    : a_star_(a_star), y_volume_(ops::cube_to_volume(y)), tape_(ledger, LedgerPhase::kBackward) {
  leaves_ = bind_step_leaves(tape_, layer, y, y_volume_);
  a_node_ = tape_.input(a_star_);
  nodes_ = record_equilibrium_step(tape_, a_node_, leaves_, layer.gtheta, layer.eta, layer.gamma);
}

Tensor StepLinearization::input_vjp(const Tensor& v) const {
  const NodeId targets[] = {a_node_};
  return std::move(tape_.backward(nodes_.out, v, targets)[0]);
}

GradSet StepLinearization::param_vjp(const Tensor& v) const {
  std::vector<NodeId> targets = leaves_.theta;
  targets.push_back(leaves_.lambda_pre);
  targets.push_back(leaves_.w);
  return tape_.backward(nodes_.out, v, targets);
}

AdjointState neumann_vjp(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                         const Tensor& loss_grad, const BackwardConfig& cfg, MemoryLedger* ledger) {
  a_star.require_same_shape(loss_grad, "neumann_vjp");
  cfg.validate();
  if (frobenius_norm(loss_grad) == 0.0) {
    AdjointState zero;
    zero.v = Tensor(loss_grad.shape());
    return zero;
  }
  StepLinearization lin(layer, a_star, y, ledger);
  return neumann_series([&lin](const Tensor& t) { return lin.input_vjp(t); }, loss_grad, cfg, ledger);
}

GradSet zero_grads(const EquilibriumLayer& layer) {
  GradSet out;
  for (const Tensor* p : layer.parameters()) out.emplace_back(p->shape());
  return out;
}

GradSet param_gradients(const EquilibriumLayer& layer, const AbundanceTensor& a_star, const HsiCube& y,
                        const Tensor& v_star, MemoryLedger* ledger) {
  a_star.require_same_shape(v_star, "param_gradients");
  if (frobenius_norm(v_star) == 0.0) return zero_grads(layer);
  StepLinearization lin(layer, a_star, y, ledger);
  return lin.param_vjp(v_star);
}

}  // namespace deq
