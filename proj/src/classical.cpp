#include "deq/classical.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

namespace deq {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Columns of the top-`d` eigenvectors of a symmetric matrix, descending order,
// and the matching eigenvalues.
std::pair<MatrixXd, VectorXd> top_eigen(const MatrixXd& sym, Index d) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(sym);
  const Index n = sym.rows();
  MatrixXd vecs(n, d);
  VectorXd vals(d);
  for (Index i = 0; i < d; ++i) {
    vecs.col(i) = solver.eigenvectors().col(n - 1 - i);
    vals(i) = solver.eigenvalues()(n - 1 - i);
  }
  return {vecs, vals};
}

void require_rank(const VectorXd& vals, std::size_t r, const char* branch) {
  const double top = vals(0);
  const double last = vals(vals.size() - 1);
  if (!(top > 0.0) || last <= 1e-12 * top) {
    throw ExtractionError(std::string("vca: data rank is below ") + std::to_string(r) + " after " + branch +
                          " projection (eigenvalue ratio " + std::to_string(top > 0.0 ? last / top : 0.0) + ")");
  }
}

}  // namespace

VcaResult vca(const HsiCube& y, std::size_t r, const RngState& rng_state) {
  if (y.rank() != 3) throw DimensionError("vca: expected h x w x L cube, got " + shape_string(y.shape()));
  const std::size_t l = y.dim(2);
  const std::size_t n = pixel_count(y);
  if (r < 1 || r > l || r > n) {
    throw DomainError("vca: need 1 <= R <= min(L, pixels), got R=" + std::to_string(r));
  }
  Eigen::Map<const MatrixXd> data(y.ptr(), static_cast<Index>(l), static_cast<Index>(n));
  const Index ri = static_cast<Index>(r);
  const double inv_n = 1.0 / static_cast<double>(n);

  VcaResult result;
  if (r == 1) {
    auto [u, vals] = top_eigen(data * data.transpose() * inv_n, 1);
    require_rank(vals, r, "projective");
    const VectorXd v = (u.transpose() * data).transpose();
    Index best = 0;
    v.cwiseAbs().maxCoeff(&best);
    result.indices = {static_cast<std::size_t>(best)};
    result.projective = true;
    result.snr_db = std::numeric_limits<double>::infinity();
  } else {
    const VectorXd mean = data.rowwise().mean();
    const MatrixXd centered = data.colwise() - mean;
    auto [ud, vals_c] = top_eigen(centered * centered.transpose() * inv_n, ri);
    const MatrixXd xp = ud.transpose() * centered;

    const double p_y = data.squaredNorm() * inv_n;
    const double p_x = xp.squaredNorm() * inv_n + mean.squaredNorm();
    const double signal = p_x - static_cast<double>(r) / static_cast<double>(l) * p_y;
    const double noise = p_y - p_x;
    double snr = std::numeric_limits<double>::infinity();
    if (noise > 0.0) snr = signal > 0.0 ? 10.0 * std::log10(signal / noise) : -std::numeric_limits<double>::infinity();
    const double snr_threshold = 15.0 + 10.0 * std::log10(static_cast<double>(r));
    result.snr_db = snr;

    MatrixXd lifted(ri, static_cast<Index>(n));
    if (snr < snr_threshold) {
      // Affine subspace of dimension R-1 through the mean, lifted by a constant row.
      const Index d = ri - 1;
      require_rank(vals_c.head(d), r, "affine");
      const MatrixXd x = xp.topRows(d);
      const double c = x.colwise().norm().maxCoeff();
      lifted.topRows(d) = x;
      lifted.row(d).setConstant(c);
      result.projective = false;
    } else {
      auto [u, vals] = top_eigen(data * data.transpose() * inv_n, ri);
      require_rank(vals, r, "projective");
      const MatrixXd x = u.transpose() * data;
      const VectorXd um = x.rowwise().mean();
      const Eigen::RowVectorXd denom = um.transpose() * x;
      for (Index p = 0; p < x.cols(); ++p) lifted.col(p) = x.col(p) / denom(p);
      result.projective = true;
    }

    Rng rng(rng_state);
    MatrixXd basis = MatrixXd::Zero(ri, ri);
    basis(ri - 1, 0) = 1.0;
    for (Index i = 0; i < ri; ++i) {
      VectorXd w(ri);
      for (Index k = 0; k < ri; ++k) w(k) = rng.uniform();
      const VectorXd proj = basis * Eigen::CompleteOrthogonalDecomposition<MatrixXd>(basis).solve(w);
      VectorXd f = w - proj;
      const double fn = f.norm();
      if (!(fn > 1e-12)) throw ExtractionError("vca: orthogonal direction vanished at endmember " + std::to_string(i));
      f /= fn;
      const VectorXd v = (f.transpose() * lifted).transpose();
      Index best = 0;
      v.cwiseAbs().maxCoeff(&best);
      basis.col(i) = lifted.col(best);
      result.indices.push_back(static_cast<std::size_t>(best));
    }
  }

  result.endmembers = Matrix({l, r});
  for (std::size_t k = 0; k < r; ++k) {
    const double* src = y.ptr() + result.indices[k] * l;
    for (std::size_t band = 0; band < l; ++band) result.endmembers(band, k) = src[band];
  }
  return result;
}

NnlsResult nnls(const Matrix& a, std::span<const double> b, double kkt_tol, std::size_t max_steps) {
  if (a.rank() != 2 || b.size() != a.rows()) throw DimensionError("nnls: shape mismatch");
  const Index m = static_cast<Index>(a.rows());
  const Index k = static_cast<Index>(a.cols());
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> am(a.ptr(), m, k);
  Eigen::Map<const VectorXd> bm(b.data(), m);

  VectorXd x = VectorXd::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  const double tol = kkt_tol * std::max(1.0, (am.transpose() * bm).cwiseAbs().maxCoeff());

  auto solve_passive = [&]() {
    std::vector<Index> cols;
    for (Index j = 0; j < k; ++j) {
      if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
    }
    MatrixXd sub(m, static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) sub.col(static_cast<Index>(c)) = am.col(cols[c]);
    const VectorXd sp = Eigen::CompleteOrthogonalDecomposition<MatrixXd>(sub).solve(bm);
    VectorXd s = VectorXd::Zero(k);
    for (std::size_t c = 0; c < cols.size(); ++c) s(cols[c]) = sp(static_cast<Index>(c));
    return s;
  };

  NnlsResult result;
  while (true) {
    const VectorXd w = am.transpose() * (bm - am * x);
    Index best = -1;
    double best_w = tol;
    for (Index j = 0; j < k; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best_w) {
        best_w = w(j);
        best = j;
      }
    }
    if (best < 0) {
      result.converged = true;
      break;
    }
    if (result.steps >= max_steps) break;
    ++result.steps;
    passive[static_cast<std::size_t>(best)] = true;

    VectorXd s = solve_passive();
    bool stalled = false;
    while (true) {
      double alpha = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0 && x(j) - s(j) > 0.0) {
          alpha = std::min(alpha, x(j) / (x(j) - s(j)));
        }
      }
      if (!std::isfinite(alpha)) break;
      if (result.steps >= max_steps) {
        stalled = true;
        break;
      }
      ++result.steps;
      x += alpha * (s - x);
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
      s = solve_passive();
    }
    if (stalled) break;
    x = s;
  }
  result.x.assign(x.data(), x.data() + k);
  return result;
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

FclsResult fcls(const HsiCube& y, const Matrix& m, const FclsOptions& options) {
  if (y.rank() != 3 || m.rank() != 2 || m.rows() != y.dim(2)) {
    throw DimensionError("fcls: cube " + shape_string(y.shape()) + " with endmembers " + shape_string(m.shape()));
  }
  if (!(options.delta > 0.0)) throw ConfigError("fcls: delta must be > 0");
  const std::size_t l = m.rows();
  const std::size_t r = m.cols();
  const std::size_t n = pixel_count(y);
  const double row_weight = 1.0 / options.delta;

  Matrix augmented({l + 1, r});
  for (std::size_t band = 0; band < l; ++band) {
    for (std::size_t k = 0; k < r; ++k) augmented(band, k) = m(band, k);
  }
  for (std::size_t k = 0; k < r; ++k) augmented(l, k) = row_weight;
  const std::size_t cap = 3 * r * r;

  FclsResult result;
  result.abundances = Tensor({y.dim(0), y.dim(1), r});
  result.residual_norms.assign(n, 0.0);
  std::vector<double> rhs(l + 1);
  for (std::size_t p = 0; p < n; ++p) {
    const double* spectrum = y.ptr() + p * l;
    std::copy(spectrum, spectrum + l, rhs.begin());
    rhs[l] = row_weight;
    NnlsResult sol = nnls(augmented, rhs, options.kkt_tol, cap);
    std::vector<double> a = std::move(sol.x);
    if (!sol.converged) {
      ++result.fallback_pixels;
      const std::vector<double> free = least_squares_solve(m, std::span<const double>(spectrum, l), 0.0);
      a = project_to_simplex(free);
    }
    // The weighted row leaves an O(delta^2) sum-to-one defect; close it exactly.
    const double total = std::accumulate(a.begin(), a.end(), 0.0);
    if (total > 0.0) {
      for (double& v : a) v /= total;
    } else {
      std::fill(a.begin(), a.end(), 1.0 / static_cast<double>(r));
    }
    double res = 0.0;
    for (std::size_t band = 0; band < l; ++band) {
      double s = -spectrum[band];
      for (std::size_t k = 0; k < r; ++k) s += m(band, k) * a[k];
      res += s * s;
    }
    result.residual_norms[p] = std::sqrt(res);
    std::copy(a.begin(), a.end(), result.abundances.ptr() + p * r);
  }
  if (result.fallback_pixels > 0) {
    std::cerr << "warning: fcls fell back to simplex projection on " << result.fallback_pixels << " of " << n
              << " pixels\n";
  }
  return result;
}

}  // namespace deq
