#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deq/rng.hpp"
#include "deq/tensor.hpp"

namespace deq {

struct VcaResult {
  Matrix endmembers;                 // L x R, columns copied from observed pixels
  std::vector<std::size_t> indices;  // flat pixel index (row * width + col) per column
  double snr_db = 0.0;               // estimated SNR that selected the projection
  bool projective = false;           // true: R-dim projective projection, false: (R-1)-dim affine
};

// Vertex component analysis. The extracted spectra are observed pixels, never
// projections of them. See docs/vca.md for the exact variant.
VcaResult vca(const HsiCube& y, std::size_t r, const RngState& rng);

struct NnlsResult {
  std::vector<double> x;
  bool converged = false;
  std::size_t steps = 0;
};

// Lawson-Hanson active set NNLS, min ||A x - b|| s.t. x >= 0. Stops when the
// largest positive dual entry is <= kkt_tol * max(1, |A^T b|_inf) or after
// max_steps active-set changes.
NnlsResult nnls(const Matrix& a, std::span<const double> b, double kkt_tol, std::size_t max_steps);

// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::span<const double> v);

struct FclsOptions {
  double delta = 1e-3;  // sum-to-one row is weighted by 1 / delta
  double kkt_tol = 1e-10;
};

struct FclsResult {
  AbundanceTensor abundances;          // h x w x R
  std::vector<double> residual_norms;  // ||M a - y|| per pixel
  std::size_t fallback_pixels = 0;     // pixels that hit the active-set cap
};

// Fully constrained least squares per pixel: argmin ||M a - y||^2 with a >= 0
// and sum(a) = 1. Pixels are independent; output does not depend on order.
FclsResult fcls(const HsiCube& y, const Matrix& m, const FclsOptions& options = {});

}  // namespace deq
