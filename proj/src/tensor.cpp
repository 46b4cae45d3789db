#include "deq/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace deq {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}

Tensor operator-(Tensor a, const Tensor& b) {
  a -= b;
  return a;
}

Tensor operator*(double s, Tensor a) {
  a *= s;
  return a;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: sizes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Tensor& a) {
  for (double v : a.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (x.size() != y.size()) {
    throw DimensionError("axpy: sizes " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  double* yp = y.ptr();
  const double* xp = x.ptr();
  for (std::size_t i = 0; i < y.size(); ++i) yp[i] += alpha * xp[i];
}

std::size_t pixel_count(const Tensor& cube) {
  if (cube.rank() != 3) throw DimensionError("expected rank-3 cube, got " + shape_string(cube.shape()));
  return cube.dim(0) * cube.dim(1);
}

Tensor mode3_product(const AbundanceTensor& a, const Matrix& m) {
  if (a.rank() != 3 || m.rank() != 2 || m.cols() != a.dim(2)) {
    throw DimensionError("mode3_product: abundances " + shape_string(a.shape()) + " with matrix " +
                         shape_string(m.shape()));
  }
  const std::size_t n = pixel_count(a);
  const std::size_t r = a.dim(2);
  const std::size_t l = m.rows();
  Tensor out({a.dim(0), a.dim(1), l});
  const double* mp = m.ptr();
  for (std::size_t p = 0; p < n; ++p) {
    const double* ap = a.ptr() + p * r;
    double* op = out.ptr() + p * l;
    for (std::size_t band = 0; band < l; ++band) {
      double s = 0.0;
      for (std::size_t k = 0; k < r; ++k) s += mp[band * r + k] * ap[k];
      op[band] = s;
    }
  }
  return out;
}

Tensor mode3_product_adjoint(const Tensor& g, const Matrix& m) {
  if (g.rank() != 3 || m.rank() != 2 || m.rows() != g.dim(2)) {
    throw DimensionError("mode3_product_adjoint: tensor " + shape_string(g.shape()) + " with matrix " +
                         shape_string(m.shape()));
  }
  const std::size_t n = pixel_count(g);
  const std::size_t l = m.rows();
  const std::size_t r = m.cols();
  Tensor out({g.dim(0), g.dim(1), r});
  const double* mp = m.ptr();
  for (std::size_t p = 0; p < n; ++p) {
    const double* gp = g.ptr() + p * l;
    double* op = out.ptr() + p * r;
    for (std::size_t band = 0; band < l; ++band) {
      const double gv = gp[band];
      for (std::size_t k = 0; k < r; ++k) op[k] += mp[band * r + k] * gv;
    }
  }
  return out;
}

Matrix identity_matrix(std::size_t n) {
  Matrix out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out({m.cols(), m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  }
  return out;
}

std::vector<double> least_squares_solve(const Matrix& a, std::span<const double> b, double ridge) {
  if (a.rank() != 2 || a.rows() < 1 || a.cols() < 1) {
    throw DimensionError("least_squares_solve: need a non-empty matrix, got " + shape_string(a.shape()));
  }
  if (b.size() != a.rows()) {
    throw DimensionError("least_squares_solve: rhs length " + std::to_string(b.size()) + " for " +
                         shape_string(a.shape()));
  }
  if (!(ridge >= 0.0)) throw DomainError("least_squares_solve: ridge must be >= 0");

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> am(a.ptr(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
  Eigen::Map<const Eigen::VectorXd> bm(b.data(), static_cast<Eigen::Index>(b.size()));

  Eigen::VectorXd x;
  if (ridge > 0.0) {
    Eigen::MatrixXd normal = am.transpose() * am;
    normal.diagonal().array() += ridge;
    x = normal.ldlt().solve(am.transpose() * bm);
  } else {
    x = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(am).solve(bm);
  }
  return std::vector<double>(x.data(), x.data() + x.size());
}

}  // namespace deq
