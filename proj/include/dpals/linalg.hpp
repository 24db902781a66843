#pragma once

// Numerical primitives shared by the private computations: clipping,
// Gaussian noise, projection onto the PSD cone, pseudoinverse solves and
// symmetric orthonormalization.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dpals/common.hpp"
#include "dpals/rng.hpp"

namespace dpals {

/// Dense symmetric r x r matrix. Writes go to both triangles, so
/// (a, b) and (b, a) are always bitwise equal.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(Eigen::Index order) : values_(Matrix::Zero(order, order)) {}

  /// Builds from the upper triangle (diagonal included) of `m`.
  static SymMatrix from_upper(const Matrix& m) {
    require(m.rows() == m.cols(), "symmetric matrix must be square");
    SymMatrix s(m.rows());
    for (Eigen::Index a = 0; a < m.rows(); ++a)
      for (Eigen::Index b = a; b < m.cols(); ++b) s.set(a, b, m(a, b));
    return s;
  }

  static SymMatrix identity(Eigen::Index order) {
    SymMatrix s;
    s.values_ = Matrix::Identity(order, order);
    return s;
  }

  Eigen::Index order() const { return values_.rows(); }
  double operator()(Eigen::Index a, Eigen::Index b) const { return values_(a, b); }
  void set(Eigen::Index a, Eigen::Index b, double v) {
    values_(a, b) = v;
    values_(b, a) = v;
  }
  const Matrix& matrix() const { return values_; }

  /// this += weight * x x^T
  void add_outer(const Eigen::Ref<const Vector>& x, double weight = 1.0) {
    values_.selfadjointView<Eigen::Upper>().rankUpdate(x, weight);
    mirror_upper();
  }

  SymMatrix& operator+=(const SymMatrix& other) {
    values_ += other.values_;
    return *this;
  }
  SymMatrix& operator*=(double s) {
    values_ *= s;
    return *this;
  }
  void add_to_diagonal(double v) { values_.diagonal().array() += v; }

 private:
  void mirror_upper() { values_.triangularView<Eigen::StrictlyLower>() = values_.transpose(); }

  Matrix values_;
};

inline SymMatrix operator+(SymMatrix a, const SymMatrix& b) { return a += b; }

/// Projection of `u` onto the l2 ball of radius `c`.
inline Vector clip_vector(const Eigen::Ref<const Vector>& u, double c) {
  require(c >= 0.0, "clip radius must be nonnegative");
  require(u.allFinite(), "non-finite vector");
  const double norm = u.norm();
  if (norm <= c) return u;
  return u * (c / norm);
}

inline std::vector<double> clip_entries(std::span<const double> values, double gamma_M) {
  require(gamma_M >= 0.0, "entry clip bound must be nonnegative");
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) {
    require(std::isfinite(v), "non-finite vector");
    out.push_back(std::clamp(v, -gamma_M, gamma_M));
  }
  return out;
}

inline Vector sample_gaussian_vector(const RngStream& stream, Eigen::Index dim, double std) {
  require(std >= 0.0, "noise std must be nonnegative");
  Vector out = Vector::Zero(dim);
  if (std == 0.0) return out;
  CounterRng rng = stream.generator();
  for (Eigen::Index i = 0; i < dim; ++i) out[i] = std * rng.normal();
  return out;
}

/// Upper triangle (diagonal included) i.i.d. N(0, std^2) in row-major
/// order, lower triangle mirrored.
inline SymMatrix sample_symmetric_gaussian(const RngStream& stream, Eigen::Index order, double std) {
  require(std >= 0.0, "noise std must be nonnegative");
  SymMatrix out(order);
  if (std == 0.0) return out;
  CounterRng rng = stream.generator();
  for (Eigen::Index a = 0; a < order; ++a)
    for (Eigen::Index b = a; b < order; ++b) out.set(a, b, std * rng.normal());
  return out;
}

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Matrix> symmetric_eigen(const SymMatrix& a) {
  require(a.matrix().allFinite(), "non-finite matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a.matrix());
  if (solver.info() != Eigen::Success) throw Error("eigensolver divergence");
  return solver;
}

}  // namespace detail

/// Q max(L, 0) Q^T for A = Q L Q^T.
inline SymMatrix project_psd(const SymMatrix& a) {
  if (a.order() == 0) return a;
  const auto eig = detail::symmetric_eigen(a);
  const Vector kept = eig.eigenvalues().cwiseMax(0.0);
  const Matrix& q = eig.eigenvectors();
  return SymMatrix::from_upper(q * kept.asDiagonal() * q.transpose());
}

/// A^+ b for PSD `a`. Eigenvalues at or below r * eps * lambda_max count as zero.
inline Vector psd_pseudo_solve(const SymMatrix& a, const Eigen::Ref<const Vector>& b) {
  require(a.order() == b.size(), "dimension mismatch in pseudo solve");
  if (a.order() == 0) return Vector();
  const auto eig = detail::symmetric_eigen(a);
  const Vector& lambda = eig.eigenvalues();
  const double lambda_max = lambda.maxCoeff();
  const double cutoff = static_cast<double>(lambda.size()) * std::numeric_limits<double>::epsilon() *
                        std::max(lambda_max, 0.0);
  Vector inv = Vector::Zero(lambda.size());
  for (Eigen::Index i = 0; i < lambda.size(); ++i)
    if (lambda[i] > cutoff) inv[i] = 1.0 / lambda[i];
  const Matrix& q = eig.eigenvectors();
  return q * (inv.asDiagonal() * (q.transpose() * b));
}

/// psd_pseudo_solve(project_psd(a), b) with a single eigendecomposition.
inline Vector projected_pseudo_solve(const SymMatrix& a, const Eigen::Ref<const Vector>& b) {
  require(a.order() == b.size(), "dimension mismatch in pseudo solve");
  if (a.order() == 0) return Vector();
  const auto eig = detail::symmetric_eigen(a);
  const Vector lambda = eig.eigenvalues().cwiseMax(0.0);
  const double cutoff =
      static_cast<double>(lambda.size()) * std::numeric_limits<double>::epsilon() * lambda.maxCoeff();
  Vector inv = Vector::Zero(lambda.size());
  for (Eigen::Index i = 0; i < lambda.size(); ++i)
    if (lambda[i] > cutoff) inv[i] = 1.0 / lambda[i];
  const Matrix& q = eig.eigenvectors();
  return q * (inv.asDiagonal() * (q.transpose() * b));
}

/// W (W^T W)^{-1/2}: symmetric orthogonalization, same column span as W.
template <class Derived>
FactorMatrix orthonormalize_columns(const Eigen::MatrixBase<Derived>& w) {
  const Eigen::Index r = w.cols();
  FactorMatrix current = w;
  require(current.allFinite(), "non-finite matrix");
  // A second pass of the same map repairs round-off when W is badly scaled.
  for (int pass = 0; pass < 2; ++pass) {
    const Matrix gram = current.transpose() * current;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    if (eig.info() != Eigen::Success) throw Error("eigensolver divergence");
    const Vector& lambda = eig.eigenvalues();
    const double lambda_max = lambda.maxCoeff();
    if (!(lambda_max > 0.0) ||
        lambda.minCoeff() <= static_cast<double>(r) * std::numeric_limits<double>::epsilon() * lambda_max) {
      throw Error("degenerate factor matrix");
    }
    const Matrix& q = eig.eigenvectors();
    const Matrix inv_sqrt = q * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * q.transpose();
    current = current * inv_sqrt;
    const Matrix residual = current.transpose() * current - Matrix::Identity(r, r);
    if (residual.norm() <= 1e-12) break;
  }
  return current;
}

/// Gaussian rows x cols matrix with i.i.d. N(0, 1) entries. Column c is drawn from the
/// stream entity c, so rank-1 and block variants share their first column.
inline FactorMatrix random_gaussian_matrix(const RngStream& stream, Eigen::Index rows, Eigen::Index cols) {
  FactorMatrix g(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    CounterRng rng = stream.with_entity(static_cast<std::uint32_t>(c)).generator();
    for (Eigen::Index i = 0; i < rows; ++i) g(i, c) = rng.normal();
  }
  return g;
}

}  // namespace dpals
