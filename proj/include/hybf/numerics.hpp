#pragma once
/**
 * @file numerics.hpp
 * @brief Dense complex-matrix primitives shared by all solvers: Hermitian
 *        Cholesky, generalized dominant eigenvectors (GDE), spectral clamps,
 *        re-diagonalization and vec/unvec/Kronecker lifting.
 *
 * Everything here is a pure function of its inputs and safe to call from any
 * number of threads. Determinism matters more than raw speed: eigenvector
 * phases are pinned, ties break on the lowest index, and no operation reads
 * global state.
 */

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

namespace hybf {

using cxd  = std::complex<double>;
using cmat = Eigen::MatrixXcd;
using cvec = Eigen::VectorXcd;
using rvec = Eigen::VectorXd;
using rmat = Eigen::MatrixXd;

struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotPositiveDefinite : NumericsError {
  using NumericsError::NumericsError;
};
struct DimensionMismatch : NumericsError {
  using NumericsError::NumericsError;
};

// Hermitian part; assemblies use this to kill rounding-level asymmetry.
inline cmat herm(const cmat& m) { return 0.5 * (m + m.adjoint()); }

// Relative Hermitian asymmetry ||m - m^H|| / max(||m||, tiny).
inline double herm_asymmetry(const cmat& m) {
  double n = m.norm();
  if (n < 1e-300) return 0.0;
  return (m - m.adjoint()).norm() / n;
}

/**
 * Matrix pair (a, b) for the generalized eigenproblem a v = lambda b v,
 * with a Hermitian PSD and b Hermitian PD (possibly after regularization).
 */
struct HermitianPencil {
  cmat a;
  cmat b;
};

/// Lower-triangular L with L L^H = a. Throws NotPositiveDefinite.
inline cmat cholesky_factor(const cmat& a) {
  if (a.rows() != a.cols())
    throw DimensionMismatch("cholesky_factor: matrix must be square");
  Eigen::LLT<cmat> llt(a);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefinite("cholesky_factor: matrix is not positive definite");
  return llt.matrixL();
}

/**
 * Result of a gde() call. `flagged` is set when the pencil needed
 * regularization or had fewer eigenvalues above the rank floor than the
 * requested column count (columns beyond the rank are a null-space pad).
 */
struct GdeResult {
  cmat vectors;   // n x d, descending generalized eigenvalues
  rvec values;    // d
  bool flagged = false;
};

namespace detail {

// Rotate each column so its largest-magnitude entry is real positive.
// Ties break on the lowest index so the output is reproducible bit for bit.
inline void fix_column_phases(cmat& v) {
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index pivot = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      double mag = std::abs(v(r, c));
      if (mag > best) {  // strict: first occurrence wins on ties
        best = mag;
        pivot = r;
      }
    }
    if (best <= 0.0) continue;  // zero column, nothing to pin
    cxd ph = v(pivot, c) / best;
    v.col(c) *= std::conj(ph);
  }
}

}  // namespace detail

/**
 * Top-d generalized eigenvectors of the Hermitian pencil a v = lambda b v.
 *
 * Whitens with the Cholesky factor of b, takes the Hermitian
 * eigendecomposition of L^-1 a L^-H and back-transforms. If b reports a
 * reciprocal condition number under 1e-8 (or is outright singular) a ridge
 * 1e-10 * trace(b)/n * I is added first, with an absolute floor so the
 * all-zero pencil stays solvable; such results are flagged, not fatal.
 * The gate is set so the whitening error of unflagged pencils stays well
 * under the debug self-checks below.
 * Column phases are pinned (largest-magnitude entry real positive).
 */
inline GdeResult gde(const HermitianPencil& pencil, Eigen::Index d) {
  const cmat& a = pencil.a;
  const Eigen::Index n = a.rows();
  if (a.cols() != n || pencil.b.rows() != n || pencil.b.cols() != n)
    throw DimensionMismatch("gde: pencil matrices must be square and equal size");
  if (d < 1 || d > n) throw DimensionMismatch("gde: d out of range");
  assert(herm_asymmetry(a) < 1e-10 && herm_asymmetry(pencil.b) < 1e-10);

  GdeResult out;
  cmat b = herm(pencil.b);

  // Ridge policy: the multicell covariances go near-singular at high SNR and
  // the bottom-layer pencils can be exactly zero for isolated links.
  const double floor_scale =
      std::max({b.real().trace() / double(n), a.real().trace() / double(n), 1.0});
  Eigen::LLT<cmat> llt(b);
  bool needs_ridge = llt.info() != Eigen::Success;
  if (!needs_ridge && llt.rcond() < 1e-8) needs_ridge = true;
  if (needs_ridge) {
    b += 1e-10 * floor_scale * cmat::Identity(n, n);
    llt.compute(b);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefinite("gde: pencil b not PD after regularization");
    out.flagged = true;
  }

  cmat L = llt.matrixL();
  // M = L^-1 a L^-H, kept Hermitian explicitly.
  cmat M = L.triangularView<Eigen::Lower>().solve(herm(a));
  M = L.triangularView<Eigen::Lower>().solve(cmat(M.adjoint())).adjoint();
  M = herm(M);

  Eigen::SelfAdjointEigenSolver<cmat> eig(M);
  if (eig.info() != Eigen::Success)
    throw NumericsError("gde: eigendecomposition failed");

  // Eigen sorts ascending; we want the top d, descending.
  out.vectors.resize(n, d);
  out.values.resize(d);
  // Rank floor on |lambda| relative to the spectral scale: asking for more
  // directions than the numerator supports means the trailing columns are
  // arbitrary basis padding, which callers should know about.
  const double lam_scale = eig.eigenvalues().cwiseAbs().maxCoeff();
  Eigen::Index rank_above_floor = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::abs(eig.eigenvalues()(i)) > 1e-12 * lam_scale) ++rank_above_floor;
  if (rank_above_floor < d) out.flagged = true;

  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::Index src = n - 1 - k;
    out.values(k) = eig.eigenvalues()(src);
    out.vectors.col(k) = eig.eigenvectors().col(src);
  }

#ifndef NDEBUG
  // Whitened eigenresidual tripwire, skipped for flagged pencils whose
  // spectrum is a ridge artifact by construction. Backward stability of the
  // dense Hermitian solver puts ||M y - theta y|| near eps * ||M||; the
  // 1e-10 bound leaves orders of margin while a logic error in assembling
  // M lands at O(||M||). A per-eigenpair relative residual on the original
  // pencil is deliberately not asserted: for wide eigenvalue spreads the
  // small pairs cannot beat eps * lambda_max / lambda_k in any basis.
  if (!out.flagged) {
    const double m_scale = std::max(M.norm(), 1e-300);
    for (Eigen::Index k = 0; k < d; ++k) {
      double r = (M * out.vectors.col(k) - out.values(k) * out.vectors.col(k)).norm();
      assert(r <= 1e-10 * m_scale);
      (void)r;
    }
    (void)m_scale;
  }
#endif

  // Back-transform: x = L^-H y.
  L.adjoint().triangularView<Eigen::Upper>().solveInPlace(out.vectors);
  detail::fix_column_phases(out.vectors);

#ifndef NDEBUG
  // B-orthonormality of the returned columns, the property the downstream
  // water filling relies on. With the rcond gate at 1e-8 the triangular
  // solve error stays near eps * cond(b), well under this bound.
  if (!out.flagged) {
    cmat gram = out.vectors.adjoint() * b * out.vectors;
    assert((gram - cmat::Identity(d, d)).cwiseAbs().maxCoeff() <= 1e-5);
  }
#endif
  return out;
}

/// Eigenvalue clamp (X)^+ = max{0, X}: negatives to zero, eigenvectors kept.
inline cmat positive_part(const cmat& x) {
  if (x.rows() != x.cols())
    throw DimensionMismatch("positive_part: matrix must be square");
  Eigen::SelfAdjointEigenSolver<cmat> eig(herm(x));
  rvec ev = eig.eigenvalues().cwiseMax(0.0);
  return herm(eig.eigenvectors() * ev.asDiagonal() *
              eig.eigenvectors().adjoint());
}

/// Diagonal singular-value matrix of a Hermitian PSD p (descending).
/// Restores the diagonal power structure the multiplier search destroys.
inline cmat rediagonalize(const cmat& p) {
  if (p.rows() != p.cols())
    throw DimensionMismatch("rediagonalize: matrix must be square");
  Eigen::JacobiSVD<cmat> svd(p);
  cmat d = cmat::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) d(i, i) = svd.singularValues()(i);
  return d;
}

/// Column-major stacking.
inline cvec vec(const cmat& m) {
  return Eigen::Map<const cvec>(m.data(), m.size());
}

/// Inverse of vec(); exact round trip.
inline cmat unvec(const cvec& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols)
    throw DimensionMismatch("unvec: length does not match rows*cols");
  return Eigen::Map<const cmat>(v.data(), rows, cols);
}

/// Kronecker product a (x) b, written out so the accumulation order is fixed.
inline cmat kron(const cmat& a, const cmat& b) {
  cmat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormalizable bases; test helper for subspace comparisons.
inline double principal_angle(const cmat& x, const cmat& y) {
  Eigen::HouseholderQR<cmat> qx(x), qy(y);
  cmat q1 = cmat(qx.householderQ()).leftCols(x.cols());
  cmat q2 = cmat(qy.householderQ()).leftCols(y.cols());
  Eigen::JacobiSVD<cmat> svd(q1.adjoint() * q2);
  double c = std::clamp(svd.singularValues().minCoeff(), -1.0, 1.0);
  return std::acos(c);
}

}  // namespace hybf
