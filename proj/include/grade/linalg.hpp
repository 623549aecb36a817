// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace grade {

/// Dense row-major matrix. All spectral work happens in 64-bit.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// A symmetric positive semidefinite matrix.
///
/// Instances are only produced by `from_matrix` (which validates) or by the
/// library's own products that are PSD by construction (`symmetrized`).
class SymmetricPsd {
 public:
  /// Validates squareness, finiteness, symmetry (1e-10 relative to the
  /// largest entry) and smallest eigenvalue >= -1e-8 * largest.
  static SymmetricPsd from_matrix(const Matrix& m);

  /// Replaces m by (m + m^T) / 2 without a PSD check. For products that are
  /// PSD by construction such as A A^T.
  static SymmetricPsd symmetrized(Matrix m);

  const Matrix& matrix() const noexcept { return m_; }
  Eigen::Index dim() const noexcept { return m_.rows(); }

 private:
  explicit SymmetricPsd(Matrix m) : m_(std::move(m)) {}
  Matrix m_;
};

enum class RankExponent : int { kLinear = 1, kSquared = 2 };

struct SpectralSummary {
  std::vector<double> singular_values;  // nonincreasing
  int naive_rank = 0;
  double stable_rank_linear = 0.0;
  double stable_rank_squared = 0.0;
};

inline constexpr double kPinvRelTol = 1e-10;
inline constexpr double kNaiveRankThreshold = 1e-6;

/// Throws InvalidInput if any entry is NaN or infinite, or if m is empty.
void require_finite(const Matrix& m, const char* what);

/// m m^T, symmetrized entrywise.
SymmetricPsd gram(const Matrix& m);

/// Moore-Penrose pseudoinverse through the eigendecomposition. Eigenvalues
/// at or below rel_tol * lambda_max are treated as zero.
SymmetricPsd pinv(const SymmetricPsd& c, double rel_tol = kPinvRelTol);

/// Nonincreasing singular values (absolute eigenvalues) of c.
std::vector<double> singular_values(const SymmetricPsd& c);

/// Number of values strictly above `threshold`.
int naive_rank(std::span<const double> values, double threshold = kNaiveRankThreshold);

/// sum_i (v_i / v_1)^e. Throws ZeroSpectrum when v_1 == 0.
double stable_rank(std::span<const double> values, RankExponent exponent);

SpectralSummary summarize(const SymmetricPsd& c, double naive_threshold = kNaiveRankThreshold);

/// g = delta^T h, the loss gradient with respect to the down projection.
Matrix grad_explicit(const Matrix& h, const Matrix& delta);

/// Projected gradient covariance P delta delta^T P with P = C_h^+ C_h.
///
/// Equal to C_h^+ (h g^T g h^T) C_h^+ because h g^T = C_h delta, but never
/// materializes the d_model x d_ff gradient. Throws ZeroSpectrum if h == 0.
SymmetricPsd projected_grad_cov(const Matrix& h, const Matrix& delta,
                                double rel_tol = kPinvRelTol);

/// The same covariance evaluated literally through g = delta^T h. Used as a
/// cross-check by the test suites and the gradcheck command.
SymmetricPsd projected_grad_cov_explicit(const Matrix& h, const Matrix& delta,
                                         double rel_tol = kPinvRelTol);

/// Largest relative least-squares residual of a row of g projected onto the
/// row space of h: max_i ||g_i - proj(g_i)|| / (||g_i|| + 1e-30).
double max_subspace_residual(const Matrix& h, const Matrix& g);

/// ||a - b||_F / max(||b||_F, tiny).
double relative_frobenius(const Matrix& a, const Matrix& b);

}  // namespace grade
