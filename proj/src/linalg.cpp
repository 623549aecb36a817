// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "grade/error.hpp"

namespace grade {

namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    fail(ErrorKind::kShapeMismatch, std::string(what) + ": matrix is not square");
  }
}

void require_spectrum(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]) || values[i] < 0.0) {
      fail(ErrorKind::kInvalidInput, "spectrum entries must be finite and nonnegative");
    }
    if (i > 0 && values[i] > values[i - 1]) {
      fail(ErrorKind::kInvalidInput, "spectrum must be sorted nonincreasing");
    }
  }
}

}  // namespace

void require_finite(const Matrix& m, const char* what) {
  if (m.rows() < 1 || m.cols() < 1) {
    fail(ErrorKind::kInvalidInput, std::string(what) + ": empty matrix");
  }
  if (!m.allFinite()) {
    fail(ErrorKind::kInvalidInput, std::string(what) + ": non-finite entries");
  }
}

SymmetricPsd SymmetricPsd::from_matrix(const Matrix& m) {
  require_finite(m, "SymmetricPsd");
  require_square(m, "SymmetricPsd");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    fail(ErrorKind::kInvalidInput, "SymmetricPsd: matrix is not symmetric");
  }
  Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double largest = ev.cwiseAbs().maxCoeff();
  if (ev.minCoeff() < -1e-8 * largest) {
    fail(ErrorKind::kInvalidInput, "SymmetricPsd: matrix has a negative eigenvalue");
  }
  return SymmetricPsd(std::move(sym));
}

SymmetricPsd SymmetricPsd::symmetrized(Matrix m) {
  Matrix t = m.transpose();
  m = 0.5 * (m + t);
  return SymmetricPsd(std::move(m));
}

SymmetricPsd gram(const Matrix& m) {
  require_finite(m, "gram");
  return SymmetricPsd::symmetrized(m * m.transpose());
}

SymmetricPsd pinv(const SymmetricPsd& c, double rel_tol) {
  const Matrix& a = c.matrix();
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const Vector& ev = es.eigenvalues();
  const double lambda_max = ev.cwiseAbs().maxCoeff();
  const Eigen::Index n = a.rows();
  if (lambda_max == 0.0) {
    return SymmetricPsd::symmetrized(Matrix::Zero(n, n));
  }
  Vector inv = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (ev(i) > rel_tol * lambda_max) inv(i) = 1.0 / ev(i);
  }
  const Matrix& v = es.eigenvectors();
  return SymmetricPsd::symmetrized(v * inv.asDiagonal() * v.transpose());
}

std::vector<double> singular_values(const SymmetricPsd& c) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(c.matrix(), Eigen::EigenvaluesOnly);
  std::vector<double> out(static_cast<std::size_t>(c.dim()));
  for (Eigen::Index i = 0; i < c.dim(); ++i) {
    out[static_cast<std::size_t>(i)] = std::abs(es.eigenvalues()(i));
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

int naive_rank(std::span<const double> values, double threshold) {
  require_spectrum(values);
  return static_cast<int>(
      std::count_if(values.begin(), values.end(), [&](double v) { return v > threshold; }));
}

double stable_rank(std::span<const double> values, RankExponent exponent) {
  require_spectrum(values);
  if (values.empty() || values.front() == 0.0) {
    fail(ErrorKind::kZeroSpectrum, "stable_rank: leading singular value is zero");
  }
  const double top = values.front();
  double sum = 0.0;
  for (double v : values) {
    const double r = v / top;
    sum += exponent == RankExponent::kLinear ? r : r * r;
  }
  return sum;
}

SpectralSummary summarize(const SymmetricPsd& c, double naive_threshold) {
  SpectralSummary s;
  s.singular_values = singular_values(c);
  s.naive_rank = naive_rank(s.singular_values, naive_threshold);
  if (!s.singular_values.empty() && s.singular_values.front() > 0.0) {
    s.stable_rank_linear = stable_rank(s.singular_values, RankExponent::kLinear);
    s.stable_rank_squared = stable_rank(s.singular_values, RankExponent::kSquared);
  }
  return s;
}

Matrix grad_explicit(const Matrix& h, const Matrix& delta) {
  require_finite(h, "grad_explicit(h)");
  require_finite(delta, "grad_explicit(delta)");
  if (h.rows() != delta.rows()) {
    fail(ErrorKind::kShapeMismatch, "grad_explicit: h and delta have different token counts");
  }
  return delta.transpose() * h;
}

SymmetricPsd projected_grad_cov(const Matrix& h, const Matrix& delta, double rel_tol) {
  require_finite(h, "projected_grad_cov(h)");
  require_finite(delta, "projected_grad_cov(delta)");
  if (h.rows() != delta.rows()) {
    fail(ErrorKind::kShapeMismatch,
         "projected_grad_cov: h and delta have different token counts");
  }
  const SymmetricPsd c_h = gram(h);
  if (c_h.matrix().cwiseAbs().maxCoeff() == 0.0) {
    fail(ErrorKind::kZeroSpectrum, "projected_grad_cov: hidden-state Gram matrix is zero");
  }
  const Matrix projector = pinv(c_h, rel_tol).matrix() * c_h.matrix();
  const Matrix pd = projector * delta;
  return SymmetricPsd::symmetrized(pd * pd.transpose());
}

SymmetricPsd projected_grad_cov_explicit(const Matrix& h, const Matrix& delta,
                                         double rel_tol) {
  const Matrix g = grad_explicit(h, delta);
  const SymmetricPsd c_h = gram(h);
  if (c_h.matrix().cwiseAbs().maxCoeff() == 0.0) {
    fail(ErrorKind::kZeroSpectrum, "projected_grad_cov: hidden-state Gram matrix is zero");
  }
  const Matrix c_h_pinv = pinv(c_h, rel_tol).matrix();
  const Matrix hg = h * g.transpose();
  return SymmetricPsd::symmetrized(c_h_pinv * (hg * hg.transpose()) * c_h_pinv);
}

double max_subspace_residual(const Matrix& h, const Matrix& g) {
  require_finite(h, "max_subspace_residual(h)");
  require_finite(g, "max_subspace_residual(g)");
  if (h.cols() != g.cols()) {
    fail(ErrorKind::kShapeMismatch, "max_subspace_residual: h and g differ in width");
  }
  // Orthonormal basis for the row space of h from a rank-revealing QR of h^T.
  const Matrix ht = h.transpose();
  Eigen::ColPivHouseholderQR<Matrix> qr(ht);
  qr.setThreshold(1e-12);
  const Eigen::Index rank = qr.rank();
  const Matrix q_full = qr.householderQ();
  const Matrix q = q_full.leftCols(rank);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const Vector row = g.row(i).transpose();
    const Vector resid = row - q * (q.transpose() * row);
    worst = std::max(worst, resid.norm() / (row.norm() + 1e-30));
  }
  return worst;
}

double relative_frobenius(const Matrix& a, const Matrix& b) {
  const double diff = (a - b).norm();
  const double denom = b.norm();
  if (denom == 0.0) return diff;
  return diff / denom;
}

}  // namespace grade
