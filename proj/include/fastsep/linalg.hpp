// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Small complex linear algebra for per-frequency I x I problems.

#ifndef FASTSEP_LINALG_HPP_
#define FASTSEP_LINALG_HPP_

#include <cmath>
#include <complex>
#include <span>

#include <Eigen/Dense>

#include "fastsep/error.hpp"

namespace fastsep::linalg {

using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;

/// Floor applied wherever a variance appears in a denominator.
inline constexpr double kVarianceFloor = 1e-10;
/// Solves with a reciprocal condition estimate below this are rejected.
inline constexpr double kMinRcond = 1e-13;
/// Diagonal loading, relative to trace(S)/I, used on a rejected solve.
inline constexpr double kRegularization = 1e-10;

struct WeightedCovariance {
  CMat sigma;
  Eigen::Index weight_count = 0;
};

/// (1/N) sum_n x_n x_n^H / max(v_n, floor) for the columns x_n of `X`.
inline WeightedCovariance weighted_cov(const CMat& X, std::span<const double> v,
                                       double floor = kVarianceFloor) {
  const Eigen::Index n = X.cols();
  if (n == 0) throw InvalidArgument("weighted_cov: no frames");
  if (static_cast<Eigen::Index>(v.size()) != n)
    throw InvalidArgument("weighted_cov: weight count does not match frame count");
  Eigen::VectorXd inv(n);
  for (Eigen::Index i = 0; i < n; ++i) inv[i] = 1.0 / std::max(v[i], floor);
  CMat scaled = X * inv.asDiagonal();
  CMat sigma = scaled * X.adjoint() / static_cast<double>(n);
  // Exact Hermitian symmetry; rounding leaves the two triangles slightly apart.
  CMat herm = 0.5 * (sigma + sigma.adjoint());
  return {std::move(herm), n};
}

/// Solution of A w = e_j. Throws IllConditioned when the conditioning guard trips.
inline CVec solve(const CMat& A, Eigen::Index j) {
  if (A.rows() != A.cols()) throw InvalidArgument("solve: matrix is not square");
  if (j < 0 || j >= A.rows()) throw InvalidArgument("solve: basis index out of range");
  Eigen::PartialPivLU<CMat> lu(A);
  double rc = lu.rcond();
  if (!std::isfinite(rc)) rc = 0.0;  // exact zero pivot
  if (rc < kMinRcond) throw IllConditioned("solve: matrix is singular or ill-conditioned", rc);
  return lu.solve(CVec::Unit(A.rows(), j));
}

/// S + kRegularization * trace(S)/I * Id.
inline CMat regularized(const CMat& S) {
  const double load = kRegularization * std::abs(S.trace().real()) / static_cast<double>(S.rows());
  CMat out = S;
  out.diagonal().array() += std::max(load, kVarianceFloor);
  return out;
}

/// log |det W| via a partially pivoted LU; returns -inf for an exactly singular W.
inline double logdet_abs(const CMat& W) {
  if (W.rows() != W.cols()) throw InvalidArgument("logdet_abs: matrix is not square");
  if (W.rows() == 0) return 0.0;
  Eigen::PartialPivLU<CMat> lu(W);
  const CMat& packed = lu.matrixLU();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < W.rows(); ++i) acc += std::log(std::abs(packed(i, i)));
  return acc;
}

}  // namespace fastsep::linalg

#endif  // FASTSEP_LINALG_HPP_
