// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Low-rank nonnegative variance model: v(f,n) = sum_k T(f,k) U(k,n).

#ifndef FASTSEP_NMF_HPP_
#define FASTSEP_NMF_HPP_

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "fastsep/error.hpp"
#include "fastsep/linalg.hpp"

namespace fastsep::model {

struct NmfModel {
  Eigen::MatrixXd basis;        // T, F x K
  Eigen::MatrixXd activations;  // U, K x N

  Eigen::Index rank() const { return basis.cols(); }

  /// Entries uniform in [0.1, 1).
  static NmfModel random(Eigen::Index bins, Eigen::Index frames, Eigen::Index rank, std::mt19937_64& rng) {
    if (bins <= 0 || frames <= 0 || rank <= 0) throw InvalidArgument("NmfModel: dimensions must be positive");
    std::uniform_real_distribution<double> dist(0.1, 1.0);
    NmfModel m;
    m.basis.resize(bins, rank);
    m.activations.resize(rank, frames);
    for (Eigen::Index i = 0; i < m.basis.size(); ++i) m.basis.data()[i] = dist(rng);
    for (Eigen::Index i = 0; i < m.activations.size(); ++i) m.activations.data()[i] = dist(rng);
    return m;
  }
};

inline Eigen::MatrixXd nmf_variance(const NmfModel& m, double floor = linalg::kVarianceFloor) {
  return (m.basis * m.activations).cwiseMax(floor);
}

/// sum(P/V - log(P/V) - 1); requires P > 0.
inline double is_divergence(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V) {
  const Eigen::ArrayXXd r = P.array() / V.array();
  return (r - r.log() - 1.0).sum();
}

/// sum(log V + P/V): the variance-dependent part of the Gaussian negative
/// log-likelihood. Equals is_divergence up to a P-only constant, and stays
/// finite for P = 0.
inline double is_cost(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V) {
  return (V.array().log() + P.array() / V.array()).sum();
}

/// One sweep of the Itakura-Saito majorization-minimization updates (square-root
/// form, which never increases the divergence): T first, then U.
inline void nmf_update(NmfModel& m, const Eigen::MatrixXd& power, double floor = linalg::kVarianceFloor) {
  if (power.rows() != m.basis.rows() || power.cols() != m.activations.cols())
    throw InvalidArgument("nmf_update: power map shape does not match the model");
  if ((power.array() < 0.0).any()) throw InvalidArgument("nmf_update: power map has negative entries");

  Eigen::MatrixXd V = nmf_variance(m, floor);
  Eigen::MatrixXd inv = V.cwiseInverse();
  Eigen::MatrixXd weighted = power.cwiseProduct(inv).cwiseProduct(inv);
  {
    const Eigen::MatrixXd num = weighted * m.activations.transpose();
    const Eigen::MatrixXd den = inv * m.activations.transpose();
    m.basis = m.basis.cwiseProduct((num.array() / den.array()).sqrt().matrix()).cwiseMax(floor);
  }

  V = nmf_variance(m, floor);
  inv = V.cwiseInverse();
  weighted = power.cwiseProduct(inv).cwiseProduct(inv);
  {
    const Eigen::MatrixXd num = m.basis.transpose() * weighted;
    const Eigen::MatrixXd den = m.basis.transpose() * inv;
    m.activations = m.activations.cwiseProduct((num.array() / den.array()).sqrt().matrix()).cwiseMax(floor);
  }
}

}  // namespace fastsep::model

#endif  // FASTSEP_NMF_HPP_
