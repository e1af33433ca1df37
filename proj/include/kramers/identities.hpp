#pragma once

#include <Eigen/Dense>

#include <random>

#include "kramers/matrixfun.hpp"

namespace kramers {

// Symmetric positive definite matrix with eigenvalues in [lo, hi].
inline Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng, double lo = 0.5, double hi = 3.0) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(lo, hi);
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd d(n);
  for (int i = 0; i < n; ++i) d(i) = ud(rng);
  return q * d.asDiagonal() * q.transpose();
}

inline Eigen::MatrixXd random_antisymmetric(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> ud(-scale, scale);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      h(i, j) = ud(rng);
      h(j, i) = -h(i, j);
    }
  return h;
}

// gamma - H with gamma SPD and H antisymmetric.
inline Eigen::MatrixXd random_gamma_tilde(int n, std::mt19937_64& rng) {
  return random_spd(n, rng) - random_antisymmetric(n, rng);
}

// Left-hand sides of the three contraction identities satisfied by the triple
// exponential integral G of gamma_tilde (gamma its symmetric part). Entry (i3, k).
// Expected values: (n/2) I, I and I respectively.
struct GContractions {
  Eigen::MatrixXd a, b, c;
};

// `gmat` is G as an n^3 x n^3 matrix with rows (i1 i2 i3) and columns (j1 j2 j3).
inline GContractions g_contractions(const Eigen::Ref<const Eigen::MatrixXd>& gmat,
                                    const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde) {
  const int n = static_cast<int>(gamma_tilde.rows());
  if (gmat.rows() != n * n * n || gmat.cols() != n * n * n) throw InvalidInput("G has the wrong shape");
  auto g = [&](int i1, int i2, int i3, int j1, int j2, int j3) {
    return gmat((i1 * n + i2) * n + i3, (j1 * n + j2) * n + j3);
  };
  const Eigen::MatrixXd gamma = symmetric_part(gamma_tilde);
  GContractions out{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  // trace over (j1, j2) with the remaining upper index free: T1[i3][eta] = sum G[i1,i1,i3; j,j,eta]
  Eigen::MatrixXd t_a1 = Eigen::MatrixXd::Zero(n, n);  // (i3, eta)
  Eigen::MatrixXd t_b1 = Eigen::MatrixXd::Zero(n, n);  // G[i1,i3,i1; j,j,eta]
  Eigen::MatrixXd t_c1 = Eigen::MatrixXd::Zero(n, n);  // G[i1,i1,i3; eta,j,j]
  for (int i3 = 0; i3 < n; ++i3)
    for (int eta = 0; eta < n; ++eta)
      for (int i1 = 0; i1 < n; ++i1)
        for (int j = 0; j < n; ++j) {
          t_a1(i3, eta) += g(i1, i1, i3, j, j, eta);
          t_b1(i3, eta) += g(i1, i3, i1, j, j, eta);
          t_c1(i3, eta) += g(i1, i1, i3, eta, j, j);
        }
  Eigen::MatrixXd t_a2 = Eigen::MatrixXd::Zero(n, n);  // sum G[i1,i1,i3; j1,j2,k] gamma_{j1 j2}
  Eigen::MatrixXd t_b2 = Eigen::MatrixXd::Zero(n, n);  // sum G[i1,i1,i3; k,j2,j3] gamma_{j2 j3}
  Eigen::MatrixXd t_c2 = Eigen::MatrixXd::Zero(n, n);  // sum G[i1,i1,i3; j1,k,j3] gamma_{j1 j3}
  for (int i3 = 0; i3 < n; ++i3)
    for (int k = 0; k < n; ++k)
      for (int i1 = 0; i1 < n; ++i1)
        for (int x = 0; x < n; ++x)
          for (int y = 0; y < n; ++y) {
            t_a2(i3, k) += g(i1, i1, i3, x, y, k) * gamma(x, y);
            t_b2(i3, k) += g(i1, i1, i3, k, x, y) * gamma(x, y);
            t_c2(i3, k) += g(i1, i1, i3, x, k, y) * gamma(x, y);
          }
  out.a = 0.5 * t_a1 * gamma_tilde + t_a2;
  out.b = t_b1 * gamma_tilde + 2.0 * t_b2;
  out.c = t_c1 * gamma_tilde + 2.0 * t_c2;
  return out;
}

inline GContractions g_contractions(const TripleExpIntegral& g, const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde) {
  return g_contractions(g.matrix(), gamma_tilde);
}

}  // namespace kramers
