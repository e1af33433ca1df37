#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "kramers/errors.hpp"
#include "kramers/matrixfun.hpp"
#include "kramers/tensor.hpp"

namespace kramers {

// Mean of z_{i_1} ... z_{i_k} under the centred Gaussian with covariance I / beta:
// sum over perfect pairings of the index list of products of Kronecker deltas.
inline double gaussian_moment(double beta, std::vector<int> indices) {
  if (!(beta > 0.0)) throw InvalidInput("beta must be positive");
  const std::size_t k = indices.size();
  if (k % 2 == 1) return 0.0;
  // Pairings count = prod over distinct values of (count - 1)!!, zero if any count is odd.
  std::sort(indices.begin(), indices.end());
  double pairings = 1.0;
  for (std::size_t i = 0; i < k;) {
    std::size_t j = i;
    while (j < k && indices[j] == indices[i]) ++j;
    const std::size_t c = j - i;
    if (c % 2 == 1) return 0.0;
    for (std::size_t f = c - 1; f > 1; f -= 2) pairings *= static_cast<double>(f);
    i = j;
  }
  return pairings * std::pow(beta, -0.5 * static_cast<double>(k));
}

// Mean of T(z, ..., z) under the same Gaussian.
inline double gaussian_average(double beta, const MultilinearTensor& t) {
  if (t.rank() % 2 == 1) return 0.0;
  std::vector<int> idx(t.rank());
  double acc = 0.0;
  for (std::size_t f = 0; f < t.size(); ++f) {
    if (t[f] == 0.0) continue;
    t.unflatten(f, idx);
    acc += t[f] * gaussian_moment(beta, idx);
  }
  return acc;
}

// Tensor with slot `slot` fixed to basis vector `value`; rank drops by one.
inline MultilinearTensor fix_slot(const MultilinearTensor& t, int slot, int value) {
  const int n = t.dim();
  const int k = t.rank();
  if (slot < 0 || slot >= k || value < 0 || value >= n) throw InvalidInput("fix_slot arguments out of range");
  MultilinearTensor out(n, k - 1);
  std::vector<int> idx(k), rest(k - 1);
  for (std::size_t f = 0; f < t.size(); ++f) {
    t.unflatten(f, idx);
    if (idx[slot] != value) continue;
    int r = 0;
    for (int s = 0; s < k; ++s)
      if (s != slot) rest[r++] = idx[s];
    out.at(std::span<const int>(rest)) = t[f];
  }
  return out;
}

// Value, gradient and Hessian of z -> T(z, ..., z).
struct PolyEval {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

inline void accumulate_poly(const MultilinearTensor& t, const Eigen::VectorXd& z, PolyEval& out) {
  const int n = t.dim();
  const int k = t.rank();
  std::vector<int> idx(k);
  std::vector<double> zi(k);
  for (std::size_t f = 0; f < t.size(); ++f) {
    const double a = t[f];
    if (a == 0.0) continue;
    t.unflatten(f, idx);
    for (int s = 0; s < k; ++s) zi[s] = z(idx[s]);
    double all = a;
    for (int s = 0; s < k; ++s) all *= zi[s];
    out.value += all;
    for (int s = 0; s < k; ++s) {
      double p = a;
      for (int r = 0; r < k; ++r)
        if (r != s) p *= zi[r];
      out.grad(idx[s]) += p;
      for (int u = 0; u < k; ++u) {
        if (u == s) continue;
        double pp = a;
        for (int r = 0; r < k; ++r)
          if (r != s && r != u) pp *= zi[r];
        out.hess(idx[s], idx[u]) += pp;
      }
    }
  }
  (void)n;
}

// Polynomial solution chi(z) = sum_j A_j(z, ..., z) of the cell problem
// L chi = B(z, ..., z) - <B>, with L = beta^{-1} gamma : grad grad - (gamma_tilde z) . grad.
struct CellSolution {
  double beta = 1.0;
  Eigen::MatrixXd gamma_tilde;
  Eigen::MatrixXd gamma;  // symmetric part of gamma_tilde
  MultilinearTensor B;
  std::vector<MultilinearTensor> terms;  // ranks k, k-2, ..., down to 1 or 2

  PolyEval evaluate(const Eigen::VectorXd& z) const {
    const int n = static_cast<int>(gamma_tilde.rows());
    if (z.size() != n) throw InvalidInput("z has the wrong dimension");
    PolyEval e{0.0, Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n)};
    for (const auto& t : terms) accumulate_poly(t, z, e);
    return e;
  }
  double value(const Eigen::VectorXd& z) const { return evaluate(z).value; }
  Eigen::VectorXd gradient(const Eigen::VectorXd& z) const { return evaluate(z).grad; }
  Eigen::MatrixXd hessian(const Eigen::VectorXd& z) const { return evaluate(z).hess; }

  // Gaussian mean of grad_z chi.
  Eigen::VectorXd gradient_average() const {
    const int n = static_cast<int>(gamma_tilde.rows());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (const auto& t : terms)
      for (int s = 0; s < t.rank(); ++s)
        for (int xi = 0; xi < n; ++xi) out(xi) += gaussian_average(beta, fix_slot(t, s, xi));
    return out;
  }
};

inline CellSolution solve_cell(double beta, const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde,
                               const MultilinearTensor& B) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidInput("beta must be positive");
  require_coercive(gamma_tilde, "gamma_tilde");
  if (B.dim() != gamma_tilde.rows()) throw InvalidInput("tensor dimension does not match gamma_tilde");
  if (!B.all_finite()) throw InvalidInput("tensor has non-finite entries");
  CellSolution sol;
  sol.beta = beta;
  sol.gamma_tilde = gamma_tilde;
  sol.gamma = symmetric_part(gamma_tilde);
  sol.B = B;
  if (B.rank() == 0) return sol;
  const Eigen::MatrixXd c = -gamma_tilde;
  sol.terms.push_back(-1.0 * lyapunov_multilinear(c, B));
  while (sol.terms.back().rank() >= 3) {
    const MultilinearTensor& prev = sol.terms.back();
    MultilinearTensor src(prev.dim(), prev.rank() - 2);
    for (int a = 0; a < prev.rank(); ++a)
      for (int d = a + 1; d < prev.rank(); ++d) src += prev.contract_pair(a, d, sol.gamma);
    src *= 2.0 / beta;
    sol.terms.push_back(lyapunov_multilinear(c, src));
  }
  return sol;
}

// (L chi)(z) with the diffusion written as (1/2) Sigma : grad grad.
inline double apply_L(double beta, const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde,
                      const Eigen::Ref<const Eigen::MatrixXd>& Sigma, const CellSolution& chi,
                      const Eigen::VectorXd& z) {
  if (gamma_tilde.rows() != chi.gamma_tilde.rows() || Sigma.rows() != gamma_tilde.rows())
    throw InvalidInput("apply_L shape mismatch");
  if (std::abs(beta - chi.beta) > 1e-12 * std::max(1.0, std::abs(beta)) ||
      (gamma_tilde - chi.gamma_tilde).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, gamma_tilde.cwiseAbs().maxCoeff()))
    throw InvalidInput("cell solution was built for different (beta, gamma_tilde)");
  const PolyEval e = chi.evaluate(z);
  return 0.5 * (Sigma.cwiseProduct(e.hess)).sum() - (gamma_tilde * z).dot(e.grad);
}

// Largest |L chi - (B - <B>)| over samples z ~ N(0, I / beta).
inline double verify_residual(const CellSolution& chi, int samples, std::uint64_t seed) {
  const int n = static_cast<int>(chi.gamma_tilde.rows());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const Eigen::MatrixXd Sigma = (2.0 / chi.beta) * chi.gamma;
  const double mean_b = gaussian_average(chi.beta, chi.B);
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) z(i) = nd(rng) / std::sqrt(chi.beta);
    const double lhs = apply_L(chi.beta, chi.gamma_tilde, Sigma, chi, z);
    const double rhs = chi.B.apply_diag(z) - mean_b;
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

}  // namespace kramers
