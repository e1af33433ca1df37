#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kramers/cellproblem.hpp"
#include "kramers/errors.hpp"
#include "kramers/matrixfun.hpp"
#include "kramers/simulate.hpp"
#include "kramers/system.hpp"

namespace kramers {

// ================================================================ pointwise terms

// w = V grad(beta) + beta F_ext - beta d_t psi
inline Vec work_vector(const DerivativeBundle& b) {
  return b.V * b.grad_beta + b.beta * b.F_ext - b.beta * b.dt_psi;
}

// (i, j) = d_i w_j
inline Mat work_jacobian(const DerivativeBundle& b) {
  require_full(b);
  return b.grad_V * b.grad_beta.transpose() + b.V * b.hess_beta + b.grad_beta * b.F_ext.transpose() +
         b.beta * b.jac_F_ext - b.grad_beta * b.dt_psi.transpose() - b.beta * b.dt_jac_psi;
}

inline double dr_beta_V(const DerivativeBundle& b) { return b.dt_beta * b.V + b.beta * b.dt_V; }

// w . gamma_tilde^{-1} F
inline double force_term(const DerivativeBundle& b) { return work_vector(b).dot(b.gamma_tilde_inv * b.F); }

// beta^{-1} d_i (w_j (gamma_tilde^{-1})^{ji})
inline double divergence_term(const DerivativeBundle& b) {
  require_full(b);
  const Vec w = work_vector(b);
  const Mat dw = work_jacobian(b);
  double acc = 0.0;
  for (int i = 0; i < b.n; ++i)
    for (int j = 0; j < b.n; ++j) acc += dw(i, j) * b.gamma_tilde_inv(j, i) + w(j) * b.d_gamma_tilde_inv[i](j, i);
  return acc / b.beta;
}

// Contractions of G used by the anomaly and the Y identities, all indexed (i3, l):
//   tr_up(i3, l)  = sum G[i1,i1,i3; j1,j2,j2] ... with the free upper index first
//   g_gamma(i3,l) = sum G[i1,i1,i3; j1,j2,l] gamma_{j1 j2}
//   q_mat(i3, l)  = g_gamma + 2 sum G[i1,i1,i3; j1,l,j3] gamma_{j1 j3}
struct GContractionSet {
  Mat tr_first;   // sum_{i1,j} G[i1,i1,i3; l,j,j]
  Mat tr_last;    // sum_{i1,j} G[i1,i1,i3; j,j,l]
  Mat g_gamma;
  Mat q_mat;
  Mat b_first;    // sum_{i1,j2,j3} G[i1,i1,i3; l,j2,j3] gamma_{j2 j3}
  Mat cross;      // sum_{i1,j} G[i1,i3,i1; j,j,l]
};

inline GContractionSet g_contraction_set(const Eigen::Ref<const Eigen::MatrixXd>& gmat, const Mat& gamma) {
  const int n = static_cast<int>(gamma.rows());
  auto g = [&](int i1, int i2, int i3, int j1, int j2, int j3) {
    return gmat((i1 * n + i2) * n + i3, (j1 * n + j2) * n + j3);
  };
  GContractionSet c;
  c.tr_first.setZero(n, n);
  c.tr_last.setZero(n, n);
  c.g_gamma.setZero(n, n);
  c.b_first.setZero(n, n);
  c.cross.setZero(n, n);
  Mat second = Mat::Zero(n, n);
  for (int i3 = 0; i3 < n; ++i3)
    for (int l = 0; l < n; ++l)
      for (int i1 = 0; i1 < n; ++i1) {
        for (int j = 0; j < n; ++j) {
          c.tr_first(i3, l) += g(i1, i1, i3, l, j, j);
          c.tr_last(i3, l) += g(i1, i1, i3, j, j, l);
          c.cross(i3, l) += g(i1, i3, i1, j, j, l);
        }
        for (int x = 0; x < n; ++x)
          for (int y = 0; y < n; ++y) {
            c.g_gamma(i3, l) += g(i1, i1, i3, x, y, l) * gamma(x, y);
            second(i3, l) += g(i1, i1, i3, x, l, y) * gamma(x, y);
            c.b_first(i3, l) += g(i1, i1, i3, l, x, y) * gamma(x, y);
          }
      }
  c.q_mat = c.g_gamma + 2.0 * second;
  return c;
}

// Matrix K with anomaly integrand beta^{-3} grad(beta) . K grad(beta):
// K = (n/2 I + tr_first gamma_tilde - g_gamma) gamma_tilde^{-1}.
inline Mat anomaly_kernel_general(const DerivativeBundle& b, const GContractionSet& c) {
  const Mat inner = 0.5 * b.n * Mat::Identity(b.n, b.n) + c.tr_first * b.gamma_tilde - c.g_gamma;
  return inner * b.gamma_tilde_inv;
}

inline double anomaly_general(const DerivativeBundle& b, const GContractionSet& c) {
  return b.grad_beta.dot(anomaly_kernel_general(b, c) * b.grad_beta) / (b.beta * b.beta * b.beta);
}

inline double anomaly_general(const DerivativeBundle& b) {
  const TripleExpIntegral g(Eigen::MatrixXd(b.gamma_tilde));
  return anomaly_general(b, g_contraction_set(g.matrix(), b.gamma));
}

// beta^{-3} grad(beta) . K grad(beta)
inline double anomaly_from_kernel(const DerivativeBundle& b, const Mat& k) {
  return b.grad_beta.dot(k * b.grad_beta) / (b.beta * b.beta * b.beta);
}

inline double anomaly_psi0(const DerivativeBundle& b) {
  return anomaly_from_kernel(b, anomaly_kernel_psi0(Eigen::MatrixXd(b.gamma)));
}

inline double anomaly_eigen(const DerivativeBundle& b) {
  return anomaly_from_kernel(b, anomaly_kernel_eigen(Eigen::MatrixXd(b.gamma)));
}

inline bool is_scalar_matrix(const Mat& m, double tol = 1e-12) {
  const Mat d = m - m(0, 0) * Mat::Identity(m.rows(), m.cols());
  return d.cwiseAbs().maxCoeff() <= tol * std::max(1.0, std::abs(m(0, 0)));
}

// (n+2)/6 beta^{-3} gamma^{-1} |grad beta|^2 for gamma = g I.
inline double anomaly_scalar(const DerivativeBundle& b) {
  if (!is_scalar_matrix(b.gamma)) throw InvalidInput("scalar anomaly needs gamma proportional to the identity");
  return (b.n + 2.0) / 6.0 * b.grad_beta.squaredNorm() / (b.gamma(0, 0) * b.beta * b.beta * b.beta);
}

// (n+2)/2 beta^{-3} grad(beta) . (gamma_tilde + 2 gamma I)^{-1} grad(beta) for scalar gamma.
inline Mat anomaly_kernel_uniform_b(const DerivativeBundle& b) {
  if (!is_scalar_matrix(b.gamma)) throw InvalidInput("uniform-field anomaly needs gamma proportional to the identity");
  return 0.5 * (b.n + 2.0) * Mat(shifted_inverse(Eigen::MatrixXd(b.gamma_tilde), b.gamma(0, 0)));
}

inline double anomaly_uniform_b(const DerivativeBundle& b) {
  return b.grad_beta.dot(anomaly_kernel_uniform_b(b) * b.grad_beta) / (b.beta * b.beta * b.beta);
}

// psi = 0 specialisations built from gamma directly.
inline double force_term_psi0(const DerivativeBundle& b) {
  const Vec u = b.beta * b.F_ext + b.V * b.grad_beta;
  const Vec f = -b.grad_V + b.F_ext;
  return f.dot(small_inverse(b.gamma) * u);
}

inline double divergence_term_psi0(const DerivativeBundle& b) {
  require_full(b);
  const Mat gi = small_inverse(b.gamma);
  const Vec u = b.beta * b.F_ext + b.V * b.grad_beta;
  const Mat du = b.grad_beta * b.F_ext.transpose() + b.beta * b.jac_F_ext + b.grad_V * b.grad_beta.transpose() +
                 b.V * b.hess_beta;  // (i, j) = d_i u_j
  double acc = 0.0;
  for (int i = 0; i < b.n; ++i) {
    const Mat dgi = -gi * b.d_gamma[i] * gi;
    for (int j = 0; j < b.n; ++j) acc += dgi(i, j) * u(j) + gi(i, j) * du(i, j);
  }
  return acc / b.beta;
}

// d_r ln(beta) along the overdamped flow, in expectation (Ito form).
inline double ito_log_beta_integrand(const DerivativeBundle& b) {
  require_full(b);
  const Vec drift = b.gamma_tilde_inv * b.F + noise_induced_drift_ito(b);
  const Mat hess_log = b.hess_beta / b.beta - b.grad_beta * b.grad_beta.transpose() / (b.beta * b.beta);
  double acc = 0.0;
  for (int i = 0; i < b.n; ++i)
    for (int j = 0; j < b.n; ++j) acc += hess_log(i, j) * b.gamma_tilde_inv(j, i);
  return (b.dt_beta + b.grad_beta.dot(drift) + acc) / b.beta;
}

// ================================================================ Y functions

// Y1 (row vector) from the G-tensor expression.
inline Vec y1_raw(const DerivativeBundle& b, const GContractionSet& c) {
  const Vec w = work_vector(b);
  const Vec& db = b.grad_beta;
  Vec y = b.gamma_tilde_inv.transpose() * w;
  // beta^{-1} sum G[i1,i2,i1; j,j,l] d_{i2} beta + (1/2) beta^{-1} sum G[i1,i1,i3; j,j,l] d_{i3} beta
  y += (c.cross.transpose() * db + 0.5 * c.tr_last.transpose() * db) / b.beta;
  // beta^{-1} d_{i3} beta (g_gamma + 2 b_first)(i3, m) gi(m, l)
  y += ((c.g_gamma + 2.0 * c.b_first) * b.gamma_tilde_inv).transpose() * db / b.beta;
  return y;
}

inline Vec y1_simplified(const DerivativeBundle& b) {
  return b.gamma_tilde_inv.transpose() * (work_vector(b) + 0.5 * (b.n + 2.0) * b.grad_beta / b.beta);
}

inline Vec y1_uniform_b(const DerivativeBundle& b) {
  if (!is_scalar_matrix(b.gamma)) throw InvalidInput("uniform-field form needs scalar gamma");
  const double g = b.gamma(0, 0);
  const Mat s = shifted_inverse(Eigen::MatrixXd(b.gamma_tilde), g);
  const Vec u = b.V * b.grad_beta + b.beta * b.F_ext;
  const Vec& db = b.grad_beta;
  return b.gamma_tilde_inv.transpose() * u + (1.0 + 0.5 * b.n) / b.beta * s.transpose() * db +
         (b.n + 2.0) * g / b.beta * (s * b.gamma_tilde_inv).transpose() * db;
}

// -Gaussian mean of grad_z chi for the cell problem whose source is
// (1/2)|z|^2 grad(beta).z + w.z.
inline Vec y1_cell(const DerivativeBundle& b) {
  const int n = b.n;
  MultilinearTensor b3(n, 3);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) b3.at({i, i, k}) = 0.5 * b.grad_beta(k);
  const Eigen::VectorXd w = work_vector(b);
  const Eigen::MatrixXd gt = b.gamma_tilde;
  const Eigen::VectorXd g3 = solve_cell(b.beta, gt, b3).gradient_average();
  const Eigen::VectorXd g1 = solve_cell(b.beta, gt, MultilinearTensor::from_vector(w)).gradient_average();
  return Vec(-(g3 + g1));
}

// Pieces of the G contractions and their spatial derivatives for Y2.
struct GDerivativeSet {
  GContractionSet at;
  std::array<GContractionSet, kMaxDim> d;  // d[i] holds d_i of each contraction
};

inline GDerivativeSet g_derivative_set(const DerivativeBundle& b) {
  require_full(b);
  const TripleExpIntegral g(Eigen::MatrixXd(b.gamma_tilde));
  GDerivativeSet s;
  s.at = g_contraction_set(g.matrix(), b.gamma);
  for (int i = 0; i < b.n; ++i) {
    const Mat d_gt = b.d_gamma[i] - b.d_H[i];
    const Eigen::MatrixXd dg = g.derivative_matrix(Eigen::MatrixXd(d_gt));
    // contractions are bilinear in (G, gamma): d(c) = c(dG, gamma) + c(G, d gamma)
    GContractionSet a = g_contraction_set(dg, b.gamma);
    const GContractionSet bb = g_contraction_set(g.matrix(), b.d_gamma[i]);
    a.g_gamma += bb.g_gamma;
    a.q_mat += bb.q_mat;
    a.b_first += bb.b_first;
    s.d[i] = a;
  }
  return s;
}

inline double y2_raw(const DerivativeBundle& b, const GDerivativeSet& s) {
  const int n = b.n;
  const double beta = b.beta;
  const Vec& db = b.grad_beta;
  const Mat& hb = b.hess_beta;
  const Mat& gi = b.gamma_tilde_inv;
  // (1/2) beta^{-2} d_i [d_{i3} beta (tr_last(i3, i) + 2 tr_first(i3, i))]
  double term_a = 0.0;
  for (int i = 0; i < n; ++i)
    for (int i3 = 0; i3 < n; ++i3) {
      term_a += hb(i, i3) * (s.at.tr_last(i3, i) + 2.0 * s.at.tr_first(i3, i));
      term_a += db(i3) * (s.d[i].tr_last(i3, i) + 2.0 * s.d[i].tr_first(i3, i));
    }
  term_a *= 0.5 / (beta * beta);
  // beta^{-1} d_i [beta^{-1} d_{i3} beta q_mat(i3, l) gi(l, i)]
  double term_b = 0.0;
  for (int i = 0; i < n; ++i)
    for (int i3 = 0; i3 < n; ++i3)
      for (int l = 0; l < n; ++l) {
        const double f = db(i3) / beta;
        const double df = hb(i, i3) / beta - db(i) * db(i3) / (beta * beta);
        term_b += df * s.at.q_mat(i3, l) * gi(l, i) + f * s.d[i].q_mat(i3, l) * gi(l, i) +
                  f * s.at.q_mat(i3, l) * b.d_gamma_tilde_inv[i](l, i);
      }
  term_b /= beta;
  return term_a + term_b + divergence_term(b);
}

inline double y2_simplified(const DerivativeBundle& b, const GContractionSet& c) {
  require_full(b);
  const int n = b.n;
  const Vec& db = b.grad_beta;
  const Mat& gi = b.gamma_tilde_inv;
  double d_div = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d_div += b.hess_beta(i, j) * gi(j, i) + db(j) * b.d_gamma_tilde_inv[i](j, i);
  double last = 0.0;
  for (int i = 0; i < n; ++i)
    for (int i3 = 0; i3 < n; ++i3)
      for (int l = 0; l < n; ++l) last += db(i) * db(i3) * gi(l, i) * c.q_mat(i3, l);
  const double beta = b.beta;
  return 0.5 * (n + 2.0) * d_div / (beta * beta) + divergence_term(b) - last / (beta * beta * beta);
}

inline double y2_uniform_b(const DerivativeBundle& b) {
  require_full(b);
  if (!is_scalar_matrix(b.gamma)) throw InvalidInput("uniform-field form needs scalar gamma");
  const int n = b.n;
  const double g = b.gamma(0, 0);
  const double beta = b.beta;
  const Mat s = shifted_inverse(Eigen::MatrixXd(b.gamma_tilde), g);
  const Mat& gi = b.gamma_tilde_inv;
  const Vec& db = b.grad_beta;
  double t1 = 0.0, t2 = 0.0, t3 = 0.0;
  const Mat sg = s * gi;
  const Mat du = b.grad_V * db.transpose() + b.V * b.hess_beta + db * b.F_ext.transpose() + beta * b.jac_F_ext;
  for (int l = 0; l < n; ++l)
    for (int i = 0; i < n; ++i) {
      t1 += s(l, i) * b.hess_beta(i, l);
      t2 += sg(l, i) * (b.hess_beta(i, l) / beta - db(i) * db(l) / (beta * beta));
      t3 += du(i, l) * gi(l, i);
    }
  return 0.5 * (n + 2.0) * t1 / (beta * beta) + (n + 2.0) * g * t2 / beta + t3 / beta;
}

// ================================================================ overdamped splitting

// Antisymmetric part P = (gi - gi^T)/2 of gamma_tilde^{-1} and its derivatives.
inline Mat p_matrix(const DerivativeBundle& b) { return 0.5 * (b.gamma_tilde_inv - b.gamma_tilde_inv.transpose()); }

// True when H and its first derivatives vanish, so b_minus is exactly zero.
inline bool no_magnetic_part(const DerivativeBundle& b) {
  if (!b.H.isZero(0.0)) return false;
  for (int i = 0; i < b.n; ++i)
    if (!b.d_H[i].isZero(0.0)) return false;
  return true;
}

inline Vec b_minus(const DerivativeBundle& b) {
  require_full(b);
  if (no_magnetic_part(b)) return Vec::Zero(b.n);
  Vec out = p_matrix(b) * b.F;
  for (int j = 0; j < b.n; ++j)
    out += 0.5 * (b.d_gamma_tilde_inv[j].col(j) - b.d_gamma_tilde_inv[j].row(j).transpose()) / b.beta;
  return out;
}

inline double div_b_minus(const DerivativeBundle& b) {
  require_full(b);
  if (no_magnetic_part(b)) return 0.0;
  const Mat p = p_matrix(b);
  double acc = 0.0;
  for (int i = 0; i < b.n; ++i) {
    const Mat dp = 0.5 * (b.d_gamma_tilde_inv[i] - b.d_gamma_tilde_inv[i].transpose());
    for (int j = 0; j < b.n; ++j) {
      acc += dp(i, j) * b.F(j) + p(i, j) * b.jac_F(i, j);
      acc += -b.grad_beta(i) / (b.beta * b.beta) * 0.5 *
             (b.d_gamma_tilde_inv[j](i, j) - b.d_gamma_tilde_inv[j](j, i));
    }
  }
  return acc;
}

// Closed-form b_hat_plus.
inline Vec b_hat_plus(const DerivativeBundle& b) {
  const Vec grad_inv_beta = -b.grad_beta / (b.beta * b.beta);
  const Mat& gi = b.gamma_tilde_inv;
  return gi * (b.F - grad_inv_beta) + gi * b.H * gi.transpose() * (grad_inv_beta - b.F);
}

// b_plus - (1/2) sum_xi sigma_tilde^i_xi d_j sigma_tilde^j_xi with sigma_tilde = gi sigma.
inline Vec b_hat_plus_definition(const DerivativeBundle& b, Involution split = Involution::standard) {
  require_full(b);
  const Mat& gi = b.gamma_tilde_inv;
  Vec bplus;
  if (split == Involution::uniform_B) {
    const Vec f = -b.grad_V + b.F_ext;
    bplus = 0.5 * (gi + gi.transpose()) * f + noise_induced_drift_strat(b);
  } else {
    bplus = gi * b.F + noise_induced_drift_strat(b) - b_minus(b);
  }
  const Mat st = gi * b.sigma;
  Vec div_row = Vec::Zero(b.n);  // sum_j d_j st(j, xi)
  for (int j = 0; j < b.n; ++j) div_row += (b.d_gamma_tilde_inv[j] * b.sigma + gi * b.d_sigma[j]).row(j).transpose();
  return bplus - 0.5 * st * div_row;
}

// Sigma_tilde^{-1} = (beta / 2) gamma_tilde^T gamma^{-1} gamma_tilde.
inline Mat sigma_tilde_inverse(const DerivativeBundle& b) {
  return 0.5 * b.beta * b.gamma_tilde.transpose() * small_inverse(b.gamma) * b.gamma_tilde;
}

// ================================================================ ledgers

// Underdamped environment entropy over [s, t]: boundary values of beta (|z|^2/2 + V) and
// time integrals accumulated with the integrand at the step midpoint.
struct UnderdampedLedger {
  double start_energy = 0.0;  // beta (|z|^2/2 + V) at s
  double end_energy = 0.0;
  double dr_beta_v = 0.0;
  double dt_beta_kinetic = 0.0;
  double cubic = 0.0;
  double linear = 0.0;
  bool started = false;

  double total() const { return -(end_energy - start_energy) + dr_beta_v + dt_beta_kinetic + cubic + linear; }

  // The ledger over [s, u] followed by the one over [u, t].
  static UnderdampedLedger concatenate(const UnderdampedLedger& a, const UnderdampedLedger& b) {
    UnderdampedLedger c;
    c.start_energy = a.start_energy;
    c.end_energy = b.end_energy;
    c.dr_beta_v = a.dr_beta_v + b.dr_beta_v;
    c.dt_beta_kinetic = a.dt_beta_kinetic + b.dt_beta_kinetic;
    c.cubic = a.cubic + b.cubic;
    c.linear = a.linear + b.linear;
    c.started = a.started;
    return c;
  }
};

inline double beta_energy(const DerivativeBundle& b, const Vec& z) { return b.beta * (0.5 * z.squaredNorm() + b.V); }

// Terms that are smooth in time use the midpoint state. Terms that are functions of the
// fast variable z alone use the trapezoid rule on the grid: the midpoint of z has a
// variance deficit of order h/m, the endpoints do not.
inline void accumulate_underdamped(UnderdampedLedger& l, const SystemSpec& sys, double mass,
                                   const UnderdampedState& a, const DerivativeBundle& ba, const UnderdampedState& c,
                                   const DerivativeBundle& bc) {
  const double h = c.t - a.t;
  const Vec qm = 0.5 * (a.q + c.q);
  const Vec zm = 0.5 * (a.z + c.z);
  thread_local DerivativeBundle bm;
  evaluate_bundle_into(bm, sys, 0.5 * (a.t + c.t), qm, BundleDetail::kinetic);
  const double rs = 1.0 / std::sqrt(mass);
  const double ka = a.z.squaredNorm(), kc = c.z.squaredNorm();
  l.dr_beta_v += dr_beta_V(bm) * h;
  l.dt_beta_kinetic += 0.25 * (ba.dt_beta * ka + bc.dt_beta * kc) * h;
  l.cubic += 0.25 * rs * (ka * ba.grad_beta.dot(a.z) + kc * bc.grad_beta.dot(c.z)) * h;
  l.linear += rs * work_vector(bm).dot(zm) * h;
  l.end_energy = beta_energy(bc, c.z);
}

struct OverdampedLedger {
  double strat = 0.0;   // int 2 b_hat_plus^T Sigma_tilde^{-1} o dq
  double drift = 0.0;   // int (2 b_hat_plus^T Sigma_tilde^{-1} b_minus + div b_minus) dr
  double total() const { return strat - drift; }
};

inline void accumulate_overdamped(OverdampedLedger& l, const SystemSpec& sys, const OverdampedState& a,
                                  const OverdampedState& c, Involution split = Involution::standard) {
  const double h = c.t - a.t;
  const Vec qm = 0.5 * (a.q + c.q);
  const bool need_full = !sys.psi_zero();
  thread_local DerivativeBundle bm;
  evaluate_bundle_into(bm, sys, 0.5 * (a.t + c.t), qm, need_full ? BundleDetail::full : BundleDetail::kinetic);
  if (!need_full) {
    // b_minus = 0 and the weight reduces to beta F + grad(ln beta)
    l.strat += (bm.beta * bm.F + bm.grad_beta / bm.beta).dot(c.q - a.q);
    return;
  }
  const Vec bh = split == Involution::uniform_B ? b_hat_plus_definition(bm, split) : b_hat_plus(bm);
  const Vec weight = 2.0 * sigma_tilde_inverse(bm).transpose() * bh;
  l.strat += weight.dot(c.q - a.q);
  l.drift += (weight.dot(b_minus(bm)) + div_b_minus(bm)) * h;
}

// ================================================================ observers

namespace detail {

inline bool in_window(double a, double c, double s, double t) {
  const double eps = 1e-9 * std::max(1.0, std::abs(t));
  return a >= s - eps && c <= t + eps;
}

inline bool at_time(double x, double target) { return std::abs(x - target) <= 1e-9 * std::max(1.0, std::abs(target)); }

}  // namespace detail

// Rank-k observable B(t, q) contracted k times with z.
using TensorField = std::function<MultilinearTensor(double, const Vec&)>;

struct UnderdampedObservables {
  bool entropy = true;        // "S_env"
  bool gibbs = false;         // "beta_z2_T": beta(T, q_T) |z_T|^2
  TensorField homogenize;     // "J": int_s^t B(z, ..., z) dr
};

class UnderdampedEntropyObserver final : public UnderdampedObserver {
 public:
  UnderdampedEntropyObserver(const SystemSpec& sys, double mass, double s, double t, UnderdampedObservables what)
      : sys_(&sys), m_(mass), s_(s), t_(t), what_(std::move(what)) {
    if (!(s >= 0.0 && t > s)) throw InvalidInput("window needs 0 <= s < t");
  }

  std::vector<std::string> names() const override {
    std::vector<std::string> out;
    if (what_.entropy) out.push_back("S_env");
    if (what_.gibbs) out.push_back("beta_z2_T");
    if (what_.homogenize) out.push_back("J");
    return out;
  }

  void start(long, const UnderdampedState& s, const DerivativeBundle& b) override {
    ledger_ = UnderdampedLedger{};
    j_ = 0.0;
    j_prev_t_ = std::numeric_limits<double>::quiet_NaN();
    last_ = s;
    last_b_ = b.beta;
    check_start(s, b);
  }

  void advance(const UnderdampedState& a, const DerivativeBundle& ba, const UnderdampedState& c,
               const DerivativeBundle& bc) override {
    if (detail::in_window(a.t, c.t, s_, t_)) {
      if (what_.entropy) accumulate_underdamped(ledger_, *sys_, m_, a, ba, c, bc);
      if (what_.homogenize) {
        // trapezoid, for the same reason as in accumulate_underdamped
        const double fa = j_prev_t_ == a.t ? j_prev_ : field_value(a);
        j_prev_ = field_value(c);
        j_prev_t_ = c.t;
        j_ += 0.5 * (fa + j_prev_) * (c.t - a.t);
      }
    }
    check_start(c, bc);
    last_ = c;
    last_b_ = bc.beta;
  }

  void finish(std::vector<double>& out) override {
    out.clear();
    if (what_.entropy) out.push_back(ledger_.total());
    if (what_.gibbs) out.push_back(last_b_ * last_.z.squaredNorm());
    if (what_.homogenize) out.push_back(j_);
  }

  std::unique_ptr<UnderdampedObserver> clone() const override {
    return std::make_unique<UnderdampedEntropyObserver>(*this);
  }

 private:
  double field_value(const UnderdampedState& s) const {
    return what_.homogenize(s.t, s.q).apply_diag(Eigen::VectorXd(s.z));
  }

  void check_start(const UnderdampedState& s, const DerivativeBundle& b) {
    if (!ledger_.started && detail::at_time(s.t, s_)) {
      ledger_.started = true;
      ledger_.start_energy = beta_energy(b, s.z);
      ledger_.end_energy = ledger_.start_energy;
    }
  }

  const SystemSpec* sys_;
  double m_, s_, t_;
  UnderdampedObservables what_;
  UnderdampedLedger ledger_;
  double j_ = 0.0;
  double j_prev_ = 0.0, j_prev_t_ = std::numeric_limits<double>::quiet_NaN();  // field value at the last state
  UnderdampedState last_;
  double last_b_ = 1.0;
};

struct OverdampedObservables {
  bool entropy = true;           // ledger, closed forms, limit and anomaly variants
  Involution split = Involution::standard;
  TensorField homogenize;        // "J_limit": int <B>_beta dr (even rank) or the odd-rank limit
  int homogenize_rank = 0;
  bool check_y = false;          // record max |raw - simplified| of Y1 and Y2 along paths
};

// Per-path overdamped quantities on the grid inside [s, t]:
//   S_env0          pathwise overdamped ledger
//   log_beta_ratio  ln(beta_t / beta_s)
//   E_S_env0_closed boundary + time integral of the closed-form expectation integrand
//   limit           small-mass limit of E[S_env^m] (general G form)
//   anomaly         general anomaly integral, plus the specialised variants that apply
//   ito_log_beta    Ito integrand for E[ln(beta_t / beta_s)]
class OverdampedEntropyObserver final : public OverdampedObserver {
 public:
  OverdampedEntropyObserver(const SystemSpec& sys, double s, double t, OverdampedObservables what)
      : sys_(&sys), s_(s), t_(t), what_(std::move(what)) {
    if (!(s >= 0.0 && t > s)) throw InvalidInput("window needs 0 <= s < t");
    psi0_ = sys.psi_zero();
    const DerivativeBundle b0 = evaluate_bundle(sys, 0.0, sys.initial_mean(), BundleDetail::kinetic);
    scalar_gamma_ = sys.gamma->constant() && is_scalar_matrix(b0.gamma);
    uniform_ = sys.uniform_B0.has_value() && scalar_gamma_;
    constant_g_ = sys.gamma_tilde_constant();
  }

  std::vector<std::string> names() const override {
    std::vector<std::string> out;
    if (what_.entropy) {
      out = {"S_env0", "log_beta_ratio", "S_env0_half_n_log", "E_S_env0_closed", "limit", "anomaly", "ito_log_beta"};
      if (psi0_) {
        out.push_back("limit_psi0");
        out.push_back("anomaly_psi0");
        out.push_back("anomaly_eigen");
        out.push_back("psi0_discrepancy");
      }
      if (scalar_gamma_ && psi0_) out.push_back("anomaly_scalar");
      if (uniform_) out.push_back("anomaly_uniform_b");
    }
    if (what_.homogenize) out.push_back("J_limit");
    if (what_.check_y) {
      out.push_back("y1_discrepancy");
      out.push_back("y2_discrepancy");
    }
    return out;
  }

  void start(long, const OverdampedState& s, const DerivativeBundle& b) override {
    ledger_ = OverdampedLedger{};
    acc_.assign(kSlots, 0.0);
    boundary_s_.reset();
    boundary_t_.reset();
    have_prev_ = false;
    max_psi0_ = 0.0;
    max_y1_ = max_y2_ = 0.0;
    visit(s, b);
  }

  void advance(const OverdampedState& a, const DerivativeBundle&, const OverdampedState& c, const DerivativeBundle& bc,
               const Vec&) override {
    if (what_.entropy && detail::in_window(a.t, c.t, s_, t_)) accumulate_overdamped(ledger_, *sys_, a, c, what_.split);
    visit(c, bc);
  }

  void finish(std::vector<double>& out) override {
    if (!boundary_s_ || !boundary_t_) throw InvalidInput("window endpoints are not on the time grid");
    const Boundary& bs = *boundary_s_;
    const Boundary& bt = *boundary_t_;
    out.clear();
    const double n = sys_->dimension;
    if (what_.entropy) {
      const double log_ratio = std::log(bt.beta / bs.beta);
      const double bv = bs.beta_v - bt.beta_v;
      out.push_back(ledger_.total());
      out.push_back(log_ratio);
      out.push_back(ledger_.total() + 0.5 * n * log_ratio);
      out.push_back(bv + log_ratio + acc_[kClosed]);
      out.push_back(bv + 0.5 * (n + 2.0) * log_ratio + acc_[kClosed] + acc_[kAnomaly]);
      out.push_back(acc_[kAnomaly]);
      out.push_back(acc_[kItoLog]);
      if (psi0_) {
        out.push_back(bv + 0.5 * (n + 2.0) * log_ratio + acc_[kClosedPsi0] + acc_[kAnomalyPsi0]);
        out.push_back(acc_[kAnomalyPsi0]);
        out.push_back(acc_[kAnomalyEigen]);
        out.push_back(max_psi0_);
      }
      if (scalar_gamma_ && psi0_) out.push_back(acc_[kAnomalyScalar]);
      if (uniform_) out.push_back(acc_[kAnomalyUniform]);
    }
    if (what_.homogenize) out.push_back(acc_[kJ]);
    if (what_.check_y) {
      out.push_back(max_y1_);
      out.push_back(max_y2_);
    }
  }

  std::unique_ptr<OverdampedObserver> clone() const override {
    return std::make_unique<OverdampedEntropyObserver>(*this);
  }

 private:
  enum Slot {
    kClosed, kAnomaly, kItoLog, kClosedPsi0, kAnomalyPsi0, kAnomalyEigen, kAnomalyScalar,
    kAnomalyUniform, kJ, kSlots
  };
  struct Boundary {
    double beta;
    double beta_v;
  };

  void integrand(const DerivativeBundle& b, std::vector<double>& f) {
    f.assign(kSlots, 0.0);
    if (what_.entropy) {
      const double base = dr_beta_V(b) - b.dt_beta / b.beta;
      f[kClosed] = base + force_term(b) + divergence_term(b);
      const GContractionSet& gc = contractions(b);
      f[kAnomaly] = anomaly_general(b, gc);
      f[kItoLog] = ito_log_beta_integrand(b);
      if (psi0_) {
        f[kClosedPsi0] = base + force_term_psi0(b) + divergence_term_psi0(b);
        if (!sys_->gamma->constant() || !kernel_psi0_) {
          kernel_psi0_ = anomaly_kernel_psi0(Eigen::MatrixXd(b.gamma));
          kernel_eigen_ = anomaly_kernel_eigen(Eigen::MatrixXd(b.gamma));
        }
        f[kAnomalyPsi0] = anomaly_from_kernel(b, *kernel_psi0_);
        f[kAnomalyEigen] = anomaly_from_kernel(b, *kernel_eigen_);
        const double lim_g = f[kClosed] + f[kAnomaly];
        const double lim_p = f[kClosedPsi0] + f[kAnomalyPsi0];
        max_psi0_ = std::max(max_psi0_, std::abs(lim_g - lim_p) / std::max(1.0, std::abs(lim_g)));
        if (scalar_gamma_) f[kAnomalyScalar] = anomaly_scalar(b);
      }
      if (uniform_) {
        if (!constant_g_ || !kernel_uniform_) kernel_uniform_ = anomaly_kernel_uniform_b(b);
        f[kAnomalyUniform] = anomaly_from_kernel(b, *kernel_uniform_);
      }
    }
    if (what_.homogenize) f[kJ] = homogenized_integrand(b);
    if (what_.check_y) {
      const GDerivativeSet gd = g_derivative_set(b);
      const double s1 = std::max(1.0, y1_simplified(b).cwiseAbs().maxCoeff());
      max_y1_ = std::max(max_y1_, (y1_raw(b, gd.at) - y1_simplified(b)).cwiseAbs().maxCoeff() / s1);
      const double y2s = y2_simplified(b, gd.at);
      max_y2_ = std::max(max_y2_, std::abs(y2_raw(b, gd) - y2s) / std::max(1.0, std::abs(y2s)));
    }
  }

  double homogenized_integrand(const DerivativeBundle& b) const;

  const GContractionSet& contractions(const DerivativeBundle& b) {
    if (constant_g_ && g_cache_) return *g_cache_;
    const TripleExpIntegral g(Eigen::MatrixXd(b.gamma_tilde));
    g_cache_ = g_contraction_set(g.matrix(), b.gamma);
    return *g_cache_;
  }

  void visit(const OverdampedState& s, const DerivativeBundle& b) {
    const bool inside = s.t >= s_ - 1e-9 * std::max(1.0, s_) && s.t <= t_ + 1e-9 * std::max(1.0, t_);
    if (detail::at_time(s.t, s_)) boundary_s_ = Boundary{b.beta, b.beta * b.V};
    if (detail::at_time(s.t, t_)) boundary_t_ = Boundary{b.beta, b.beta * b.V};
    if (!inside) {
      have_prev_ = false;
      return;
    }
    integrand(b, cur_);
    if (have_prev_) {
      const double h = s.t - prev_t_;
      for (int k = 0; k < kSlots; ++k) acc_[k] += 0.5 * (prev_[k] + cur_[k]) * h;
    }
    prev_.swap(cur_);
    prev_t_ = s.t;
    have_prev_ = true;
  }

  const SystemSpec* sys_;
  double s_, t_;
  OverdampedObservables what_;
  bool psi0_ = false, scalar_gamma_ = false, uniform_ = false, constant_g_ = false;
  OverdampedLedger ledger_;
  std::vector<double> acc_, prev_, cur_;
  double prev_t_ = 0.0;
  bool have_prev_ = false;
  std::optional<Boundary> boundary_s_, boundary_t_;
  std::optional<GContractionSet> g_cache_;
  std::optional<Mat> kernel_psi0_, kernel_eigen_, kernel_uniform_;
  double max_psi0_ = 0.0, max_y1_ = 0.0, max_y2_ = 0.0;
};

// ================================================================ homogenization

// Gaussian mean over z of (grad_q chi . z) by central differences of the cell solution in q.
inline double q_gradient_z_average(const SystemSpec& sys, const TensorField& field, double t, const Vec& q) {
  const int n = sys.dimension;
  double acc = 0.0;
  const DerivativeBundle b0 = evaluate_bundle(sys, t, q, BundleDetail::kinetic);
  for (int l = 0; l < n; ++l) {
    const double h = 1e-5 * std::max(1.0, std::abs(q(l)));
    Vec qp = q, qm = q;
    qp(l) += h;
    qm(l) -= h;
    const DerivativeBundle bp = evaluate_bundle(sys, t, qp, BundleDetail::kinetic);
    const DerivativeBundle bm = evaluate_bundle(sys, t, qm, BundleDetail::kinetic);
    const CellSolution cp = solve_cell(bp.beta, Eigen::MatrixXd(bp.gamma_tilde), field(t, qp));
    const CellSolution cm = solve_cell(bm.beta, Eigen::MatrixXd(bm.gamma_tilde), field(t, qm));
    // each term D of d_l chi contributes <D(z..z) z_l>: append a slot fixed to z_l
    for (std::size_t k = 0; k < cp.terms.size(); ++k) {
      const MultilinearTensor d = (1.0 / (2.0 * h)) * (cp.terms[k] - cm.terms[k]);
      MultilinearTensor ext(n, d.rank() + 1);
      std::vector<int> idx(d.rank() + 1);
      for (std::size_t f = 0; f < ext.size(); ++f) {
        ext.unflatten(f, idx);
        if (idx.back() != l) continue;
        std::size_t g = 0;
        for (int a = 0; a < d.rank(); ++a) g = g * n + idx[a];
        ext[f] = d[g];
      }
      acc += gaussian_average(b0.beta, ext);
    }
  }
  return acc;
}

// Limit integrand of the homogenized observable: the local Gibbs mean for even rank, and
// -F . <grad_z chi> - <grad_q chi . z> for odd rank (the limit of m^{-1/2} E[J^m]).
inline double homogenized_limit_integrand(const SystemSpec& sys, const TensorField& field, int rank,
                                          const DerivativeBundle& b) {
  if (rank % 2 == 0) return gaussian_average(b.beta, field(b.t, b.q));
  const CellSolution chi = solve_cell(b.beta, Eigen::MatrixXd(b.gamma_tilde), field(b.t, b.q));
  const Eigen::VectorXd gz = chi.gradient_average();
  return -Eigen::VectorXd(b.F).dot(gz) - q_gradient_z_average(sys, field, b.t, b.q);
}

inline double OverdampedEntropyObserver::homogenized_integrand(const DerivativeBundle& b) const {
  return homogenized_limit_integrand(*sys_, what_.homogenize, what_.homogenize_rank, b);
}

// Y2 through the cell problem: -<grad_q chi . z> for the entropy source.
inline double y2_cell(const SystemSpec& sys, double t, const Vec& q) {
  TensorField b3 = [&sys](double tt, const Vec& qq) {
    const DerivativeBundle b = evaluate_bundle(sys, tt, qq, BundleDetail::kinetic);
    MultilinearTensor m(sys.dimension, 3);
    for (int i = 0; i < sys.dimension; ++i)
      for (int k = 0; k < sys.dimension; ++k) m.at({i, i, k}) = 0.5 * b.grad_beta(k);
    return m;
  };
  TensorField b1 = [&sys](double tt, const Vec& qq) {
    const DerivativeBundle b = evaluate_bundle(sys, tt, qq, BundleDetail::kinetic);
    return MultilinearTensor::from_vector(Eigen::VectorXd(work_vector(b)));
  };
  return -(q_gradient_z_average(sys, b3, t, q) + q_gradient_z_average(sys, b1, t, q));
}

// ================================================================ limit formula on stored paths

struct Estimate {
  double value = 0.0;
  double stderr = 0.0;
};

// Small-mass limit of E[S_env^m] over [s, t] from stored overdamped paths, with
// trapezoidal time integration on the stored grid.
inline Estimate limit_formula(const SystemSpec& sys, const OverdampedPathSet& paths, double s, double t) {
  if (paths.paths.empty()) throw InvalidInput("no paths supplied");
  bool has_s = false, has_t = false;
  for (double x : paths.times) {
    has_s = has_s || detail::at_time(x, s);
    has_t = has_t || detail::at_time(x, t);
  }
  if (!has_s || !has_t) throw InvalidInput("window endpoints are not on the stored grid");
  OverdampedObservables what;
  OverdampedEntropyObserver obs(sys, s, t, what);
  const auto names = obs.names();
  PathEnsembleStats stats(names);
  std::vector<double> out;
  for (const auto& path : paths.paths) {
    if (path.size() != paths.times.size()) throw InvalidInput("stored path length does not match its grid");
    OverdampedState st{paths.times[0], path[0]};
    obs.start(0, st, evaluate_bundle(sys, st.t, st.q, BundleDetail::full));
    for (std::size_t k = 1; k < path.size(); ++k) {
      OverdampedState c{paths.times[k], path[k]};
      obs.advance(st, DerivativeBundle{}, c, evaluate_bundle(sys, c.t, c.q, BundleDetail::full), Vec());
      st = c;
    }
    obs.finish(out);
    stats.add(out);
  }
  return {stats.mean("limit"), stats.stderr_of("limit")};
}

}  // namespace kramers
