#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kramers/errors.hpp"
#include "kramers/fields.hpp"
#include "kramers/matrixfun.hpp"

namespace kramers {

struct InitialCondition {
  enum class Kind { point, gaussian };
  Kind kind = Kind::point;
  Vec mean;     // empty means the origin
  Vec stddev;   // per-coordinate, gaussian only
};

// Coefficients of the Langevin model. Fields are shared and immutable; copies are cheap.
// Time reversal is expressed through an affine time map t -> time_scale * t + time_offset
// applied before evaluating the fields, and a sign applied to psi.
struct SystemSpec {
  int dimension = 1;
  double horizon = 1.0;
  std::shared_ptr<const ScalarField> beta;
  std::shared_ptr<const MatrixField> gamma;
  std::shared_ptr<const VectorField> psi;
  std::shared_ptr<const ScalarField> V;
  std::shared_ptr<const VectorField> F_ext;
  std::optional<double> uniform_B0;
  InitialCondition initial;
  double time_scale = 1.0;
  double time_offset = 0.0;
  double psi_sign = 1.0;

  bool psi_zero() const { return psi->identically_zero(); }
  bool gamma_tilde_constant() const { return gamma->constant() && psi->constant_curl(); }
  Vec initial_mean() const { return initial.mean.size() == 0 ? Vec(Vec::Zero(dimension)) : initial.mean; }
};

inline void check_system(const SystemSpec& s) {
  if (s.dimension < 1 || s.dimension > kMaxDim)
    throw InvalidInput("dimension must be between 1 and " + std::to_string(kMaxDim));
  if (!(s.horizon > 0.0) || !std::isfinite(s.horizon)) throw InvalidInput("horizon must be positive");
  if (!s.beta || !s.gamma || !s.psi || !s.V || !s.F_ext) throw InvalidInput("system has a missing field");
  if (s.initial.mean.size() != 0 && s.initial.mean.size() != s.dimension)
    throw InvalidInput("initial mean has the wrong length");
  if (s.initial.kind == InitialCondition::Kind::gaussian && s.initial.stddev.size() != s.dimension)
    throw InvalidInput("initial stddev has the wrong length");
}

enum class BundleDetail {
  kinetic,  // values, first derivatives of beta and V, gamma_tilde and its inverse
  full      // everything, including sigma and derivatives of gamma_tilde^{-1}
};

// Every coefficient and derivative at one (t, q). Matrix arrays are indexed by the
// spatial derivative direction first.
struct DerivativeBundle {
  int n = 0;
  double t = 0.0;
  Vec q;
  BundleDetail detail = BundleDetail::kinetic;

  double beta = 0.0, dt_beta = 0.0;
  Vec grad_beta, dt_grad_beta;
  Mat hess_beta;

  double V = 0.0, dt_V = 0.0;
  Vec grad_V;
  Mat hess_V;

  Mat gamma;
  MatArray d_gamma;

  Vec psi, dt_psi;
  Mat jac_psi;        // (i, k) = d_i psi_k
  MatArray d2_psi;    // [l](i, k) = d_l d_i psi_k
  Mat dt_jac_psi;     // (i, k) = d_t d_i psi_k

  Mat H;              // H_ik = d_i psi_k - d_k psi_i
  MatArray d_H;
  Mat gamma_tilde, gamma_tilde_inv;
  MatArray d_gamma_tilde_inv;

  Vec F_ext;
  Mat jac_F_ext;      // (i, j) = d_i F_ext_j
  Vec F;              // -d_t psi - grad V + F_ext
  Mat jac_F;          // (i, j) = d_i F_j

  Mat sigma, Sigma;   // Sigma = 2 gamma / beta = sigma sigma^T
  MatArray d_sigma;
};

struct SigmaFactor {
  Mat sigma;
  Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1> s;  // eigenvalues of sigma
  Mat u;                                                      // eigenvectors
};

// Symmetric positive square root of Sigma.
inline SigmaFactor derive_sigma(const Mat& Sigma) {
  if (!Sigma.allFinite()) throw InvalidInput("Sigma has non-finite entries");
  if (!is_symmetric(Sigma)) throw InvalidInput("Sigma must be symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (Sigma + Sigma.transpose()));
  const auto lam = es.eigenvalues();
  if (!(lam.minCoeff() > 0.0)) throw SpectralError("Sigma must be positive definite");
  SigmaFactor f;
  f.s = lam.cwiseSqrt();
  f.u = es.eigenvectors();
  f.sigma = f.u * f.s.asDiagonal() * f.u.transpose();
  return f;
}

// Derivative of the symmetric square root along dSigma.
inline Mat derive_sigma_derivative(const SigmaFactor& f, const Mat& dSigma) {
  Mat w = f.u.transpose() * dSigma * f.u;
  for (int a = 0; a < w.rows(); ++a)
    for (int b = 0; b < w.cols(); ++b) w(a, b) /= (f.s(a) + f.s(b));
  return f.u * w * f.u.transpose();
}

// Fills b in place; hot loops reuse one bundle to avoid copying it.
inline void evaluate_bundle_into(DerivativeBundle& b, const SystemSpec& sys, double t, const Vec& q,
                                 BundleDetail detail = BundleDetail::full) {
  const int n = sys.dimension;
  if (q.size() != n) throw InvalidInput("state has the wrong dimension");
  b.n = n;
  b.t = t;
  b.q = q;
  b.detail = detail;
  const double te = sys.time_scale * t + sys.time_offset;
  const double ts = sys.time_scale;
  const double ps = sys.psi_sign;

  ScalarEval se;
  sys.beta->eval(te, q, se);
  b.beta = se.value;
  b.dt_beta = ts * se.dt;
  b.grad_beta = se.grad;
  b.hess_beta = se.hess;
  b.dt_grad_beta = ts * se.dt_grad;

  sys.V->eval(te, q, se);
  b.V = se.value;
  b.dt_V = ts * se.dt;
  b.grad_V = se.grad;
  b.hess_V = se.hess;

  MatrixEval me;
  sys.gamma->eval(te, q, me);
  b.gamma = me.value;
  for (int i = 0; i < n; ++i) b.d_gamma[i] = me.dq[i];

  VectorEval ve;
  sys.psi->eval(te, q, ve);
  b.psi = ps * ve.value;
  b.dt_psi = ps * ts * ve.dt;
  b.jac_psi = ps * ve.jac;
  for (int i = 0; i < n; ++i) b.d2_psi[i] = ps * ve.d2[i];
  b.dt_jac_psi = ps * ts * ve.dt_jac;

  sys.F_ext->eval(te, q, ve);
  b.F_ext = ve.value;
  b.jac_F_ext = ve.jac;

  b.H = b.jac_psi - b.jac_psi.transpose();
  b.gamma_tilde = b.gamma - b.H;
  b.gamma_tilde_inv = small_inverse(b.gamma_tilde);
  b.F = -b.dt_psi - b.grad_V + b.F_ext;
  b.jac_F = -b.dt_jac_psi - b.hess_V + b.jac_F_ext;

  if (!(std::isfinite(b.beta) && b.beta > 0.0)) throw InvalidInput("beta must be positive and finite");
  if (!b.gamma_tilde_inv.allFinite()) throw SpectralError("gamma_tilde is singular");

  if (detail == BundleDetail::full) {
    for (int l = 0; l < n; ++l) {
      b.d_H[l] = b.d2_psi[l] - b.d2_psi[l].transpose();
      const Mat d_gt = b.d_gamma[l] - b.d_H[l];
      b.d_gamma_tilde_inv[l] = -b.gamma_tilde_inv * d_gt * b.gamma_tilde_inv;
    }
    b.Sigma = (2.0 / b.beta) * b.gamma;
    const double c = b.Sigma(0, 0);
    const bool scalar = c > 0.0 && (b.Sigma - c * Mat::Identity(n, n)).cwiseAbs().maxCoeff() == 0.0;
    // sqrt(c I) = sqrt(c) I, and its derivative along dSigma is dSigma / (2 sqrt(c))
    std::optional<SigmaFactor> f;
    if (scalar) {
      if (!std::isfinite(c)) throw InvalidInput("Sigma has non-finite entries");
      b.sigma = std::sqrt(c) * Mat::Identity(n, n);
    } else {
      f = derive_sigma(b.Sigma);
      b.sigma = f->sigma;
    }
    for (int l = 0; l < n; ++l) {
      const Mat dSigma = (-2.0 * b.grad_beta(l) / (b.beta * b.beta)) * b.gamma + (2.0 / b.beta) * b.d_gamma[l];
      b.d_sigma[l] = scalar ? Mat(dSigma / (2.0 * std::sqrt(c))) : derive_sigma_derivative(*f, dSigma);
    }
  }
}

inline DerivativeBundle evaluate_bundle(const SystemSpec& sys, double t, const Vec& q,
                                        BundleDetail detail = BundleDetail::full) {
  DerivativeBundle b;
  evaluate_bundle_into(b, sys, t, q, detail);
  return b;
}

inline void require_full(const DerivativeBundle& b) {
  if (b.detail != BundleDetail::full) throw InvalidInput("operation needs a full derivative bundle");
}

// S^i = beta^{-1} d_j (gamma_tilde^{-1})^{ij}
inline Vec noise_induced_drift_ito(const DerivativeBundle& b) {
  require_full(b);
  Vec s = Vec::Zero(b.n);
  for (int j = 0; j < b.n; ++j) s += b.d_gamma_tilde_inv[j].col(j);
  return s / b.beta;
}

// Stratonovich noise-induced drift.
inline Vec noise_induced_drift_strat(const DerivativeBundle& b) {
  require_full(b);
  const int n = b.n;
  const Mat& gi = b.gamma_tilde_inv;
  const Mat gs = gi * b.sigma;  // (gamma_tilde^{-1} sigma)^k_xi
  Vec s = Vec::Zero(n);
  // beta^{-1} d_j (gi)^{il} (gi)^{jk} H_lk
  const Mat gh = b.H * gi.transpose();  // (l, j) = H_lk gi^{jk}
  for (int j = 0; j < n; ++j) s += b.d_gamma_tilde_inv[j] * gh.col(j) / b.beta;
  // -1/2 (gi)^{il} d_k sigma_{l xi} (gi sigma)^k_xi
  Vec acc = Vec::Zero(n);
  for (int k = 0; k < n; ++k) acc += b.d_sigma[k] * gs.row(k).transpose();
  s -= 0.5 * gi * acc;
  return s;
}

// (1/2) sum_xi d_k (gi sigma)^i_xi (gi sigma)^k_xi, the Ito minus Stratonovich correction.
inline Vec ito_strat_correction(const DerivativeBundle& b) {
  require_full(b);
  const Mat gs = b.gamma_tilde_inv * b.sigma;
  Vec c = Vec::Zero(b.n);
  for (int k = 0; k < b.n; ++k) {
    const Mat d = b.d_gamma_tilde_inv[k] * b.sigma + b.gamma_tilde_inv * b.d_sigma[k];
    c += d * gs.row(k).transpose();
  }
  return 0.5 * c;
}

enum class Involution { standard, uniform_B };

// ------------------------------------------------------------ assumption checks

struct ProbeGrid {
  Vec lo;            // empty means [-2, 2]^n
  Vec hi;
  int points = 1000;
  int times = 10;
};

struct ValidationReport {
  bool passed = true;
  double beta_min = 0.0, beta_max = 0.0;
  double gamma_eig_min = 0.0, gamma_eig_max = 0.0;
  double gamma_tilde_sym_min = 0.0;
  double grad_V_max = 0.0;
  double dpsi_max = 0.0;
  std::vector<std::string> violations;
  std::size_t probes = 0;
};

namespace detail {

inline std::vector<Vec> probe_points(int n, const ProbeGrid& g) {
  Vec lo = g.lo.size() ? g.lo : Vec(Vec::Constant(n, -2.0));
  Vec hi = g.hi.size() ? g.hi : Vec(Vec::Constant(n, 2.0));
  int per = std::max(2, static_cast<int>(std::ceil(std::pow(static_cast<double>(g.points), 1.0 / n) - 1e-9)));
  std::vector<Vec> pts;
  std::vector<int> idx(n, 0);
  while (true) {
    Vec q(n);
    for (int i = 0; i < n; ++i) q(i) = lo(i) + (hi(i) - lo(i)) * idx[i] / (per - 1);
    pts.push_back(q);
    int d = 0;
    while (d < n && ++idx[d] == per) idx[d++] = 0;
    if (d == n) break;
  }
  return pts;
}

inline bool close(double a, double b, double tol = 1e-9) {
  return std::abs(a - b) <= tol * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

inline bool close(const Mat& a, const Mat& b, double tol = 1e-9) {
  const double scale = std::max(1.0, std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()));
  return (a - b).cwiseAbs().maxCoeff() <= tol * scale;
}

}  // namespace detail

// Samples the coefficients on a probe grid and reports bounds and violations of the
// standing assumptions; with uniform_B0 set, also the uniform-field symmetry conditions.
inline ValidationReport validate_assumptions(const SystemSpec& sys, const ProbeGrid& grid = {}) {
  check_system(sys);
  ValidationReport r;
  const int n = sys.dimension;
  const auto pts = detail::probe_points(n, grid);
  r.beta_min = INFINITY;
  r.beta_max = -INFINITY;
  r.gamma_eig_min = INFINITY;
  r.gamma_eig_max = -INFINITY;
  r.gamma_tilde_sym_min = INFINITY;
  auto violate = [&r](const std::string& msg) {
    r.passed = false;
    if (std::find(r.violations.begin(), r.violations.end(), msg) == r.violations.end()) r.violations.push_back(msg);
  };

  const bool uni = sys.uniform_B0.has_value();
  Mat gamma_ref;
  if (uni) {
    if (n != 3) violate("uniform field requires dimension 3");
  }
  for (int it = 0; it < std::max(1, grid.times); ++it) {
    const double t = grid.times > 1 ? sys.horizon * it / (grid.times - 1) : 0.0;
    for (const Vec& q : pts) {
      ++r.probes;
      ScalarEval be;
      sys.beta->eval(sys.time_scale * t + sys.time_offset, q, be);
      r.beta_min = std::min(r.beta_min, be.value);
      r.beta_max = std::max(r.beta_max, be.value);
      DerivativeBundle b;
      try {
        b = evaluate_bundle(sys, t, q, BundleDetail::kinetic);
      } catch (const Error& e) {
        violate(std::string("coefficient evaluation failed: ") + e.what());
        continue;
      }
      if (!is_symmetric(b.gamma)) violate("gamma is not symmetric");
      Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (b.gamma + b.gamma.transpose()), Eigen::EigenvaluesOnly);
      r.gamma_eig_min = std::min(r.gamma_eig_min, es.eigenvalues().minCoeff());
      r.gamma_eig_max = std::max(r.gamma_eig_max, es.eigenvalues().maxCoeff());
      Eigen::SelfAdjointEigenSolver<Mat> gs(0.5 * (b.gamma_tilde + b.gamma_tilde.transpose()), Eigen::EigenvaluesOnly);
      r.gamma_tilde_sym_min = std::min(r.gamma_tilde_sym_min, gs.eigenvalues().minCoeff());
      r.grad_V_max = std::max(r.grad_V_max, b.grad_V.cwiseAbs().maxCoeff());
      r.dpsi_max = std::max(r.dpsi_max, b.jac_psi.cwiseAbs().maxCoeff());

      if (uni && n == 3) {
        const double b0 = *sys.uniform_B0;
        Vec want(3);
        want << -0.5 * b0 * q(1), 0.5 * b0 * q(0), 0.0;
        if (!detail::close(Mat(b.psi), Mat(sys.psi_sign * want))) violate("psi differs from the uniform-field potential");
        if (gamma_ref.size() == 0) gamma_ref = b.gamma;
        if (!detail::close(b.gamma, gamma_ref)) violate("gamma is not constant");
        if (!detail::close(b.gamma, Mat(b.gamma(0, 0) * Mat::Identity(3, 3)))) violate("gamma is not a multiple of the identity");
        Vec qf = q;
        qf(0) = -q(0);
        const DerivativeBundle f = evaluate_bundle(sys, t, qf, BundleDetail::kinetic);
        if (!detail::close(f.V, b.V)) violate("V is not even in q^1");
        if (!detail::close(f.beta, b.beta)) violate("sigma is not even in q^1 (beta must be even in q^1)");
        Vec fe(3);
        fe << -b.F_ext(0), b.F_ext(1), b.F_ext(2);
        if (!detail::close(Mat(f.F_ext), Mat(fe))) violate("F_ext does not have the required parity in q^1");
      }
    }
  }
  if (!(r.beta_min > 0.0)) violate("beta is not positive");
  if (!(r.gamma_eig_min > 0.0)) violate("gamma is not positive definite");
  if (!(r.gamma_tilde_sym_min > 0.0)) violate("symmetric part of gamma_tilde is not positive definite");
  return r;
}

// The time-reversed system: coefficients evaluated at T - t, with psi negated for the
// standard involution (q, p) -> (q, -p) and unchanged for the uniform-field involution.
inline SystemSpec reverse_system(const SystemSpec& sys, double T, Involution inv) {
  check_system(sys);
  if (!(T > 0.0) || !std::isfinite(T)) throw InvalidInput("reversal horizon must be positive");
  if (inv == Involution::uniform_B) {
    if (!sys.uniform_B0) throw InvalidInput("uniform-field involution needs uniform_B0");
    const ValidationReport rep = validate_assumptions(sys);
    if (!rep.passed)
      throw InvalidInput("uniform-field involution needs the symmetry conditions: " + rep.violations.front());
  }
  SystemSpec out = sys;
  out.time_offset = sys.time_scale * T + sys.time_offset;
  out.time_scale = -sys.time_scale;
  if (inv == Involution::standard) out.psi_sign = -sys.psi_sign;
  return out;
}

// Largest eigenvalue of gamma seen on the probe grid; sets the underdamped step size.
inline double gamma_lambda_max(const SystemSpec& sys) {
  if (sys.gamma->constant()) {
    const DerivativeBundle b = evaluate_bundle(sys, 0.0, sys.initial_mean(), BundleDetail::kinetic);
    return symmetric_part_spectrum(Eigen::MatrixXd(b.gamma)).max;
  }
  ProbeGrid g;
  g.points = 200;
  g.times = 3;
  return validate_assumptions(sys, g).gamma_eig_max;
}

}  // namespace kramers
