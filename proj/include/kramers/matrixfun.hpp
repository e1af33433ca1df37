#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "kramers/errors.hpp"
#include "kramers/tensor.hpp"

namespace kramers {

using SquareMatrix = Eigen::MatrixXd;

inline constexpr double kSpectralTol = 1e-10;

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& a) {
  return a.allFinite();
}

inline void require_square_finite(const Eigen::Ref<const Eigen::MatrixXd>& a, const char* what) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw InvalidInput(std::string(what) + " must be a non-empty square matrix");
  if (!a.allFinite()) throw InvalidInput(std::string(what) + " has non-finite entries");
}

inline SquareMatrix symmetric_part(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  return 0.5 * (a + a.transpose());
}

inline SquareMatrix antisymmetric_part(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  return 0.5 * (a - a.transpose());
}

inline bool is_symmetric(const Eigen::Ref<const Eigen::MatrixXd>& a, double tol = 1e-10) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

struct SpectrumBounds {
  double min = 0.0;
  double max = 0.0;
};

// Extreme eigenvalues of (A + A^T)/2.
inline SpectrumBounds symmetric_part_spectrum(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  require_square_finite(a, "matrix");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetric_part(a), Eigen::EigenvaluesOnly);
  return {es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff()};
}

inline bool symmetric_part_spectrum_in(const Eigen::Ref<const Eigen::MatrixXd>& a, double lo,
                                       double hi) {
  const SpectrumBounds b = symmetric_part_spectrum(a);
  return b.min >= lo && b.max <= hi;
}

inline void require_coercive(const Eigen::Ref<const Eigen::MatrixXd>& a, const char* what) {
  require_square_finite(a, what);
  const SpectrumBounds b = symmetric_part_spectrum(a);
  if (!(b.min > kSpectralTol))
    throw SpectralError(std::string(what) + ": symmetric part is not positive definite (min eigenvalue " +
                        std::to_string(b.min) + ")");
}

// exp(tA) by Pade scaling and squaring.
inline SquareMatrix mat_exp(const Eigen::Ref<const Eigen::MatrixXd>& a, double t = 1.0) {
  require_square_finite(a, "mat_exp argument");
  if (!std::isfinite(t)) throw InvalidInput("mat_exp time must be finite");
  SquareMatrix scaled = t * a;
  SquareMatrix out = scaled.exp();
  return out;
}

// A (+) A (+) ... (+) A with `copies` terms, acting on the lexicographic tensor basis.
inline SquareMatrix kronecker_sum(const Eigen::Ref<const Eigen::MatrixXd>& a, int copies) {
  require_square_finite(a, "kronecker_sum argument");
  if (copies < 1) throw InvalidInput("kronecker_sum needs at least one copy");
  const Eigen::Index n = a.rows();
  SquareMatrix k = a;
  for (int c = 1; c < copies; ++c) {
    const SquareMatrix id_big = SquareMatrix::Identity(k.rows(), k.cols());
    const SquareMatrix id_n = SquareMatrix::Identity(n, n);
    SquareMatrix next = Eigen::kroneckerProduct(k, id_n).eval();
    next += Eigen::kroneckerProduct(id_big, a).eval();
    k = std::move(next);
  }
  return k;
}

inline constexpr int kMaxTripleDim = 8;

inline MultilinearTensor rank6_from_matrix(const SquareMatrix& m, int n) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  const Eigen::Index n3 = m.rows();
  for (Eigen::Index r = 0; r < n3; ++r)
    for (Eigen::Index c = 0; c < n3; ++c) data[r * n3 + c] = m(r, c);
  return MultilinearTensor(n, 6, std::move(data));
}

// G with G[i1,i2,i3,j1,j2,j3] = int_0^inf E_{i1 j1} E_{i2 j2} E_{i3 j3} dy, E = exp(-y gt).
// Rows (i1 i2 i3) and columns (j1 j2 j3) of the inverse of gt (+) gt (+) gt.
class TripleExpIntegral {
 public:
  explicit TripleExpIntegral(const Eigen::Ref<const Eigen::MatrixXd>& gt) {
    require_square_finite(gt, "gamma_tilde");
    n_ = static_cast<int>(gt.rows());
    if (n_ > kMaxTripleDim) throw InvalidInput("triple exponential integral supports n <= 8");
    require_coercive(gt, "gamma_tilde");
    const SquareMatrix k = kronecker_sum(gt, 3);
    lu_ = Eigen::PartialPivLU<SquareMatrix>(k);
    g_ = lu_.inverse();
  }

  int dim() const { return n_; }
  const SquareMatrix& matrix() const { return g_; }
  MultilinearTensor tensor() const { return rank6_from_matrix(g_, n_); }

  double operator()(int i1, int i2, int i3, int j1, int j2, int j3) const {
    return g_((i1 * n_ + i2) * n_ + i3, (j1 * n_ + j2) * n_ + j3);
  }

  // Derivative of G along the direction d_gt of gamma_tilde.
  SquareMatrix derivative_matrix(const Eigen::Ref<const Eigen::MatrixXd>& d_gt) const {
    if (d_gt.rows() != n_ || d_gt.cols() != n_) throw InvalidInput("derivative direction has wrong shape");
    return -(g_ * kronecker_sum(d_gt, 3) * g_);
  }

 private:
  int n_ = 0;
  Eigen::PartialPivLU<SquareMatrix> lu_;
  SquareMatrix g_;
};

inline MultilinearTensor triple_exp_integral(const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde) {
  return TripleExpIntegral(gamma_tilde).tensor();
}

inline MultilinearTensor triple_exp_integral_derivative(const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde,
                                                        const Eigen::Ref<const Eigen::MatrixXd>& d_gamma_tilde) {
  TripleExpIntegral g(gamma_tilde);
  return rank6_from_matrix(g.derivative_matrix(d_gamma_tilde), g.dim());
}

namespace detail {

inline void require_stable(const Eigen::Ref<const Eigen::MatrixXd>& c) {
  require_square_finite(c, "C");
  const SpectrumBounds b = symmetric_part_spectrum(c);
  if (!(b.max < -kSpectralTol))
    throw SpectralError("C must have negative definite symmetric part (max eigenvalue " +
                        std::to_string(b.max) + ")");
}

inline void require_lyapunov_shapes(const Eigen::Ref<const Eigen::MatrixXd>& c, const MultilinearTensor& b) {
  if (b.dim() != c.rows()) throw InvalidInput("tensor dimension does not match C");
  if (!b.all_finite()) throw InvalidInput("tensor has non-finite entries");
}

}  // namespace detail

// A(v_1..v_k) = int_0^inf B(e^{tC} v_1, ..., e^{tC} v_k) dt, the unique solution of
// sum_i A(.., C v_i, ..) = -B. Uses a complex Schur form of C, which makes the
// k-fold Kronecker sum triangular, followed by back substitution.
inline MultilinearTensor lyapunov_multilinear(const Eigen::Ref<const Eigen::MatrixXd>& c,
                                              const MultilinearTensor& b) {
  detail::require_stable(c);
  detail::require_lyapunov_shapes(c, b);
  const int n = b.dim();
  const int k = b.rank();
  if (k == 0) return MultilinearTensor(n, 0);

  using Cplx = std::complex<double>;
  Eigen::ComplexSchur<Eigen::MatrixXd> schur(c);
  const Eigen::MatrixXcd& u = schur.matrixU();
  const Eigen::MatrixXcd& tri = schur.matrixT();

  std::vector<Cplx> rhs(b.data().begin(), b.data().end());
  for (int a = 0; a < k; ++a) rhs = detail::mode_product(rhs, n, k, a, u);

  std::vector<std::size_t> stride(k);
  for (int a = 0; a < k; ++a) stride[a] = detail::ipow(n, k - 1 - a);

  std::vector<Cplx> sol(rhs.size());
  std::vector<int> idx(k);
  for (std::size_t f = 0; f < rhs.size(); ++f) {
    std::size_t rem = f;
    for (int a = k - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(rem % n);
      rem /= n;
    }
    Cplx acc = -rhs[f];
    Cplx diag(0.0);
    for (int a = 0; a < k; ++a) {
      const int m = idx[a];
      diag += tri(m, m);
      for (int l = 0; l < m; ++l) acc -= tri(l, m) * sol[f - (m - l) * stride[a]];
    }
    sol[f] = acc / diag;
  }

  const Eigen::MatrixXcd uh = u.adjoint();
  for (int a = 0; a < k; ++a) sol = detail::mode_product(sol, n, k, a, uh);

  MultilinearTensor out(n, k);
  for (std::size_t f = 0; f < sol.size(); ++f) out[f] = sol[f].real();
  return out;
}

// Same solution through a dense LU of the k-fold Kronecker sum of C^T.
inline MultilinearTensor lyapunov_multilinear_dense(const Eigen::Ref<const Eigen::MatrixXd>& c,
                                                    const MultilinearTensor& b) {
  detail::require_stable(c);
  detail::require_lyapunov_shapes(c, b);
  const int n = b.dim();
  const int k = b.rank();
  if (k == 0) return MultilinearTensor(n, 0);
  if (detail::ipow(n, k) > 4096) throw InvalidInput("dense Lyapunov route limited to n^k <= 4096");
  const SquareMatrix op = kronecker_sum(c.transpose(), k);
  const Eigen::Map<const Eigen::VectorXd> rhs(b.data().data(), static_cast<Eigen::Index>(b.size()));
  const Eigen::VectorXd x = op.partialPivLu().solve(-rhs);
  return MultilinearTensor(n, k, std::vector<double>(x.data(), x.data() + x.size()));
}

// M = int_0^inf Tr[gamma e^{-2y gamma}] e^{-y gamma} dy for symmetric positive definite gamma.
inline SquareMatrix trace_weighted_integral(const Eigen::Ref<const Eigen::MatrixXd>& gamma) {
  require_square_finite(gamma, "gamma");
  if (!is_symmetric(gamma)) throw InvalidInput("gamma must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetric_part(gamma));
  const Eigen::VectorXd lam = es.eigenvalues();
  if (!(lam.minCoeff() > kSpectralTol)) throw SpectralError("gamma must be positive definite");
  Eigen::VectorXd d(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    double s = 0.0;
    for (Eigen::Index l = 0; l < lam.size(); ++l) s += lam(l) / (2.0 * lam(l) + lam(i));
    d(i) = s;
  }
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

// (gamma_tilde + 2 gamma)^{-1}
inline SquareMatrix shifted_inverse(const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde,
                                    const Eigen::Ref<const Eigen::MatrixXd>& gamma) {
  require_square_finite(gamma_tilde, "gamma_tilde");
  require_square_finite(gamma, "gamma");
  if (gamma.rows() != gamma_tilde.rows()) throw InvalidInput("shifted_inverse shape mismatch");
  const SquareMatrix s = gamma_tilde + 2.0 * gamma;
  Eigen::FullPivLU<SquareMatrix> lu(s);
  if (!lu.isInvertible() || lu.rcond() < 1e-14) throw SpectralError("gamma_tilde + 2 gamma is singular");
  return lu.inverse();
}

inline SquareMatrix shifted_inverse(const Eigen::Ref<const Eigen::MatrixXd>& gamma_tilde, double gamma) {
  const SquareMatrix g = gamma * SquareMatrix::Identity(gamma_tilde.rows(), gamma_tilde.cols());
  return shifted_inverse(gamma_tilde, g);
}

// (3n+2)/6 gamma^{-1} - gamma^{-1} M, the psi = 0 anomaly kernel.
inline SquareMatrix anomaly_kernel_psi0(const Eigen::Ref<const Eigen::MatrixXd>& gamma) {
  const SquareMatrix m = trace_weighted_integral(gamma);
  const double n = static_cast<double>(gamma.rows());
  const SquareMatrix ginv = gamma.inverse();
  return (3.0 * n + 2.0) / 6.0 * ginv - ginv * m;
}

// gamma^{-1}/3 + (1/2) sum_i (gamma + 2 lambda_i)^{-1}, eigenvalue form of the same kernel.
inline SquareMatrix anomaly_kernel_eigen(const Eigen::Ref<const Eigen::MatrixXd>& gamma) {
  require_square_finite(gamma, "gamma");
  if (!is_symmetric(gamma)) throw InvalidInput("gamma must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetric_part(gamma));
  const Eigen::VectorXd lam = es.eigenvalues();
  if (!(lam.minCoeff() > kSpectralTol)) throw SpectralError("gamma must be positive definite");
  const Eigen::Index n = gamma.rows();
  SquareMatrix out = gamma.inverse() / 3.0;
  for (Eigen::Index i = 0; i < n; ++i)
    out += 0.5 * (gamma + 2.0 * lam(i) * SquareMatrix::Identity(n, n)).inverse();
  return out;
}

}  // namespace kramers
