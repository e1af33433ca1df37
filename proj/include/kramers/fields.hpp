#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <memory>
#include <string>

#include "kramers/errors.hpp"

namespace kramers {

inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using MatArray = std::array<Mat, kMaxDim>;

// Inverse through the fixed-size closed forms; Mat::inverse() goes through LU.
inline Mat small_inverse(const Mat& a) {
  switch (a.rows()) {
    case 1: return Mat::Constant(1, 1, 1.0 / a(0, 0));
    case 2: return Eigen::Matrix2d(a).inverse();
    case 3: return Eigen::Matrix3d(a).inverse();
    case 4: return Eigen::Matrix4d(a).inverse();
    default: return a.inverse();
  }
}

// Scalar field f(t, q) with the derivatives the entropy formulas need.
struct ScalarEval {
  double value = 0.0;
  double dt = 0.0;
  Vec grad;
  Mat hess;
  Vec dt_grad;
};

// Matrix field with spatial derivatives; dq[i] holds the derivative along q^i.
struct MatrixEval {
  Mat value;
  MatArray dq;
};

// Vector field v_k(t, q). jac(i, k) = d_i v_k, d2[l](i, k) = d_l d_i v_k, dt_jac(i, k) = d_t d_i v_k.
struct VectorEval {
  Vec value;
  Vec dt;
  Mat jac;
  MatArray d2;
  Mat dt_jac;
};

class ScalarField {
 public:
  virtual ~ScalarField() = default;
  virtual void eval(double t, const Vec& q, ScalarEval& out) const = 0;
  virtual bool time_independent() const = 0;
  virtual bool q_independent() const { return false; }
  virtual std::string family() const = 0;
};

class MatrixField {
 public:
  virtual ~MatrixField() = default;
  virtual void eval(double t, const Vec& q, MatrixEval& out) const = 0;
  virtual bool constant() const { return false; }
  virtual std::string family() const = 0;
};

class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual void eval(double t, const Vec& q, VectorEval& out) const = 0;
  virtual bool identically_zero() const { return false; }
  // True when the antisymmetrized Jacobian does not depend on (t, q).
  virtual bool constant_curl() const { return false; }
  virtual bool time_independent() const = 0;
  virtual std::string family() const = 0;
};

namespace detail {

// tau(t) = 1 + eps sin(omega t)
struct TimeModulation {
  double eps = 0.0;
  double omega = 0.0;
  double value(double t) const { return 1.0 + eps * std::sin(omega * t); }
  double deriv(double t) const { return eps * omega * std::cos(omega * t); }
  bool active() const { return eps != 0.0 && omega != 0.0; }
};

inline void resize_scalar(int n, ScalarEval& out) {
  out.value = 0.0;
  out.dt = 0.0;
  out.grad.setZero(n);
  out.hess.setZero(n, n);
  out.dt_grad.setZero(n);
}

inline void resize_matrix(int n, MatrixEval& out) {
  out.value.setZero(n, n);
  for (int i = 0; i < n; ++i) out.dq[i].setZero(n, n);
}

inline void resize_vector(int n, VectorEval& out) {
  out.value.setZero(n);
  out.dt.setZero(n);
  out.jac.setZero(n, n);
  for (int i = 0; i < n; ++i) out.d2[i].setZero(n, n);
  out.dt_jac.setZero(n, n);
}

inline void require_length(const Vec& v, int n, const char* what) {
  if (v.size() != n) throw InvalidInput(std::string(what) + " has the wrong length");
}

}  // namespace detail

// ---------------------------------------------------------------- scalar families

class ConstantScalar final : public ScalarField {
 public:
  explicit ConstantScalar(double value) : value_(value) {}
  void eval(double, const Vec& q, ScalarEval& out) const override {
    detail::resize_scalar(static_cast<int>(q.size()), out);
    out.value = value_;
    out.dt = 0.0;
  }
  bool time_independent() const override { return true; }
  bool q_independent() const override { return true; }
  std::string family() const override { return "constant"; }

 private:
  double value_;
};

// c + w.q; unbounded, mainly for exercising the assumption checks.
class Affine final : public ScalarField {
 public:
  Affine(double offset, Vec weights) : c_(offset), w_(std::move(weights)) {}
  void eval(double, const Vec& q, ScalarEval& out) const override {
    detail::require_length(w_, static_cast<int>(q.size()), "affine weights");
    detail::resize_scalar(static_cast<int>(q.size()), out);
    out.value = c_ + w_.dot(q);
    out.grad = w_;
    out.dt = 0.0;
  }
  bool time_independent() const override { return true; }
  std::string family() const override { return "affine"; }

 private:
  double c_;
  Vec w_;
};

// c + a tau(t) tanh(w.q + b) exp(-|e o q|^2 / 2)
class TanhRamp final : public ScalarField {
 public:
  struct Params {
    double offset = 0.0;
    double amplitude = 1.0;
    Vec weights;
    double shift = 0.0;
    Vec envelope;  // zeros disable the Gaussian factor
    double time_eps = 0.0;
    double time_omega = 0.0;
  };

  explicit TanhRamp(Params p) : p_(std::move(p)), tau_{p_.time_eps, p_.time_omega} {
    if (p_.envelope.size() == 0) p_.envelope = Vec::Zero(p_.weights.size());
    if (p_.envelope.size() != p_.weights.size()) throw InvalidInput("tanh_ramp envelope length mismatch");
  }

  void eval(double t, const Vec& q, ScalarEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(p_.weights, n, "tanh_ramp weights");
    detail::resize_scalar(n, out);
    const double u = p_.weights.dot(q) + p_.shift;
    const double th = std::tanh(u);
    const double d1 = 1.0 - th * th;
    const double d2 = -2.0 * th * d1;
    const Vec e2 = p_.envelope.cwiseProduct(p_.envelope);
    const double g = std::exp(-0.5 * e2.dot(q.cwiseProduct(q)));
    const Vec gg = -g * e2.cwiseProduct(q);
    Mat gh = (e2.cwiseProduct(q)) * (e2.cwiseProduct(q)).transpose() * g;
    gh.diagonal() -= g * e2;
    const double pv = th * g;
    const Vec pg = d1 * g * p_.weights + th * gg;
    const Mat ph = d2 * g * p_.weights * p_.weights.transpose() +
                   d1 * (p_.weights * gg.transpose() + gg * p_.weights.transpose()) + th * gh;
    const double tau = tau_.value(t);
    const double dtau = tau_.deriv(t);
    out.value = p_.offset + p_.amplitude * tau * pv;
    out.dt = p_.amplitude * dtau * pv;
    out.grad = p_.amplitude * tau * pg;
    out.hess = p_.amplitude * tau * ph;
    out.dt_grad = p_.amplitude * dtau * pg;
  }
  bool time_independent() const override { return !tau_.active(); }
  std::string family() const override { return "tanh_ramp"; }

 private:
  Params p_;
  detail::TimeModulation tau_;
};

// c + a tau(t) sin(w.q + b)
class Sinusoid final : public ScalarField {
 public:
  struct Params {
    double offset = 0.0;
    double amplitude = 1.0;
    Vec weights;
    double shift = 0.0;
    double time_eps = 0.0;
    double time_omega = 0.0;
  };

  explicit Sinusoid(Params p) : p_(std::move(p)), tau_{p_.time_eps, p_.time_omega} {}

  void eval(double t, const Vec& q, ScalarEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(p_.weights, n, "sinusoid weights");
    detail::resize_scalar(n, out);
    const double u = p_.weights.dot(q) + p_.shift;
    const double s = std::sin(u);
    const double c = std::cos(u);
    const double tau = tau_.value(t);
    const double dtau = tau_.deriv(t);
    out.value = p_.offset + p_.amplitude * tau * s;
    out.dt = p_.amplitude * dtau * s;
    out.grad = p_.amplitude * tau * c * p_.weights;
    out.hess = -p_.amplitude * tau * s * p_.weights * p_.weights.transpose();
    out.dt_grad = p_.amplitude * dtau * c * p_.weights;
  }
  bool time_independent() const override { return !tau_.active(); }
  std::string family() const override { return "sinusoid"; }

 private:
  Params p_;
  detail::TimeModulation tau_;
};

// c + a tau(t) exp(-sum_k ((q_k - mu_k) / s_k)^2 / 2)
class GaussianBump final : public ScalarField {
 public:
  struct Params {
    double offset = 0.0;
    double amplitude = 1.0;
    Vec center;
    Vec widths;
    double time_eps = 0.0;
    double time_omega = 0.0;
  };

  explicit GaussianBump(Params p) : p_(std::move(p)), tau_{p_.time_eps, p_.time_omega} {
    if (p_.center.size() != p_.widths.size()) throw InvalidInput("gaussian_bump center/widths mismatch");
    if ((p_.widths.array() <= 0.0).any()) throw InvalidInput("gaussian_bump widths must be positive");
  }

  void eval(double t, const Vec& q, ScalarEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(p_.center, n, "gaussian_bump center");
    detail::resize_scalar(n, out);
    const Vec inv2 = p_.widths.cwiseProduct(p_.widths).cwiseInverse();
    const Vec d = q - p_.center;
    const double g = std::exp(-0.5 * d.cwiseProduct(d).dot(inv2));
    const Vec a = inv2.cwiseProduct(d);
    const Vec gg = -g * a;
    Mat gh = g * a * a.transpose();
    gh.diagonal() -= g * inv2;
    const double tau = tau_.value(t);
    const double dtau = tau_.deriv(t);
    out.value = p_.offset + p_.amplitude * tau * g;
    out.dt = p_.amplitude * dtau * g;
    out.grad = p_.amplitude * tau * gg;
    out.hess = p_.amplitude * tau * gh;
    out.dt_grad = p_.amplitude * dtau * gg;
  }
  bool time_independent() const override { return !tau_.active(); }
  std::string family() const override { return "gaussian_bump"; }

 private:
  Params p_;
  detail::TimeModulation tau_;
};

// sum_i k_i (q_i - c_i(t))^2 / 2 with c(t) = center + drive sin(omega t)
class Harmonic final : public ScalarField {
 public:
  struct Params {
    Vec stiffness;
    Vec center;
    Vec drive;
    double omega = 0.0;
  };

  explicit Harmonic(Params p) : p_(std::move(p)) {
    const auto n = p_.stiffness.size();
    if (p_.center.size() == 0) p_.center = Vec::Zero(n);
    if (p_.drive.size() == 0) p_.drive = Vec::Zero(n);
    if (p_.center.size() != n || p_.drive.size() != n) throw InvalidInput("harmonic parameter lengths differ");
  }

  void eval(double t, const Vec& q, ScalarEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(p_.stiffness, n, "harmonic stiffness");
    detail::resize_scalar(n, out);
    const Vec c = p_.center + p_.drive * std::sin(p_.omega * t);
    const Vec dc = p_.drive * (p_.omega * std::cos(p_.omega * t));
    const Vec d = q - c;
    out.value = 0.5 * p_.stiffness.dot(d.cwiseProduct(d));
    out.grad = p_.stiffness.cwiseProduct(d);
    out.hess = p_.stiffness.asDiagonal();
    out.dt = -out.grad.dot(dc);
    out.dt_grad = -p_.stiffness.cwiseProduct(dc);
  }
  bool time_independent() const override { return p_.drive.isZero(0.0) || p_.omega == 0.0; }
  std::string family() const override { return "harmonic"; }

 private:
  Params p_;
};

// a/4 sum q_i^4 + k/2 sum q_i^2
class Quartic final : public ScalarField {
 public:
  Quartic(double quartic, double quadratic) : a_(quartic), k_(quadratic) {}

  void eval(double, const Vec& q, ScalarEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::resize_scalar(n, out);
    const Vec q2 = q.cwiseProduct(q);
    out.value = 0.25 * a_ * q2.dot(q2) + 0.5 * k_ * q2.sum();
    out.grad = a_ * q2.cwiseProduct(q) + k_ * q;
    out.hess = (3.0 * a_ * q2 + Vec::Constant(n, k_)).asDiagonal();
  }
  bool time_independent() const override { return true; }
  std::string family() const override { return "quartic"; }

 private:
  double a_;
  double k_;
};

// ---------------------------------------------------------------- matrix families

class ConstantMatrix final : public MatrixField {
 public:
  explicit ConstantMatrix(Mat value) : value_(std::move(value)) {
    if (value_.rows() != value_.cols()) throw InvalidInput("constant matrix must be square");
  }
  void eval(double, const Vec& q, MatrixEval& out) const override {
    const int n = static_cast<int>(q.size());
    if (value_.rows() != n) throw InvalidInput("constant matrix has the wrong size");
    detail::resize_matrix(n, out);
    out.value = value_;
  }
  bool constant() const override { return true; }
  std::string family() const override { return "constant"; }

 private:
  Mat value_;
};

// s(t, q) I
class ScalarTimesIdentity final : public MatrixField {
 public:
  explicit ScalarTimesIdentity(std::shared_ptr<const ScalarField> s) : s_(std::move(s)) {}
  void eval(double t, const Vec& q, MatrixEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::resize_matrix(n, out);
    ScalarEval e;
    s_->eval(t, q, e);
    out.value = e.value * Mat::Identity(n, n);
    for (int i = 0; i < n; ++i) out.dq[i] = e.grad(i) * Mat::Identity(n, n);
  }
  bool constant() const override { return s_->q_independent() && s_->time_independent(); }
  std::string family() const override { return "scalar_field"; }

 private:
  std::shared_ptr<const ScalarField> s_;
};

// R(theta) D R(theta)^T with a rotation in the (i, j) plane and theta = theta0 + kappa tanh(w.q + b).
class RotationInterp final : public MatrixField {
 public:
  struct Params {
    Vec diag;
    int plane_i = 0;
    int plane_j = 1;
    double theta0 = 0.0;
    double kappa = 0.0;
    Vec weights;
    double shift = 0.0;
  };

  explicit RotationInterp(Params p) : p_(std::move(p)) {
    const auto n = p_.diag.size();
    if (p_.weights.size() != n) throw InvalidInput("rotation_interp weights length mismatch");
    if (p_.plane_i < 0 || p_.plane_j < 0 || p_.plane_i >= n || p_.plane_j >= n || p_.plane_i == p_.plane_j)
      throw InvalidInput("rotation_interp plane indices invalid");
  }

  void eval(double, const Vec& q, MatrixEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(p_.diag, n, "rotation_interp diag");
    detail::resize_matrix(n, out);
    const double th_arg = std::tanh(p_.weights.dot(q) + p_.shift);
    const double theta = p_.theta0 + p_.kappa * th_arg;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    Mat r = Mat::Identity(n, n);
    Mat dr = Mat::Zero(n, n);
    const int i = p_.plane_i;
    const int j = p_.plane_j;
    r(i, i) = c;
    r(i, j) = -s;
    r(j, i) = s;
    r(j, j) = c;
    dr(i, i) = -s;
    dr(i, j) = -c;
    dr(j, i) = c;
    dr(j, j) = -s;
    const Mat d = p_.diag.asDiagonal();
    out.value = r * d * r.transpose();
    const Mat dtheta_mat = dr * d * r.transpose() + r * d * dr.transpose();
    const double dth = p_.kappa * (1.0 - th_arg * th_arg);
    for (int l = 0; l < n; ++l) out.dq[l] = dth * p_.weights(l) * dtheta_mat;
  }
  bool constant() const override { return p_.kappa == 0.0 || p_.weights.isZero(0.0); }
  std::string family() const override { return "rotation_interp"; }

 private:
  Params p_;
};

// ---------------------------------------------------------------- vector families

class ZeroVector final : public VectorField {
 public:
  void eval(double, const Vec& q, VectorEval& out) const override {
    detail::resize_vector(static_cast<int>(q.size()), out);
  }
  bool identically_zero() const override { return true; }
  bool constant_curl() const override { return true; }
  bool time_independent() const override { return true; }
  std::string family() const override { return "zero"; }
};

class ConstantVector final : public VectorField {
 public:
  explicit ConstantVector(Vec value) : value_(std::move(value)) {}
  void eval(double, const Vec& q, VectorEval& out) const override {
    const int n = static_cast<int>(q.size());
    detail::require_length(value_, n, "constant vector");
    detail::resize_vector(n, out);
    out.value = value_;
  }
  bool identically_zero() const override { return value_.isZero(0.0); }
  bool constant_curl() const override { return true; }
  bool time_independent() const override { return true; }
  std::string family() const override { return "constant"; }

 private:
  Vec value_;
};

// tau(t) (M q + c)
class LinearVector final : public VectorField {
 public:
  struct Params {
    Mat matrix;
    Vec offset;
    double time_eps = 0.0;
    double time_omega = 0.0;
  };

  explicit LinearVector(Params p) : p_(std::move(p)), tau_{p_.time_eps, p_.time_omega} {
    if (p_.offset.size() == 0) p_.offset = Vec::Zero(p_.matrix.rows());
    if (p_.matrix.rows() != p_.matrix.cols() || p_.offset.size() != p_.matrix.rows())
      throw InvalidInput("linear field shapes invalid");
  }

  void eval(double t, const Vec& q, VectorEval& out) const override {
    const int n = static_cast<int>(q.size());
    if (p_.matrix.rows() != n) throw InvalidInput("linear field has the wrong size");
    detail::resize_vector(n, out);
    const double tau = tau_.value(t);
    const double dtau = tau_.deriv(t);
    const Vec base = p_.matrix * q + p_.offset;
    out.value = tau * base;
    out.dt = dtau * base;
    out.jac = tau * p_.matrix.transpose();
    out.dt_jac = dtau * p_.matrix.transpose();
  }
  bool constant_curl() const override {
    return !tau_.active() || (p_.matrix - p_.matrix.transpose()).isZero(0.0);
  }
  bool time_independent() const override { return !tau_.active(); }
  std::string family() const override { return "linear"; }

 private:
  Params p_;
  detail::TimeModulation tau_;
};

// (B0/2)(-q^2, q^1, 0, ...)
class UniformB final : public VectorField {
 public:
  explicit UniformB(double b0) : b0_(b0) {}
  void eval(double, const Vec& q, VectorEval& out) const override {
    const int n = static_cast<int>(q.size());
    if (n < 2) throw InvalidInput("uniform_B needs dimension >= 2");
    detail::resize_vector(n, out);
    out.value(0) = -0.5 * b0_ * q(1);
    out.value(1) = 0.5 * b0_ * q(0);
    out.jac(1, 0) = -0.5 * b0_;
    out.jac(0, 1) = 0.5 * b0_;
  }
  double b0() const { return b0_; }
  bool identically_zero() const override { return b0_ == 0.0; }
  bool constant_curl() const override { return true; }
  bool time_independent() const override { return true; }
  std::string family() const override { return "uniform_B"; }

 private:
  double b0_;
};

// a tau(t) g(q) J q with g Gaussian of width s and J the rotation generator in the (i, j) plane.
class Swirl final : public VectorField {
 public:
  struct Params {
    double amplitude = 1.0;
    double width = 1.0;
    int plane_i = 0;
    int plane_j = 1;
    double time_eps = 0.0;
    double time_omega = 0.0;
  };

  explicit Swirl(Params p) : p_(p), tau_{p.time_eps, p.time_omega} {
    if (p_.width <= 0.0) throw InvalidInput("swirl width must be positive");
    if (p_.plane_i == p_.plane_j || p_.plane_i < 0 || p_.plane_j < 0) throw InvalidInput("swirl plane invalid");
  }

  void eval(double t, const Vec& q, VectorEval& out) const override {
    const int n = static_cast<int>(q.size());
    if (p_.plane_i >= n || p_.plane_j >= n) throw InvalidInput("swirl plane outside dimension");
    detail::resize_vector(n, out);
    const double inv2 = 1.0 / (p_.width * p_.width);
    const double g = std::exp(-0.5 * inv2 * q.squaredNorm());
    const Vec gg = -inv2 * g * q;
    Mat gh = inv2 * inv2 * g * q * q.transpose();
    gh.diagonal().array() -= inv2 * g;
    Mat jm = Mat::Zero(n, n);
    jm(p_.plane_i, p_.plane_j) = -1.0;
    jm(p_.plane_j, p_.plane_i) = 1.0;
    const Vec w = jm * q;
    const double tau = tau_.value(t);
    const double dtau = tau_.deriv(t);
    const double a = p_.amplitude;
    // base field u_k = g w_k; d_i u_k = g_i w_k + g J_ki
    Mat jac = gg * w.transpose() + g * jm.transpose();
    out.value = a * tau * g * w;
    out.dt = a * dtau * g * w;
    out.jac = a * tau * jac;
    out.dt_jac = a * dtau * jac;
    for (int l = 0; l < n; ++l) {
      // d_l d_i u_k = g_il w_k + g_i J_kl + g_l J_ki
      Mat d = gh.col(l) * w.transpose();
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) d(i, k) += gg(i) * jm(k, l) + gg(l) * jm(k, i);
      out.d2[l] = a * tau * d;
    }
  }
  bool time_independent() const override { return !tau_.active(); }
  std::string family() const override { return "swirl"; }

 private:
  Params p_;
  detail::TimeModulation tau_;
};

}  // namespace kramers
