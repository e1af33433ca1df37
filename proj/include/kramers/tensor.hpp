#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kramers/errors.hpp"

namespace kramers {

namespace detail {

inline std::size_t ipow(int base, int exp) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) r *= static_cast<std::size_t>(base);
  return r;
}

// out_{..m_a..} = sum_j in_{..j..} M(j, m) with j in slot `slot`.
template <class Scalar, class MatrixT>
std::vector<Scalar> mode_product(const std::vector<Scalar>& in, int n, int rank, int slot,
                                 const MatrixT& M) {
  const std::size_t stride = ipow(n, rank - 1 - slot);
  const std::size_t block = stride * static_cast<std::size_t>(n);
  std::vector<Scalar> out(in.size(), Scalar(0));
  for (std::size_t base = 0; base < in.size(); base += block) {
    for (std::size_t inner = 0; inner < stride; ++inner) {
      for (int m = 0; m < n; ++m) {
        Scalar acc(0);
        for (int j = 0; j < n; ++j) acc += in[base + j * stride + inner] * Scalar(M(j, m));
        out[base + m * stride + inner] = acc;
      }
    }
  }
  return out;
}

}  // namespace detail

// Real k-linear form on R^n, stored densely with the last slot varying fastest.
// Rank 0 holds a single scalar.
class MultilinearTensor {
 public:
  MultilinearTensor() : n_(1), k_(0), data_(1, 0.0) {}

  MultilinearTensor(int dim, int rank) : n_(dim), k_(rank) {
    if (dim < 1 || rank < 0) throw InvalidInput("tensor needs dim >= 1 and rank >= 0");
    data_.assign(detail::ipow(dim, rank), 0.0);
  }

  MultilinearTensor(int dim, int rank, std::vector<double> data) : n_(dim), k_(rank) {
    if (dim < 1 || rank < 0) throw InvalidInput("tensor needs dim >= 1 and rank >= 0");
    if (data.size() != detail::ipow(dim, rank)) throw InvalidInput("tensor data size mismatch");
    data_ = std::move(data);
  }

  static MultilinearTensor scalar(double v, int dim) {
    MultilinearTensor t(dim, 0);
    t.data_[0] = v;
    return t;
  }

  // delta_{ij}
  static MultilinearTensor identity(int dim) {
    MultilinearTensor t(dim, 2);
    for (int i = 0; i < dim; ++i) t.data_[i * dim + i] = 1.0;
    return t;
  }

  static MultilinearTensor from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
    MultilinearTensor t(static_cast<int>(v.size()), 1);
    for (int i = 0; i < v.size(); ++i) t.data_[i] = v(i);
    return t;
  }

  static MultilinearTensor from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m) {
    if (m.rows() != m.cols()) throw InvalidInput("matrix must be square");
    const int n = static_cast<int>(m.rows());
    MultilinearTensor t(n, 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) t.data_[i * n + j] = m(i, j);
    return t;
  }

  int dim() const { return n_; }
  int rank() const { return k_; }
  std::size_t size() const { return data_.size(); }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  std::size_t flat_index(std::span<const int> idx) const {
    if (static_cast<int>(idx.size()) != k_) throw InvalidInput("index arity does not match rank");
    std::size_t f = 0;
    for (int a : idx) {
      if (a < 0 || a >= n_) throw InvalidInput("tensor index out of range");
      f = f * n_ + a;
    }
    return f;
  }

  void unflatten(std::size_t flat, std::span<int> idx) const {
    for (int a = k_ - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(flat % n_);
      flat /= n_;
    }
  }

  double& at(std::initializer_list<int> idx) {
    return data_[flat_index(std::span<const int>(idx.begin(), idx.size()))];
  }
  double at(std::initializer_list<int> idx) const {
    return data_[flat_index(std::span<const int>(idx.begin(), idx.size()))];
  }
  double& at(std::span<const int> idx) { return data_[flat_index(idx)]; }
  double at(std::span<const int> idx) const { return data_[flat_index(idx)]; }

  // Contract the last slot with v, giving a tensor of rank k-1.
  MultilinearTensor contract_last(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    if (k_ == 0) throw InvalidInput("cannot contract a rank-0 tensor");
    check_vector(v);
    MultilinearTensor out(n_, k_ - 1);
    for (std::size_t i = 0; i < out.data_.size(); ++i) {
      double acc = 0.0;
      for (int j = 0; j < n_; ++j) acc += data_[i * n_ + j] * v(j);
      out.data_[i] = acc;
    }
    return out;
  }

  // T(v_1, ..., v_k)
  double apply(std::span<const Eigen::VectorXd> vs) const {
    if (static_cast<int>(vs.size()) != k_) throw InvalidInput("argument count does not match rank");
    MultilinearTensor cur = *this;
    for (int a = k_ - 1; a >= 0; --a) cur = cur.contract_last(vs[a]);
    return cur.data_[0];
  }

  // T(z, ..., z)
  double apply_diag(const Eigen::Ref<const Eigen::VectorXd>& z) const {
    check_vector(z);
    std::vector<double> cur = data_;
    std::size_t len = cur.size();
    for (int a = 0; a < k_; ++a) {
      len /= n_;
      for (std::size_t i = 0; i < len; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n_; ++j) acc += cur[i * n_ + j] * z(j);
        cur[i] = acc;
      }
    }
    return cur[0];
  }

  // Result R with R(v_1..v_k) = T(M v_1, ..., M v_k).
  MultilinearTensor compose_slots(const Eigen::Ref<const Eigen::MatrixXd>& M) const {
    if (M.rows() != n_ || M.cols() != n_) throw InvalidInput("slot map has wrong shape");
    std::vector<double> cur = data_;
    for (int a = 0; a < k_; ++a) cur = detail::mode_product(cur, n_, k_, a, M);
    return MultilinearTensor(n_, k_, std::move(cur));
  }

  // Contract slots a < b against the matrix S: sum T^{..i_a..i_b..} S_{i_a i_b}.
  MultilinearTensor contract_pair(int a, int b, const Eigen::Ref<const Eigen::MatrixXd>& S) const {
    if (a < 0 || b <= a || b >= k_) throw InvalidInput("contract_pair needs 0 <= a < b < rank");
    if (S.rows() != n_ || S.cols() != n_) throw InvalidInput("pair contraction matrix has wrong shape");
    MultilinearTensor out(n_, k_ - 2);
    std::vector<int> idx(k_), rest(std::max(k_ - 2, 0));
    for (std::size_t f = 0; f < data_.size(); ++f) {
      unflatten(f, idx);
      int r = 0;
      for (int s = 0; s < k_; ++s)
        if (s != a && s != b) rest[r++] = idx[s];
      std::size_t g = 0;
      for (int x : rest) g = g * n_ + x;
      out.data_[g] += data_[f] * S(idx[a], idx[b]);
    }
    return out;
  }

  // Average over all permutations of the slots.
  MultilinearTensor symmetrized() const {
    MultilinearTensor out(n_, k_);
    std::vector<int> perm(k_), idx(k_), pidx(k_);
    for (int i = 0; i < k_; ++i) perm[i] = i;
    double count = 0.0;
    do {
      for (std::size_t f = 0; f < data_.size(); ++f) {
        unflatten(f, idx);
        for (int s = 0; s < k_; ++s) pidx[s] = idx[perm[s]];
        out.data_[f] += data_[flat_index(pidx)];
      }
      count += 1.0;
    } while (std::next_permutation(perm.begin(), perm.end()));
    for (double& x : out.data_) x /= count;
    return out;
  }

  double norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  MultilinearTensor& operator+=(const MultilinearTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  MultilinearTensor& operator-=(const MultilinearTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  MultilinearTensor& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }
  friend MultilinearTensor operator+(MultilinearTensor a, const MultilinearTensor& b) { return a += b; }
  friend MultilinearTensor operator-(MultilinearTensor a, const MultilinearTensor& b) { return a -= b; }
  friend MultilinearTensor operator*(double s, MultilinearTensor a) { return a *= s; }
  friend MultilinearTensor operator*(MultilinearTensor a, double s) { return a *= s; }

 private:
  void check_vector(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    if (v.size() != n_) throw InvalidInput("vector length does not match tensor dimension");
  }
  void check_same_shape(const MultilinearTensor& o) const {
    if (o.n_ != n_ || o.k_ != k_) throw InvalidInput("tensor shapes differ");
  }

  int n_;
  int k_;
  std::vector<double> data_;
};

}  // namespace kramers
