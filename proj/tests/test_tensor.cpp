#include <gtest/gtest.h>

#include <random>

#include "kramers/tensor.hpp"

using namespace kramers;

TEST(MultilinearTensor, IndexingRoundTrip) {
  MultilinearTensor t(3, 4);
  std::vector<int> idx(4);
  for (std::size_t f = 0; f < t.size(); ++f) {
    t.unflatten(f, idx);
    EXPECT_EQ(t.flat_index(idx), f);
  }
  t.at({2, 0, 1, 2}) = 5.0;
  EXPECT_EQ(t[((2 * 3 + 0) * 3 + 1) * 3 + 2], 5.0);
  EXPECT_THROW(t.at({3, 0, 0, 0}), InvalidInput);
  EXPECT_THROW(t.at({0, 0, 0}), InvalidInput);
}

TEST(MultilinearTensor, ApplyMatchesDiagonal) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  MultilinearTensor t(3, 3);
  for (std::size_t f = 0; f < t.size(); ++f) t[f] = nd(rng);
  Eigen::VectorXd z(3);
  z << 0.4, -1.1, 2.0;
  std::vector<Eigen::VectorXd> vs(3, z);
  EXPECT_NEAR(t.apply(vs), t.apply_diag(z), 1e-13);
  // explicit sum
  double want = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) want += t.at({i, j, k}) * z(i) * z(j) * z(k);
  EXPECT_NEAR(t.apply_diag(z), want, 1e-13);
}

TEST(MultilinearTensor, ComposeSlots) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  MultilinearTensor t(2, 3);
  for (std::size_t f = 0; f < t.size(); ++f) t[f] = nd(rng);
  Eigen::MatrixXd m(2, 2);
  m << 1.0, 2.0, -0.5, 0.3;
  std::vector<Eigen::VectorXd> vs = {Eigen::Vector2d(1, 2), Eigen::Vector2d(-1, 0.5), Eigen::Vector2d(0.2, 0.7)};
  std::vector<Eigen::VectorXd> mvs;
  for (const auto& v : vs) mvs.push_back(m * v);
  EXPECT_NEAR(t.compose_slots(m).apply(vs), t.apply(mvs), 1e-13);
}

TEST(MultilinearTensor, ContractPairAndSymmetrize) {
  MultilinearTensor t(2, 3);
  for (std::size_t f = 0; f < t.size(); ++f) t[f] = static_cast<double>(f);
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
  const MultilinearTensor c = t.contract_pair(0, 2, s);
  // c_j = sum_i t[i, j, i]
  EXPECT_DOUBLE_EQ(c[0], t.at({0, 0, 0}) + t.at({1, 0, 1}));
  EXPECT_DOUBLE_EQ(c[1], t.at({0, 1, 0}) + t.at({1, 1, 1}));
  const MultilinearTensor sym = t.symmetrized();
  EXPECT_DOUBLE_EQ(sym.at({0, 1, 1}), sym.at({1, 0, 1}));
  Eigen::VectorXd z(2);
  z << 0.3, -0.8;
  EXPECT_NEAR(sym.apply_diag(z), t.apply_diag(z), 1e-13);
  EXPECT_THROW(t.contract_pair(1, 1, s), InvalidInput);
}

TEST(MultilinearTensor, Arithmetic) {
  MultilinearTensor a = MultilinearTensor::identity(2);
  MultilinearTensor b = 2.0 * a;
  EXPECT_DOUBLE_EQ((b - a).norm(), std::sqrt(2.0));
  EXPECT_THROW(a + MultilinearTensor(3, 2), InvalidInput);
}
