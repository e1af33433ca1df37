#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kramers/cellproblem.hpp"
#include "support.hpp"

using namespace kramers;
using kramers::testing::random_gamma_tilde;

TEST(GaussianMoment, WickPairings) {
  EXPECT_DOUBLE_EQ(gaussian_moment(2.0, {0, 0, 1, 1}), 0.25);
  EXPECT_DOUBLE_EQ(gaussian_moment(2.0, {0, 0, 0, 0}), 0.75);
  EXPECT_DOUBLE_EQ(gaussian_moment(2.0, {0, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_moment(1.0, {0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_moment(0.5, {}), 1.0);
  EXPECT_DOUBLE_EQ(gaussian_moment(1.0, {2, 2, 2, 2, 2, 2}), 15.0);
  EXPECT_THROW(gaussian_moment(0.0, {0, 0}), InvalidInput);
}

TEST(CellProblem, RankTwoScalar) {
  // n = 1, B = z^2: chi = -z^2 / (2 g)
  const double g = 1.5, beta = 2.0;
  Eigen::MatrixXd gt(1, 1);
  gt << g;
  MultilinearTensor b(1, 2);
  b[0] = 1.0;
  const CellSolution chi = solve_cell(beta, gt, b);
  Eigen::VectorXd z(1);
  z << 0.7;
  EXPECT_NEAR(chi.value(z), -0.49 / (2 * g), 1e-15);
  EXPECT_NEAR(chi.gradient(z)(0), -0.7 / g, 1e-15);
}

TEST(CellProblem, RankOneIsLinear) {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd gt = random_gamma_tilde(3, rng);
  Eigen::VectorXd a(3);
  a << 1.0, -2.0, 0.5;
  const CellSolution chi = solve_cell(1.3, gt, MultilinearTensor::from_vector(a));
  const Eigen::VectorXd want = -gt.transpose().partialPivLu().solve(a);
  Eigen::VectorXd z(3);
  z << 0.2, 0.4, -1.0;
  EXPECT_NEAR(chi.value(z), want.dot(z), 1e-13);
}

TEST(CellProblem, QuarticScalar) {
  // chi = -z^4/(4g) - 3 z^2 / (2 g beta)
  const double g = 0.8, beta = 1.7;
  Eigen::MatrixXd gt(1, 1);
  gt << g;
  MultilinearTensor b(1, 4);
  b[0] = 1.0;
  const CellSolution chi = solve_cell(beta, gt, b);
  Eigen::VectorXd z(1);
  z << -1.3;
  const double zz = z(0) * z(0);
  EXPECT_NEAR(chi.value(z), -zz * zz / (4 * g) - 3 * zz / (2 * g * beta), 1e-13);
}

TEST(CellProblem, ResidualRandomCases) {
  for (int seed = 0; seed < 60; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const int n = 1 + seed % 4;
    const int k = 1 + (seed / 4) % 5;
    const double beta = 0.5 + (seed % 7) * 0.4;
    const Eigen::MatrixXd gt = random_gamma_tilde(n, rng);
    MultilinearTensor b(n, k);
    std::normal_distribution<double> nd;
    for (std::size_t f = 0; f < b.size(); ++f) b[f] = nd(rng);
    const CellSolution chi = solve_cell(beta, gt, b);
    const double zmax = 6.0 / std::sqrt(beta);
    const double tol = 1e-9 * (1.0 + b.norm() * std::pow(zmax * std::sqrt(n), k));
    EXPECT_LT(verify_residual(chi, 200, seed), tol) << "n=" << n << " k=" << k;
  }
}

TEST(CellProblem, LinearChiArbitrarySigma) {
  // chi(z) = a.z has zero Hessian, so L chi = -(gt z).a for any Sigma
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd gt = random_gamma_tilde(2, rng);
  Eigen::VectorXd a(2);
  a << 0.5, -0.25;
  const CellSolution chi = solve_cell(1.0, gt, MultilinearTensor::from_vector(-gt.transpose() * a));
  Eigen::VectorXd z(2);
  z << 1.0, 2.0;
  const Eigen::MatrixXd sigma = Eigen::MatrixXd::Random(2, 2);
  EXPECT_NEAR(chi.value(z), a.dot(z), 1e-14);
  EXPECT_NEAR(apply_L(1.0, gt, sigma, chi, z), -(gt * z).dot(a), 1e-13);
}

TEST(CellProblem, MismatchedParametersRejected) {
  Eigen::MatrixXd gt = Eigen::MatrixXd::Identity(2, 2);
  const CellSolution chi = solve_cell(1.0, gt, MultilinearTensor::identity(2));
  Eigen::VectorXd z = Eigen::VectorXd::Ones(2);
  EXPECT_THROW(apply_L(2.0, gt, gt, chi, z), InvalidInput);
  EXPECT_THROW(apply_L(1.0, 2.0 * gt, gt, chi, z), InvalidInput);
  EXPECT_THROW(solve_cell(1.0, -gt, MultilinearTensor::identity(2)), SpectralError);
}

TEST(CellProblem, GradientAverageRankThree) {
  // gradient average equals the Gaussian mean of grad chi computed term by term
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd gt = random_gamma_tilde(2, rng);
  MultilinearTensor b(2, 3);
  std::normal_distribution<double> nd;
  for (std::size_t f = 0; f < b.size(); ++f) b[f] = nd(rng);
  const double beta = 1.4;
  const CellSolution chi = solve_cell(beta, gt, b);
  // Monte Carlo is too coarse; use Gauss-Hermite in 2D instead.
  const double x[5] = {-2.0201828704560856, -0.9585724646138185, 0.0, 0.9585724646138185, 2.0201828704560856};
  const double w[5] = {0.019953242059045913, 0.39361932315224116, 0.9453087204829419, 0.39361932315224116,
                       0.019953242059045913};
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      Eigen::VectorXd z(2);
      z << x[i] * std::sqrt(2.0 / beta), x[j] * std::sqrt(2.0 / beta);
      acc += w[i] * w[j] / M_PI * chi.gradient(z);
    }
  EXPECT_LT((acc - chi.gradient_average()).cwiseAbs().maxCoeff(), 1e-12);
}
