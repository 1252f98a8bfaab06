#include "pimppi/basis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace pimppi;

TEST(Basis, LinearTwoPoint) {
  const BasisMatrices B = build_basis(2, 2, 1.0);
  EXPECT_TRUE(B.W.isApprox(Eigen::Matrix2d::Identity()));
}

TEST(Basis, RejectsBadDimensions) {
  EXPECT_THROW(build_basis(10, 1, 1.0), DimensionError);
  EXPECT_THROW(build_basis(5, 6, 1.0), DimensionError);
  EXPECT_THROW(build_basis(10, 4, 0.0), DimensionError);
  // Degree 49 sampled at 50 points is numerically singular.
  EXPECT_THROW(build_basis(50, 50, 5.0), RankError);
}

class BasisIdentities : public ::testing::TestWithParam<std::tuple<int, int, double>> {};

TEST_P(BasisIdentities, PartitionOfUnityAndEndpoints) {
  const auto [K, n, T] = GetParam();
  const BasisMatrices B = build_basis(K, n, T);
  ASSERT_EQ(B.W.rows(), K);
  ASSERT_EQ(B.W.cols(), n);
  for (int k = 0; k < K; ++k) {
    EXPECT_NEAR(B.W.row(k).sum(), 1.0, 1e-12);
    EXPECT_NEAR(B.Wdot.row(k).sum(), 0.0, 1e-9 * (1 + B.Wdot.row(k).cwiseAbs().sum()));
    EXPECT_NEAR(B.Wddot.row(k).sum(), 0.0, 1e-9 * (1 + B.Wddot.row(k).cwiseAbs().sum()));
  }
  for (int i = 0; i < n; ++i) {
    EXPECT_NEAR(B.W(0, i), i == 0 ? 1.0 : 0.0, 1e-12);
    EXPECT_NEAR(B.W(K - 1, i), i == n - 1 ? 1.0 : 0.0, 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(Grid, BasisIdentities,
                         ::testing::Values(std::tuple{2, 2, 1.0}, std::tuple{20, 8, 3.8}, std::tuple{100, 11, 19.8},
                                           std::tuple{100, 6, 20.0}, std::tuple{30, 20, 5.8},
                                           std::tuple{300, 15, 60.0}));

namespace {

// Central-difference error of Wdot c and Wddot c at the interior samples.
std::pair<double, double> fd_error(int K, int n, double T, const Eigen::VectorXd& c) {
  const BasisMatrices B = build_basis(K, n, T);
  const double h = T / (K - 1);
  const Eigen::VectorXd u = B.W * c, du = B.Wdot * c, ddu = B.Wddot * c;
  double e1 = 0, e2 = 0;
  for (int k = 1; k < K - 1; ++k) {
    e1 = std::max(e1, std::abs((u(k + 1) - u(k - 1)) / (2 * h) - du(k)));
    e2 = std::max(e2, std::abs((u(k + 1) - 2 * u(k) + u(k - 1)) / (h * h) - ddu(k)));
  }
  return {e1, e2};
}

}  // namespace

TEST(Basis, DerivativesMatchFiniteDifferencesSecondOrder) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N;
  const int n = 6;
  const double T = 20.0;
  Eigen::VectorXd c(n);
  for (int i = 0; i < n; ++i) c(i) = N(rng);
  const auto [a1, a2] = fd_error(100, n, T, c);
  const auto [b1, b2] = fd_error(199, n, T, c);  // half the step
  EXPECT_LT(a1, 1e-3);
  EXPECT_LT(a2, 1e-3);
  // Halving h divides a second-order error by about 4.
  EXPECT_GT(a1 / b1, 3.5);
  EXPECT_GT(a2 / b2, 3.5);
}

TEST(Coefficients, OnesGiveConstantAndFirstCoefficientIsStart) {
  const BasisMatrices B = build_basis(100, 11, 19.8);
  CoefficientTriple c{Eigen::VectorXd::Ones(11), Eigen::VectorXd::Zero(11), Eigen::VectorXd::Zero(11)};
  c.c_phi(0) = 0.37;
  const ControlSequence u = coeffs_to_controls(c, B);
  EXPECT_NEAR((u.col(0).array() - 1.0).abs().maxCoeff(), 0.0, 1e-12);
  EXPECT_NEAR(u(0, 1), 0.37, 1e-15);
}

TEST(Coefficients, FitRecoversSpanMembers) {
  const BasisMatrices B = build_basis(100, 11, 19.8);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N;
  CoefficientTriple c;
  for (int ch = 0; ch < 3; ++ch) {
    c[ch].resize(11);
    for (int i = 0; i < 11; ++i) c[ch](i) = N(rng);
  }
  const CoefficientTriple back = fit_coeffs(coeffs_to_controls(c, B), B);
  for (int ch = 0; ch < 3; ++ch) EXPECT_LT((back[ch] - c[ch]).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_LT((CoefficientTriple::from_stacked(c.stacked(), 11).stacked() - c.stacked()).norm(), 0.0 + 1e-300);
}

TEST(Coefficients, ConstantFitsToConstantCoefficients) {
  const BasisMatrices B = build_basis(40, 7, 7.8);
  ControlSequence u(40, 3);
  u.col(0).setConstant(18.5);
  u.col(1).setConstant(-0.2);
  u.col(2).setConstant(0.05);
  const CoefficientTriple c = fit_coeffs(u, B);
  EXPECT_LT((c.c_v.array() - 18.5).abs().maxCoeff(), 1e-8);
  EXPECT_LT((c.c_phi.array() + 0.2).abs().maxCoeff(), 1e-8);
  EXPECT_LT((c.c_theta.array() - 0.05).abs().maxCoeff(), 1e-8);
}

TEST(Coefficients, FitEvaluateIsIdempotent) {
  const BasisMatrices B = build_basis(100, 11, 19.8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> N;
  ControlSequence u(100, 3);
  for (int k = 0; k < 100; ++k) u.row(k) << N(rng), N(rng), N(rng);
  const ControlSequence once = coeffs_to_controls(fit_coeffs(u, B), B);
  const ControlSequence twice = coeffs_to_controls(fit_coeffs(once, B), B);
  EXPECT_LT((once - twice).cwiseAbs().maxCoeff(), 1e-8);
  // Stacked fast paths agree with the structured ones.
  EXPECT_LT((stacked_to_controls(controls_to_stacked(u, B), B) - once).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Coefficients, DerivativeSequences) {
  const BasisMatrices B = build_basis(30, 5, 5.8);
  CoefficientTriple c{Eigen::VectorXd::LinSpaced(5, 0, 4), Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(5)};
  // Linearly spaced Bernstein coefficients describe a straight line in t.
  const ControlSequence d = coeffs_to_controls(c, B, Derivative::First);
  const ControlSequence dd = coeffs_to_controls(c, B, Derivative::Second);
  EXPECT_LT((d.col(0).array() - 4.0 / 5.8).abs().maxCoeff(), 1e-12);
  EXPECT_LT(dd.col(0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Coefficients, DimensionMismatch) {
  const BasisMatrices B = build_basis(30, 5, 5.8);
  CoefficientTriple c{Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(5)};
  EXPECT_THROW(coeffs_to_controls(c, B), DimensionError);
  ControlSequence u(20, 3);
  u.setZero();
  EXPECT_THROW(fit_coeffs(u, B), DimensionError);
}
