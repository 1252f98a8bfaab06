#include "pimppi/baselines.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace pimppi;

namespace {

class FlatCost : public CostFunction {
 public:
  double running(const State& x, const ControlPoint&, int) const override { return 1e-3 * x.p_n * x.p_n; }
  double terminal(const State&) const override { return 0.0; }
};

ControlSequence constant(int K, double v, double phi, double theta) {
  ControlSequence u(K, 3);
  u.col(0).setConstant(v);
  u.col(1).setConstant(phi);
  u.col(2).setConstant(theta);
  return u;
}

}  // namespace

TEST(Sgf, ReproducesPolynomialsUpToOrder) {
  const int K = 40;
  ControlSequence u(K, 3);
  for (int k = 0; k < K; ++k) {
    const double t = 0.1 * k;
    u.row(k) << 20 + 0.3 * t - 0.05 * t * t + 0.01 * t * t * t, 0.2 - 0.1 * t, 0.05 * t * t;
  }
  const ControlSequence s = sgf_smooth(u, {11, 3});
  // The edge points use the fit of the first and last full window, which is
  // exact for the same polynomials.
  EXPECT_LT((s - u).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Sgf, ConstantStaysConstant) {
  const ControlSequence u = constant(25, 18.0, -0.3, 0.1);
  EXPECT_LT((sgf_smooth(u, {7, 2}) - u).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sgf, RejectsBadConfig) {
  const ControlSequence u = constant(25, 18.0, -0.3, 0.1);
  EXPECT_THROW(sgf_smooth(u, {10, 3}), ConfigError);
  EXPECT_THROW(sgf_smooth(u, {5, 5}), ConfigError);
  EXPECT_THROW(sgf_smooth(constant(8, 1, 0, 0), {11, 3}), DimensionError);
}

TEST(Sgf, ClippedSequenceCanLeaveBoundsAfterSmoothing) {
  // A speed step from the lower to the upper bound: clipping leaves it in
  // bounds, the cubic fit overshoots on both sides of the jump.
  const DerivativeBounds b = DerivativeBounds::fixed_wing_defaults();
  ControlSequence u = constant(40, 10.0, 0.0, 0.0);
  u.bottomRows(20).col(0).setConstant(30.0);
  const ControlSequence clipped = clip_controls(u, b);
  EXPECT_EQ(sequence_residuals(clipped, b, 0.2).inequality[0][0], 0.0);
  const ControlSequence smoothed = sgf_smooth(clipped, {11, 3});
  EXPECT_GT(sequence_residuals(smoothed, b, 0.2).inequality[0][0], 0.0);
  EXPECT_GT(smoothed.col(0).maxCoeff(), 25.0);
  EXPECT_LT(smoothed.col(0).minCoeff(), 15.0);
}

TEST(Clip, IdentityInsideAndClampsOutside) {
  const DerivativeBounds b = DerivativeBounds::fixed_wing_defaults();
  const ControlSequence inside = constant(5, 20, 0.1, -0.1);
  EXPECT_EQ(clip_controls(inside, b), inside);
  ControlSequence out = inside;
  out(2, 0) = 40;
  out(3, 1) = -2;
  const ControlSequence c = clip_controls(out, b);
  EXPECT_EQ(c(2, 0), 25.0);
  EXPECT_EQ(c(3, 1), -0.6);
  DerivativeBounds open = b;
  open.limits[0][0].reset();
  EXPECT_EQ(clip_controls(out, open)(2, 0), 40.0);
}

TEST(Penalty, HandEvaluated) {
  const DerivativeBounds b = DerivativeBounds::fixed_wing_defaults();
  PenaltyConfig pc;
  pc.weights[0][1] = 10.0;
  ControlSequence u = constant(2, 20, 0, 0);
  u(1, 0) = 20 + 2.5 * 0.2;  // rate 2.5 against a bound of 2
  EXPECT_NEAR(bound_penalty(u, b, pc, 0.2), 5.0, 1e-12);
  EXPECT_EQ(bound_penalty(constant(30, 20, 0.1, 0), b, pc, 0.2), 0.0);
  EXPECT_EQ(bound_penalty(u, b, PenaltyConfig{}, 0.2), 0.0);
  pc.weights[1][0] = -1.0;
  EXPECT_THROW(pc.validate(), ConfigError);
}

TEST(Penalty, AugmentedCostAddsToRolloutCost) {
  const DerivativeBounds b = DerivativeBounds::fixed_wing_defaults();
  const FlatCost base;
  ControlSequence u = constant(10, 20, 0, 0);
  u(5, 0) = 20.5;  // rates +2.5 then -2.5
  const DynamicsParams dyn;
  const double s0 = rollout_cost({}, u, base, dyn, Eigen::Matrix3d::Zero());
  const PenaltyAugmentedCost zero(base, b, PenaltyConfig{}, 0.2);
  EXPECT_EQ(rollout_cost({}, u, zero, dyn, Eigen::Matrix3d::Zero()), s0);
  PenaltyConfig pc;
  pc.weights[0][1] = 10.0;
  const PenaltyAugmentedCost aug = penalty_augmented_cost(base, b, pc, 0.2);
  EXPECT_NEAR(rollout_cost({}, u, aug, dyn, Eigen::Matrix3d::Zero()) - s0, 10.0, 1e-9);
}

TEST(Baseline, ZeroCovarianceClipsAndSmoothsTheMean) {
  BaselineConfig c;
  c.mppi.K = 30;
  c.mppi.M = 8;
  c.mppi.noise = NoiseSpec::waypoint(Eigen::Vector3d::Zero());
  BaselineController ctl(c, {20, 0, 0}, "mppiwsgf");
  ControlSequence mean = constant(30, 20, 0.1, 0.0);
  for (int k = 0; k < 30; ++k) mean(k, 0) = 14 + 0.4 * k;
  const ControlSequence out = ctl.step({}, mean, FlatCost{}, nullptr, nullptr);
  const ControlSequence expected = sgf_smooth(clip_controls(mean, c.bounds), c.sgf);
  EXPECT_LT((out - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Baseline, ClippedSamplesStayInBounds) {
  BaselineConfig c;
  c.mppi.K = 30;
  c.mppi.M = 64;
  c.mppi.noise = NoiseSpec::waypoint(Eigen::Vector3d(4.0, 0.5, 0.5));
  BaselineController ctl(c, {20, 0, 0}, "mppiwsgf");
  SampleBatch batch;
  ctl.step({}, constant(30, 20, 0, 0), FlatCost{}, &batch, nullptr);
  for (int m = 0; m < c.mppi.M; ++m) {
    const ControlSequence u = unflatten(batch.nus.row(m).transpose(), 30);
    EXPECT_EQ(sequence_residuals(u, c.bounds, 0.2).inequality[0][0], 0.0);
    EXPECT_EQ(sequence_residuals(u, c.bounds, 0.2).inequality[1][0], 0.0);
  }
  EXPECT_NEAR(batch.weights.sum(), 1.0, 1e-12);
}

TEST(Baseline, PolynomialNoiseLiesInBasisSpan) {
  const int K = 40, n = 6;
  BaselineConfig c;
  c.mppi.K = K;
  c.mppi.M = 50;
  c.n = n;
  c.mppi.noise = NoiseSpec::coefficient(Eigen::Vector3d(0.02, 0.0002, 0.002), n);
  c.weight_cov = Eigen::Vector3d(0.02, 0.0002, 0.002).asDiagonal();
  BaselineController ctl(c, {20, 0, 0}, "mppi-poly");
  SampleBatch batch;
  // Far from the bounds, so clipping leaves the noise untouched.
  ctl.step({}, constant(K, 20, 0, 0), FlatCost{}, &batch, nullptr);
  for (int ch = 0; ch < 3; ++ch) {
    const Eigen::MatrixXd E = batch.epsilons.middleCols(ch * K, K);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(E);
    svd.setThreshold(1e-10);
    EXPECT_LE(svd.rank(), n);
    EXPECT_EQ(svd.rank(), n);
  }
}

TEST(Baseline, ZeroCovarianceFixedPointForPoly) {
  const int K = 30;
  BaselineConfig c;
  c.mppi.K = K;
  c.mppi.M = 4;
  c.n = 5;
  c.mppi.noise = NoiseSpec::coefficient(Eigen::Vector3d::Zero(), 5);
  BaselineController ctl(c, {20, 0, 0}, "mppi-poly");
  const ControlSequence mean = constant(K, 21, -0.1, 0.05);
  EXPECT_LT((ctl.step({}, mean, FlatCost{}, nullptr, nullptr) - mean).cwiseAbs().maxCoeff(), 1e-12);
}
