#include "pimppi/mppi.hpp"
#include "pimppi/warmstart.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <random>

using namespace pimppi;

namespace {

// Quadratic pull towards a point plus a small terminal term.
class GoalCost : public CostFunction {
 public:
  explicit GoalCost(Eigen::Vector3d goal) : goal_(std::move(goal)) {}
  double running(const State& x, const ControlPoint&, int) const override {
    return 1e-3 * (Eigen::Vector3d(x.p_n, x.p_e, x.p_d) - goal_).squaredNorm();
  }
  double terminal(const State& x) const override { return running(x, {}, 0); }

 private:
  Eigen::Vector3d goal_;
};

class OpenSky : public Task {
 public:
  explicit OpenSky(Eigen::Vector3d goal) : goal_(goal), cost_(goal) {}
  const CostFunction& cost() const override { return cost_; }
  Failure check_failure(const State&) const override { return Failure::None; }
  double distance_to_goal(const State& x) const override {
    return (Eigen::Vector3d(x.p_n, x.p_e, x.p_d) - goal_).norm();
  }

 private:
  Eigen::Vector3d goal_;
  GoalCost cost_;
};

ControlSequence constant(int K, double v, double phi, double theta) {
  ControlSequence u(K, 3);
  u.col(0).setConstant(v);
  u.col(1).setConstant(phi);
  u.col(2).setConstant(theta);
  return u;
}

PiMppiConfig small_config(int K, int M, const Eigen::Vector3d& noise, std::uint64_t seed) {
  PiMppiConfig c;
  c.mppi.K = K;
  c.mppi.M = M;
  c.mppi.seed = seed;
  c.n = 8;
  c.mppi.noise = NoiseSpec::coefficient(noise, c.n);
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weights

TEST(Weights, EqualCostsAreExactlyUniform) {
  for (int M : {1, 2, 7, 256, 1000}) {
    const Eigen::VectorXd w = compute_weights(Eigen::VectorXd::Constant(M, 3.7), 5.0);
    for (int m = 0; m < M; ++m) EXPECT_EQ(w(m), 1.0 / M);
  }
}

TEST(Weights, TwoSamplesHandEvaluated) {
  Eigen::VectorXd s(2);
  s << 0.0, 100.0;
  const Eigen::VectorXd w = compute_weights(s, 5.0);
  const double e = std::exp(-20.0);
  EXPECT_NEAR(w(0), 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(w(1), e / (1.0 + e), 1e-20);
  EXPECT_NEAR(w(1), 2.06e-9, 1e-11);
}

TEST(Weights, ShiftInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(0, 50);
  Eigen::VectorXd s(64);
  for (auto& v : s) v = U(rng);
  const Eigen::VectorXd w = compute_weights(s, 5.0);
  for (double c : {-25.0, 0.5, 17.0, 1000.0}) {
    const Eigen::VectorXd ws = compute_weights((s.array() + c).matrix(), 5.0);
    EXPECT_LT((w - ws).lpNorm<Eigen::Infinity>(), 1e-12) << c;
  }
}

TEST(Weights, LargeTemperatureIsUniform) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(0, 100);
  Eigen::VectorXd s(200);
  for (auto& v : s) v = U(rng);
  const Eigen::VectorXd w = compute_weights(s, 1e9);
  EXPECT_LT((w.array() - 1.0 / 200).abs().maxCoeff(), 1e-6);
}

TEST(Weights, SimplexAndArgmax) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0, 30);
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd s(50);
    for (auto& v : s) v = N(rng);
    const Eigen::VectorXd w = compute_weights(s, 5.0);
    EXPECT_GE(w.minCoeff(), 0.0);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
    Eigen::Index imax, imin;
    w.maxCoeff(&imax);
    s.minCoeff(&imin);
    EXPECT_EQ(imax, imin);
  }
}

TEST(Weights, NonFiniteCostsGetZeroWeight) {
  Eigen::VectorXd s(3);
  s << 1.0, std::numeric_limits<double>::infinity(), 1.0;
  const Eigen::VectorXd w = compute_weights(s, 5.0);
  EXPECT_EQ(w(1), 0.0);
  EXPECT_DOUBLE_EQ(w(0), 0.5);
  s.setConstant(std::numeric_limits<double>::infinity());
  EXPECT_THROW(compute_weights(s, 5.0), Error);
}

TEST(Weights, ControlTermVanishesForZeroMean) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> N;
  const int K = 5, M = 6;
  MppiParams p;
  p.K = K;
  p.M = M;
  Eigen::MatrixXd nus(M, 3 * K);
  for (int i = 0; i < nus.size(); ++i) nus.data()[i] = N(rng);
  Eigen::VectorXd s(M);
  for (auto& v : s) v = 10 * N(rng);
  const std::vector<Eigen::Matrix3d> cov(K, Eigen::Matrix3d::Identity());
  const Eigen::VectorXd w0 = compute_weights(s, ControlSequence::Zero(K, 3), cov, nus, p);
  EXPECT_LT((w0 - compute_weights(s, p.sigma)).lpNorm<Eigen::Infinity>(), 1e-15);

  // Nonzero mean: s~ = s + gamma sum_k u^T (Sigma + 1e-6 I)^-1 nu_k.
  const ControlSequence u = constant(K, 1.0, -0.5, 2.0);
  Eigen::VectorXd st = s;
  const Eigen::Matrix3d Sinv = (Eigen::Matrix3d::Identity() * (1.0 + 1e-6)).inverse();
  for (int m = 0; m < M; ++m) {
    const ControlSequence nu = unflatten(nus.row(m).transpose(), K);
    for (int k = 0; k < K; ++k) st(m) += p.gamma() * u.row(k).dot(Sinv * nu.row(k).transpose());
  }
  EXPECT_LT((compute_weights(s, u, cov, nus, p) - compute_weights(st, p.sigma)).lpNorm<Eigen::Infinity>(), 1e-12);
}

// ---------------------------------------------------------------------------
// Update and statistics

TEST(WeightedUpdate, HandExamples) {
  Eigen::VectorXd mean(1);
  mean << 2.0;
  Eigen::MatrixXd eps(2, 1);
  eps << 1.0, -1.0;
  Eigen::VectorXd w(2);
  w << 0.75, 0.25;
  EXPECT_DOUBLE_EQ(weighted_update(mean, eps, w)(0), 2.5);
  w << 1.0, 0.0;
  EXPECT_DOUBLE_EQ(weighted_update(mean, eps, w)(0), 3.0);
  w << 0.5, 0.5;
  EXPECT_DOUBLE_EQ(weighted_update(mean, eps, w)(0), 2.0);
}

TEST(WeightedUpdate, ConvexHullComponentwise) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N;
  Eigen::VectorXd mean(12);
  for (auto& v : mean) v = N(rng);
  Eigen::MatrixXd eps(30, 12);
  for (int i = 0; i < eps.size(); ++i) eps.data()[i] = N(rng);
  Eigen::VectorXd s(30);
  for (auto& v : s) v = 3 * N(rng);
  const Eigen::VectorXd out = weighted_update(mean, eps, compute_weights(s, 1.0));
  for (int j = 0; j < 12; ++j) {
    EXPECT_GE(out(j), mean(j) + eps.col(j).minCoeff() - 1e-12);
    EXPECT_LE(out(j), mean(j) + eps.col(j).maxCoeff() + 1e-12);
  }
}

TEST(Statistics, TwoScalarSamples) {
  Eigen::MatrixXd seq = Eigen::MatrixXd::Zero(2, 3);
  seq(0, 0) = 0.0;
  seq(1, 0) = 2.0;
  const SampleStatistics st = update_statistics(seq, 1);
  EXPECT_DOUBLE_EQ(st.mean(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(st.covariance[0](0, 0), 2.0);
  EXPECT_DOUBLE_EQ(st.epsilons(0, 0), -1.0);
}

TEST(Statistics, IdenticalSamplesAndReconstruction) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> N;
  const int K = 4;
  Eigen::RowVectorXd row(3 * K);
  for (auto& v : row) v = N(rng);
  const SampleStatistics same = update_statistics(row.replicate(5, 1), K);
  for (const auto& S : same.covariance) EXPECT_LT(S.cwiseAbs().maxCoeff(), 1e-28);
  EXPECT_LT(same.epsilons.cwiseAbs().maxCoeff(), 1e-14);

  Eigen::MatrixXd seq(9, 3 * K);
  for (int i = 0; i < seq.size(); ++i) seq.data()[i] = N(rng);
  const SampleStatistics st = update_statistics(seq, K);
  const Eigen::VectorXd mean = flat(st.mean);
  EXPECT_LT(((st.epsilons.rowwise() + mean.transpose()) - seq).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(update_statistics(seq.topRows(1), K), DimensionError);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sampling, ZeroCovarianceGivesMean) {
  MppiParams p;
  p.K = 10;
  p.M = 8;
  p.noise = NoiseSpec::waypoint(Eigen::Vector3d::Zero());
  Eigen::VectorXd mean = Eigen::VectorXd::LinSpaced(30, -1, 1);
  const SampleBatch b = sample_perturbations(mean, p, 0);
  for (int m = 0; m < p.M; ++m) EXPECT_EQ(b.nus.row(m), mean.transpose());

  p.noise = NoiseSpec::coefficient(Eigen::Vector3d::Zero(), 4);
  const SampleBatch c = sample_perturbations(Eigen::VectorXd::Ones(12), p, 0);
  EXPECT_EQ(c.epsilons.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sampling, MonteCarloMeanAndVariance) {
  MppiParams p;
  p.K = 2;
  p.M = 100000;
  p.seed = 11;
  const Eigen::Vector3d var(20.0, 2.0, 0.5);
  p.noise = NoiseSpec::waypoint(var);
  const SampleBatch b = sample_perturbations(Eigen::VectorXd::Zero(6), p, 0);
  for (int j = 0; j < 6; ++j) {
    const double sd = std::sqrt(var(j / 2));
    const double mean = b.epsilons.col(j).mean();
    EXPECT_LT(std::abs(mean), 3 * sd / std::sqrt(p.M)) << j;
    const double s2 = b.epsilons.col(j).squaredNorm() / p.M;
    EXPECT_NEAR(s2 / var(j / 2), 1.0, 0.02) << j;
  }
}

TEST(Sampling, CoefficientNoiseMatchesScales) {
  MppiParams p;
  p.K = 10;
  p.M = 50000;
  p.seed = 12;
  p.noise = NoiseSpec::coefficient(Eigen::Vector3d(20, 2, 2), 3);
  const SampleBatch b = sample_perturbations(Eigen::VectorXd::Zero(9), p, 0);
  for (int j = 0; j < 9; ++j) {
    const double var = j < 3 ? 20.0 : 2.0;
    EXPECT_NEAR(b.epsilons.col(j).squaredNorm() / p.M / var, 1.0, 0.03);
  }
}

TEST(Sampling, RejectsIndefiniteCovariance) {
  MppiParams p;
  p.K = 3;
  p.M = 4;
  p.noise = NoiseSpec::waypoint(Eigen::Vector3d(1.0, -0.1, 1.0));
  EXPECT_THROW(sample_perturbations(Eigen::VectorXd::Zero(9), p, 0), CovarianceError);
  p.noise.step_cov << 1, 2, 0, 2, 1, 0, 0, 0, 1;
  EXPECT_THROW(sample_perturbations(Eigen::VectorXd::Zero(9), p, 0), CovarianceError);
}

TEST(Sampling, DeterministicPerSeedAndStream) {
  MppiParams p;
  p.K = 20;
  p.M = 64;
  p.seed = 99;
  p.noise = NoiseSpec::waypoint(Eigen::Vector3d(1, 2, 3));
  const Eigen::VectorXd mean = Eigen::VectorXd::Zero(60);
  const SampleBatch a = sample_perturbations(mean, p, 4);
  const SampleBatch b = sample_perturbations(mean, p, 4);
  EXPECT_EQ(a.epsilons, b.epsilons);
  EXPECT_NE(a.epsilons, sample_perturbations(mean, p, 5).epsilons);
  p.seed = 100;
  EXPECT_NE(a.epsilons, sample_perturbations(mean, p, 4).epsilons);
}

TEST(Params, Validation) {
  MppiParams p;
  EXPECT_NO_THROW(p.validate());
  p.alpha = 1.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.sigma = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.K = 1;
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_NEAR(MppiParams{}.gamma(), 0.05, 1e-15);
}

// ---------------------------------------------------------------------------
// Rollout costs

TEST(RolloutCost, MatchesManualSum) {
  const int K = 15;
  const ControlSequence u = constant(K, 20, 0.1, 0.02);
  const GoalCost cost({500, 0, -100});
  const DynamicsParams dyn;
  const auto traj = rollout({0, 0, -100, 0}, u, dyn);
  double s = 0;
  for (int k = 0; k < K; ++k) s += cost.running(traj[k], {}, k);
  s += cost.terminal(traj[K]);
  EXPECT_NEAR(rollout_cost({0, 0, -100, 0}, u, cost, dyn, Eigen::Matrix3d::Zero()), s, 1e-9 * s);
  ControlSequence bad = u;
  bad(4, 1) = 1.6;
  EXPECT_TRUE(std::isinf(rollout_cost({}, bad, cost, dyn, Eigen::Matrix3d::Zero())));
}

// ---------------------------------------------------------------------------
// Projection-filtered step

TEST(PiMppi, ZeroNoiseFeasibleMeanIsFixedPoint) {
  for (Space space : {Space::Coefficient, Space::Waypoint}) {
    PiMppiConfig c = small_config(30, 16, Eigen::Vector3d::Zero(), 1);
    c.space = space;
    if (space == Space::Waypoint) c.mppi.noise = NoiseSpec::waypoint(Eigen::Vector3d::Zero());
    PiMppiController ctl(c, {20, 0.1, 0.05}, std::make_shared<PassthroughInitializer>());
    const ControlSequence mean = constant(30, 20, 0.1, 0.05);
    const ControlSequence out = ctl.step({0, 0, -100, 0}, mean, GoalCost({300, 300, -100}), nullptr, nullptr);
    EXPECT_LT((out - mean).cwiseAbs().maxCoeff(), 1e-6) << to_string(space);
  }
}

TEST(PiMppi, OutputSatisfiesBounds) {
  PiMppiConfig c = small_config(40, 64, Eigen::Vector3d(20, 2, 2), 7);
  PiMppiController ctl(c, {20, 0, 0});
  StepDiagnostics d;
  const ControlSequence out = ctl.step({0, 0, -100, 0}, constant(40, 20, 0, 0), GoalCost({300, 300, -100}), nullptr, &d);
  const ConstraintResiduals r = sequence_residuals(out, c.bounds, c.mppi.dt);
  // 50 iterations of the filter; the analytic derivatives of the plan and
  // its finite differences agree to O(dt).
  EXPECT_LT(d.plan_residuals.max_inequality(), 1e-2);
  EXPECT_LT(d.plan_residuals.equality, 1e-8);
  for (int ch = 0; ch < 3; ++ch) EXPECT_LT(r.inequality[ch][0], 1e-2);
  EXPECT_NEAR(out(0, 0), 20.0, 1e-8);
  EXPECT_GT(d.weight_entropy, 0.0);
}

TEST(PiMppi, DeterministicForFixedSeed) {
  auto run = [] {
    PiMppiController ctl(small_config(30, 32, Eigen::Vector3d(20, 2, 2), 42), {20, 0, 0});
    SampleBatch b;
    const ControlSequence out = ctl.step({0, 0, -100, 0}, constant(30, 20, 0, 0), GoalCost({300, 0, -100}), &b, nullptr);
    return std::pair{out, b};
  };
  const auto [o1, b1] = run();
  const auto [o2, b2] = run();
  EXPECT_EQ(o1, o2);
  EXPECT_EQ(b1.nus, b2.nus);
  EXPECT_EQ(b1.nus_projected, b2.nus_projected);
  EXPECT_EQ(b1.weights, b2.weights);
}

TEST(MpcLoop, SingleStep) {
  PiMppiController ctl(small_config(30, 16, Eigen::Vector3d(20, 2, 2), 3), {20, 0, 0});
  const OpenSky task({400, 0, -100});
  const State x0{0, 0, -100, 0};
  const MpcLog log = mpc_loop(x0, task, ctl, 1);
  ASSERT_EQ(log.states.size(), 2u);
  ASSERT_EQ(log.commanded.size(), 1u);
  EXPECT_EQ(log.diagnostics.size(), 1u);
  EXPECT_EQ(log.states[0], x0);
  // The pitch rate pinned at the trim start is zero.
  const State x1 = step(x0, log.commanded[0], 0.0, {});
  EXPECT_NEAR(log.states[1].p_n, x1.p_n, 1e-6);
  EXPECT_NEAR(log.states[1].p_e, x1.p_e, 1e-6);
  EXPECT_NEAR(log.states[1].p_d, x1.p_d, 1e-6);
  EXPECT_NEAR(log.states[1].psi, x1.psi, 1e-6);
  EXPECT_EQ(log.failure, Failure::None);
  EXPECT_THROW(mpc_loop(x0, task, ctl, 0), ConfigError);
}

TEST(MpcLoop, BoundaryFollowsCommandedControls) {
  PiMppiController ctl(small_config(30, 32, Eigen::Vector3d(20, 2, 2), 5), {20, 0, 0});
  const OpenSky task({300, 300, -120});
  const double dt = ctl.params().dt;
  State x{0, 0, -100, 0};
  std::vector<BoundaryConditions> bcs;
  std::vector<ControlPoint> cmd;
  for (int i = 0; i < 12; ++i) {
    bcs.push_back(ctl.boundary());
    const ControlSequence plan = ctl.plan(x, task.cost(), nullptr);
    cmd.push_back({plan(0, 0), plan(0, 1), plan(0, 2)});
    x = step(x, cmd.back(), (plan(1, 2) - plan(0, 2)) / dt, {});
    ctl.advance();
  }
  for (int i = 0; i < 12; ++i) {
    const double c[3] = {cmd[i].v, cmd[i].phi, cmd[i].theta};
    for (int ch = 0; ch < 3; ++ch) {
      // The command at step i is the pinned value, and the next command
      // moves away from it at the pinned rate.
      EXPECT_NEAR(c[ch], bcs[i].values[ch][0], 1e-8);
      if (i + 1 < 12) {
        const double n[3] = {cmd[i + 1].v, cmd[i + 1].phi, cmd[i + 1].theta};
        EXPECT_NEAR((n[ch] - c[ch]) / dt, bcs[i].values[ch][1], 1e-6);
      }
    }
  }
}

TEST(Shift, DropsFirstRepeatsLast) {
  ControlSequence u(3, 3);
  u << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  ControlSequence e(3, 3);
  e << 4, 5, 6, 7, 8, 9, 7, 8, 9;
  EXPECT_EQ(shift_sequence(u), e);
}

TEST(Entropy, UniformIsLogM) {
  EXPECT_NEAR(weight_entropy(Eigen::VectorXd::Constant(8, 0.125)), std::log(8.0), 1e-12);
  Eigen::VectorXd one = Eigen::VectorXd::Zero(5);
  one(2) = 1.0;
  EXPECT_EQ(weight_entropy(one), 0.0);
}
