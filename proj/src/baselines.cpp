#include "pimppi/baselines.hpp"

#include <cmath>
#include <limits>

namespace pimppi {

void SgfConfig::validate() const {
  if (window < 1 || window % 2 == 0) throw ConfigError("SGF window must be odd");
  if (order < 0 || order >= window) throw ConfigError("SGF order must be below the window");
}

namespace {

// Rows evaluate the least-squares polynomial of the window at each window
// position: E = V (V^T V)^{-1} V^T on centred, scaled abscissae.
Eigen::MatrixXd sgf_window_operator(const SgfConfig& config) {
  const int w = config.window;
  const int half = w / 2;
  Eigen::MatrixXd V(w, config.order + 1);
  for (int i = 0; i < w; ++i) {
    const double t = half > 0 ? static_cast<double>(i - half) / half : 0.0;
    double power = 1.0;
    for (int j = 0; j <= config.order; ++j) {
      V(i, j) = power;
      power *= t;
    }
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(V);
  return V * qr.solve(Eigen::MatrixXd::Identity(w, w));
}

}  // namespace

ControlSequence sgf_smooth(const ControlSequence& u, const SgfConfig& config) {
  config.validate();
  const Eigen::Index K = u.rows();
  const int w = config.window;
  const int half = w / 2;
  if (K < w) throw DimensionError("sequence shorter than the SGF window");
  const Eigen::MatrixXd E = sgf_window_operator(config);

  ControlSequence out(K, kNumChannels);
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const auto x = u.col(ch);
    for (Eigen::Index k = 0; k < K; ++k) {
      Eigen::Index first = k - half;
      Eigen::Index row = half;
      if (first < 0) {
        row = k;
        first = 0;
      } else if (first + w > K) {
        first = K - w;
        row = k - first;
      }
      out(k, ch) = E.row(row).dot(x.segment(first, w));
    }
  }
  return out;
}

ControlSequence clip_controls(const ControlSequence& u, const DerivativeBounds& bounds) {
  ControlSequence out = u;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    if (const auto& b = bounds.at(ch, 0)) {
      out.col(ch) = out.col(ch).cwiseMax(b->min).cwiseMin(b->max);
    }
  }
  return out;
}

void PenaltyConfig::validate() const {
  for (const auto& channel : weights) {
    for (double w : channel) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("penalty weights must be >= 0");
    }
  }
}

double bound_penalty(const ControlSequence& u, const DerivativeBounds& bounds,
                     const PenaltyConfig& penalties, double dt) {
  const Eigen::Index K = u.rows();
  double total = 0.0;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const auto x = u.col(ch);
    for (int j = 0; j < 3; ++j) {
      const double w = penalties.weights[ch][j];
      const auto& b = bounds.at(ch, j);
      if (w == 0.0 || !b || K - j < 1) continue;
      double sum = 0.0;
      for (Eigen::Index k = 0; k + j < K; ++k) {
        double value = x(k);
        if (j == 1) value = (x(k + 1) - x(k)) / dt;
        if (j == 2) value = (x(k + 2) - 2.0 * x(k + 1) + x(k)) / (dt * dt);
        sum += b->violation(value);
      }
      total += w * sum;
    }
  }
  return total;
}

PenaltyAugmentedCost::PenaltyAugmentedCost(const CostFunction& base, DerivativeBounds bounds,
                                           PenaltyConfig penalties, double dt)
    : base_(base), bounds_(std::move(bounds)), penalties_(penalties), dt_(dt) {
  penalties_.validate();
}

double PenaltyAugmentedCost::running(const State& x, const ControlPoint& u, int k) const {
  return base_.running(x, u, k);
}

double PenaltyAugmentedCost::terminal(const State& x) const { return base_.terminal(x); }

double PenaltyAugmentedCost::sequence(const ControlSequence& u) const {
  return base_.sequence(u) + bound_penalty(u, bounds_, penalties_, dt_);
}

PenaltyAugmentedCost penalty_augmented_cost(const CostFunction& base, const DerivativeBounds& bounds,
                                            const PenaltyConfig& penalties, double dt) {
  return PenaltyAugmentedCost(base, bounds, penalties, dt);
}

// ---------------------------------------------------------------------------

BaselineController::BaselineController(BaselineConfig config, const ControlPoint& trim,
                                       std::string name, const DynamicsParams& dynamics)
    : config_(std::move(config)), dynamics_(dynamics), name_(std::move(name)) {
  config_.mppi.validate();
  config_.sgf.validate();
  if (config_.penalty) config_.penalty->validate();
  const MppiParams& p = config_.mppi;
  if (p.noise.space == NoiseSpace::Coefficient) {
    for (int ch = 0; ch < kNumChannels; ++ch) {
      if (p.noise.coeff_cov[ch].rows() != config_.n) {
        throw ConfigError("coefficient covariance size differs from n");
      }
    }
    basis_ = std::make_shared<const BasisMatrices>(build_basis(p.K, config_.n, (p.K - 1) * p.dt));
  }
  dynamics_.dt = p.dt;
  mean_ = ControlSequence(p.K, kNumChannels);
  mean_.col(0).setConstant(trim.v);
  mean_.col(1).setConstant(trim.phi);
  mean_.col(2).setConstant(trim.theta);
  last_plan_ = mean_;
}

ControlSequence BaselineController::step(const State& x, const ControlSequence& mean_in,
                                         const CostFunction& cost, SampleBatch* batch_out,
                                         StepDiagnostics* diagnostics) {
  const MppiParams& p = config_.mppi;
  const int K = p.K;
  if (mean_in.rows() != K) throw DimensionError("mean sequence length differs from K");
  const Eigen::VectorXd mean = flat(mean_in);

  SampleBatch batch;
  if (basis_) {
    // Noise on the coefficients, mapped to waypoints: eps_k = W_k eps_c.
    const SampleBatch coeff =
        sample_perturbations(Eigen::VectorXd::Zero(kNumChannels * config_.n), p, stream_++);
    batch.epsilons.resize(p.M, kNumChannels * K);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      batch.epsilons.middleCols(ch * K, K).noalias() =
          coeff.epsilons.middleCols(ch * config_.n, config_.n) * basis_->W.transpose();
    }
  } else {
    batch = sample_perturbations(Eigen::VectorXd::Zero(kNumChannels * K), p, stream_++);
  }

  // Clip every sample; the effective perturbation is clip(nu) - u.
  batch.nus.resize(p.M, kNumChannels * K);
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const auto& b = config_.bounds.at(ch, 0);
    for (int k = 0; k < K; ++k) {
      const Eigen::Index col = ch * K + k;
      for (int m = 0; m < p.M; ++m) {
        const double v = mean(col) + batch.epsilons(m, col);
        batch.nus(m, col) = b ? b->clamp(v) : v;
      }
    }
  }
  batch.epsilons = batch.nus.rowwise() - mean.transpose();

  if (config_.penalty) {
    const PenaltyAugmentedCost augmented(cost, config_.bounds, *config_.penalty, p.dt);
    batch.costs = batch_costs(x, batch.nus, augmented, dynamics_, p.R);
  } else {
    batch.costs = batch_costs(x, batch.nus, cost, dynamics_, p.R);
  }
  const std::vector<Eigen::Matrix3d> covariance(static_cast<std::size_t>(K), config_.weight_cov);
  batch.weights = compute_weights(batch.costs, mean_in, covariance, batch.nus, p);

  const Eigen::VectorXd updated = weighted_update(mean, batch.epsilons, batch.weights);
  ControlSequence out = sgf_smooth(unflatten(updated, K), config_.sgf);

  if (diagnostics) {
    double cmin = std::numeric_limits<double>::infinity();
    double csum = 0.0;
    int finite = 0;
    for (Eigen::Index m = 0; m < batch.costs.size(); ++m) {
      if (!std::isfinite(batch.costs(m))) continue;
      cmin = std::min(cmin, batch.costs(m));
      csum += batch.costs(m);
      ++finite;
    }
    diagnostics->cost_min = cmin;
    diagnostics->cost_mean = finite > 0 ? csum / finite : cmin;
    diagnostics->weight_entropy = weight_entropy(batch.weights);
    diagnostics->plan_residuals = sequence_residuals(out, config_.bounds, p.dt);
  }
  if (batch_out) {
    batch.mean = mean_in;
    batch.covariance = covariance;
    *batch_out = std::move(batch);
  }
  return out;
}

ControlSequence BaselineController::plan(const State& x, const CostFunction& cost,
                                         StepDiagnostics* diagnostics) {
  last_plan_ = step(x, mean_, cost, nullptr, diagnostics);
  return last_plan_;
}

void BaselineController::advance() {
  mean_ = config_.shift ? shift_sequence(last_plan_) : last_plan_;
}

}  // namespace pimppi
