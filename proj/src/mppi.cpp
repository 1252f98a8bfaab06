#include "pimppi/mppi.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

namespace pimppi {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Symmetric square root of a PSD matrix.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& S, const char* what) {
  if (S.rows() != S.cols()) throw DimensionError(std::string(what) + " is not square");
  if (!S.allFinite()) throw CovarianceError(std::string(what) + " has non-finite entries");
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, S.cwiseAbs().maxCoeff())) {
    throw CovarianceError(std::string(what) + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S);
  const Eigen::VectorXd ev = eig.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -1e-12 * scale) {
    throw CovarianceError(std::string(what) + " is not positive semidefinite");
  }
  return eig.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
}

}  // namespace

std::mt19937_64 lane_engine(std::uint64_t seed, std::uint64_t stream, std::uint64_t lane) {
  std::uint64_t key = splitmix64(seed);
  key = splitmix64(key ^ stream);
  key = splitmix64(key ^ (lane * 0xd1b54a32d192ed03ULL));
  return std::mt19937_64(key);
}

NoiseSpec NoiseSpec::waypoint(const Eigen::Vector3d& diagonal) {
  NoiseSpec spec;
  spec.space = NoiseSpace::Waypoint;
  spec.step_cov = diagonal.asDiagonal();
  return spec;
}

NoiseSpec NoiseSpec::coefficient(const Eigen::Vector3d& scales, int n) {
  NoiseSpec spec;
  spec.space = NoiseSpace::Coefficient;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    spec.coeff_cov[ch] = scales(ch) * Eigen::MatrixXd::Identity(n, n);
  }
  return spec;
}

int NoiseSpec::dim(int K) const {
  if (space == NoiseSpace::Waypoint) return kNumChannels * K;
  return static_cast<int>(coeff_cov[0].rows() + coeff_cov[1].rows() + coeff_cov[2].rows());
}

void MppiParams::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (M < 1) throw ConfigError("M must be at least 1");
  if (K < 2) throw ConfigError("K must be at least 2");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
}

// ---------------------------------------------------------------------------
// Rollouts

double rollout_cost(const State& x0, const ControlSequence& u, const CostFunction& cost,
                    const DynamicsParams& dynamics, const Eigen::Matrix3d& R) {
  const Eigen::Index K = u.rows();
  const bool control_cost = !R.isZero(0.0);
  double total = 0.0;
  State x = x0;
  try {
    for (Eigen::Index k = 0; k < K; ++k) {
      const ControlPoint c = ControlPoint::from_row(u, k);
      total += cost.running(x, c, static_cast<int>(k));
      if (control_cost) {
        const Eigen::Vector3d uk = u.row(k).transpose();
        total += 0.5 * uk.dot(R * uk);
      }
      const Eigen::Index next = k + 1 < K ? k + 1 : k;
      const Eigen::Index prev = k + 1 < K ? k : k - 1;
      const double theta_dot = K > 1 ? (u(next, 2) - u(prev, 2)) / dynamics.dt : 0.0;
      x = step(x, c, theta_dot, dynamics);
    }
  } catch (const SingularityError&) {
    return std::numeric_limits<double>::infinity();
  }
  total += cost.terminal(x);
  total += cost.sequence(u);
  return std::isnan(total) ? std::numeric_limits<double>::infinity() : total;
}

Eigen::VectorXd batch_costs(const State& x0, const Eigen::Ref<const Eigen::MatrixXd>& sequences,
                            const CostFunction& cost, const DynamicsParams& dynamics,
                            const Eigen::Matrix3d& R) {
  if (sequences.cols() % kNumChannels != 0) throw DimensionError("sequence width is not 3K");
  const Eigen::Index M = sequences.rows();
  const Eigen::Index K = sequences.cols() / kNumChannels;
  Eigen::VectorXd costs(M);
#pragma omp parallel for schedule(dynamic, 8)
  for (Eigen::Index m = 0; m < M; ++m) {
    const ControlSequence u = unflatten(sequences.row(m).transpose(), K);
    costs(m) = rollout_cost(x0, u, cost, dynamics, R);
  }
  return costs;
}

// ---------------------------------------------------------------------------
// Sampling and weights

SampleBatch sample_perturbations(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                 const MppiParams& params, std::uint64_t stream) {
  const NoiseSpec& noise = params.noise;
  const Eigen::Index D = mean.size();
  const int M = params.M;
  if (M < 1) throw ConfigError("M must be at least 1");

  // Draw the standard normals per lane, then colour them.
  std::vector<Eigen::MatrixXd> factors;
  std::vector<Eigen::Index> offsets;
  if (noise.space == NoiseSpace::Waypoint) {
    if (D % kNumChannels != 0) throw DimensionError("waypoint mean must have 3K entries");
    factors.push_back(psd_sqrt(noise.step_cov, "step covariance"));
  } else {
    Eigen::Index total = 0;
    for (int ch = 0; ch < kNumChannels; ++ch) {
      factors.push_back(psd_sqrt(noise.coeff_cov[ch], kChannelNames[ch]));
      offsets.push_back(total);
      total += noise.coeff_cov[ch].rows();
    }
    if (total != D) throw DimensionError("coefficient covariances do not match the mean");
  }

  SampleBatch batch;
  batch.epsilons.resize(M, D);
  const Eigen::Index K = D / kNumChannels;
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    std::mt19937_64 engine = lane_engine(params.seed, stream, static_cast<std::uint64_t>(m));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(D);
    for (Eigen::Index i = 0; i < D; ++i) z(i) = normal(engine);
    if (noise.space == NoiseSpace::Waypoint) {
      // z is drawn step by step: (v, phi, theta) of k = 0, then k = 1, ...
      const Eigen::Map<const Eigen::MatrixXd> steps(z.data(), kNumChannels, K);
      const Eigen::MatrixXd coloured = factors[0] * steps;
      for (int ch = 0; ch < kNumChannels; ++ch) {
        batch.epsilons.row(m).segment(ch * K, K) = coloured.row(ch);
      }
    } else {
      for (int ch = 0; ch < kNumChannels; ++ch) {
        const Eigen::Index n = factors[ch].rows();
        batch.epsilons.row(m).segment(offsets[ch], n) =
            (factors[ch] * z.segment(offsets[ch], n)).transpose();
      }
    }
  }
  batch.nus = batch.epsilons.rowwise() + mean.transpose();
  return batch;
}

Eigen::VectorXd compute_weights(const Eigen::Ref<const Eigen::VectorXd>& costs,
                                const ControlSequence& mean,
                                const std::vector<Eigen::Matrix3d>& covariance,
                                const Eigen::Ref<const Eigen::MatrixXd>& nus,
                                const MppiParams& params) {
  const Eigen::Index M = costs.size();
  const Eigen::Index K = mean.rows();
  if (nus.rows() != M || nus.cols() != kNumChannels * K) {
    throw DimensionError("sample matrix does not match costs and mean");
  }
  if (static_cast<Eigen::Index>(covariance.size()) != K) {
    throw DimensionError("one covariance per time step expected");
  }
  // a_k = (Sigma_k + 1e-6 I)^{-1} u_k, so the control term of sample m is a . nu_m.
  ControlSequence a(K, kNumChannels);
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::Matrix3d S = covariance[static_cast<std::size_t>(k)] + 1e-6 * Eigen::Matrix3d::Identity();
    a.row(k) = S.ldlt().solve(mean.row(k).transpose()).transpose();
  }
  const Eigen::VectorXd shaped = costs + params.gamma() * (nus * flat(a));
  return compute_weights(shaped, params.sigma);
}

Eigen::VectorXd compute_weights(const Eigen::Ref<const Eigen::VectorXd>& costs, double sigma) {
  const Eigen::Index M = costs.size();
  if (M == 0) throw DimensionError("no costs");
  double rho = std::numeric_limits<double>::infinity();
  for (Eigen::Index m = 0; m < M; ++m) {
    if (std::isfinite(costs(m))) rho = std::min(rho, costs(m));
  }
  if (!std::isfinite(rho)) throw Error("every rollout cost is non-finite");
  Eigen::VectorXd w(M);
  double eta = 0.0;
  for (Eigen::Index m = 0; m < M; ++m) {
    w(m) = std::isfinite(costs(m)) ? std::exp(-(costs(m) - rho) / sigma) : 0.0;
    eta += w(m);
  }
  return w / eta;
}

Eigen::VectorXd weighted_update(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                const Eigen::Ref<const Eigen::MatrixXd>& epsilons,
                                const Eigen::Ref<const Eigen::VectorXd>& weights) {
  if (epsilons.rows() != weights.size() || epsilons.cols() != mean.size()) {
    throw DimensionError("weighted update dimensions do not match");
  }
  return mean + epsilons.transpose() * weights;
}

SampleStatistics update_statistics(const Eigen::Ref<const Eigen::MatrixXd>& sequences, int K) {
  const Eigen::Index M = sequences.rows();
  if (M < 2) throw DimensionError("sample covariance needs M >= 2");
  if (sequences.cols() != kNumChannels * K) throw DimensionError("sequence width is not 3K");
  SampleStatistics out;
  const Eigen::VectorXd mean = sequences.colwise().mean().transpose();
  out.mean = unflatten(mean, K);
  out.epsilons = sequences.rowwise() - mean.transpose();
  out.covariance.resize(static_cast<std::size_t>(K));
  Eigen::Matrix<double, Eigen::Dynamic, kNumChannels> block(M, kNumChannels);
  for (int k = 0; k < K; ++k) {
    for (int ch = 0; ch < kNumChannels; ++ch) block.col(ch) = out.epsilons.col(ch * K + k);
    out.covariance[static_cast<std::size_t>(k)] =
        (block.transpose() * block) / static_cast<double>(M - 1);
  }
  return out;
}

double weight_entropy(const Eigen::Ref<const Eigen::VectorXd>& weights) {
  double h = 0.0;
  for (Eigen::Index m = 0; m < weights.size(); ++m) {
    if (weights(m) > 0.0) h -= weights(m) * std::log(weights(m));
  }
  return h;
}

ControlSequence shift_sequence(const ControlSequence& u) {
  const Eigen::Index K = u.rows();
  ControlSequence out(K, kNumChannels);
  if (K == 0) return out;
  out.topRows(K - 1) = u.bottomRows(K - 1);
  out.row(K - 1) = u.row(K - 1);
  return out;
}

// ---------------------------------------------------------------------------
// pi-MPPI

namespace {

ConstraintSet controller_constraints(const PiMppiConfig& config, const BasisMatrices* basis,
                                     const BoundaryConditions& bc) {
  ConstraintOptions options;
  options.clamp_infeasible = true;
  options.equality_rows = config.rate_pin == RatePin::ForwardDifference
                              ? EqualityRows::ForwardDifference
                              : EqualityRows::Analytic;
  return build_constraints(config.bounds, bc, config.space, basis, config.mppi.K, config.mppi.dt,
                           options);
}

std::shared_ptr<const BasisMatrices> controller_basis(const PiMppiConfig& config) {
  if (config.space != Space::Coefficient) return nullptr;
  const MppiParams& p = config.mppi;
  return std::make_shared<const BasisMatrices>(build_basis(p.K, config.n, (p.K - 1) * p.dt));
}

void check_noise(const PiMppiConfig& config) {
  const NoiseSpec& noise = config.mppi.noise;
  if (config.space == Space::Waypoint && noise.space != NoiseSpace::Waypoint) {
    throw ConfigError("waypoint filtering needs waypoint noise");
  }
  if (config.space == Space::Coefficient) {
    if (noise.space != NoiseSpace::Coefficient) throw ConfigError("coefficient filtering needs coefficient noise");
    for (int ch = 0; ch < kNumChannels; ++ch) {
      if (noise.coeff_cov[ch].rows() != config.n) {
        throw ConfigError("coefficient covariance size differs from n");
      }
    }
  }
}

}  // namespace

PiMppiController::PiMppiController(PiMppiConfig config, const ControlPoint& trim,
                                   std::shared_ptr<const ProjectionInitializer> init,
                                   const DynamicsParams& dynamics)
    : config_(std::move(config)),
      dynamics_(dynamics),
      basis_(controller_basis(config_)),
      solver_(controller_constraints(config_, basis_.get(),
                                     BoundaryConditions::from_control(trim.v, trim.phi, trim.theta)),
              config_.solver),
      init_(std::move(init)) {
  config_.mppi.validate();
  check_noise(config_);
  dynamics_.dt = config_.mppi.dt;
  bc_ = BoundaryConditions::from_control(trim.v, trim.phi, trim.theta);
  mean_ = ControlSequence(config_.mppi.K, kNumChannels);
  mean_.col(0).setConstant(trim.v);
  mean_.col(1).setConstant(trim.phi);
  mean_.col(2).setConstant(trim.theta);
  last_plan_ = mean_;
}

void PiMppiController::set_boundary(const BoundaryConditions& bc) {
  solver_ = solver_.with_boundary(bc, true);
  // Keep the stored conditions identical to what the solver enforces.
  bc_ = check_boundary(bc, config_.bounds, solver_.constraints().equality_max_order, true);
}

Eigen::VectorXd PiMppiController::to_decision(const ControlSequence& u) const {
  if (basis_) return controls_to_stacked(u, *basis_);
  return flat(u);
}

ControlSequence PiMppiController::to_waypoints(const Eigen::Ref<const Eigen::VectorXd>& z) const {
  if (basis_) return stacked_to_controls(z, *basis_);
  return unflatten(z, config_.mppi.K);
}

Eigen::MatrixXd PiMppiController::batch_to_waypoints(const Eigen::Ref<const Eigen::MatrixXd>& Z) const {
  if (!basis_) return Z;
  const int K = config_.mppi.K;
  const int n = config_.n;
  Eigen::MatrixXd out(Z.rows(), kNumChannels * K);
  for (int ch = 0; ch < kNumChannels; ++ch) {
    out.middleCols(ch * K, K).noalias() = Z.middleCols(ch * n, n) * basis_->W.transpose();
  }
  return out;
}

ControlSequence PiMppiController::step(const State& x, const ControlSequence& mean_in,
                                       const CostFunction& cost, SampleBatch* batch_out,
                                       StepDiagnostics* diagnostics) {
  const MppiParams& p = config_.mppi;
  if (mean_in.rows() != p.K) throw DimensionError("mean sequence length differs from K");

  SampleBatch batch = sample_perturbations(to_decision(mean_in), p, stream_++);

  BatchInit init;
  int iterations = -1;
  if (init_) {
    init = init_->initialize(batch_to_waypoints(batch.nus), batch.nus, bc_);
    iterations = init_->iterations_override();
  }
  batch.nus_projected = batch_project(batch.nus, solver_, init, iterations);

  const Eigen::MatrixXd sequences = batch_to_waypoints(batch.nus_projected);
  SampleStatistics stats = update_statistics(sequences, p.K);
  batch.costs = batch_costs(x, sequences, cost, dynamics_, p.R);
  batch.weights = compute_weights(batch.costs, stats.mean, stats.covariance, sequences, p);

  // The update is linear, so in coefficient space it is carried out on the
  // coefficients: W (c_bar + sum_m w_m eps_m) = u_bar + sum_m w_m W eps_m.
  const Eigen::VectorXd mean_decision = batch.nus_projected.colwise().mean().transpose();
  const Eigen::MatrixXd eps_decision = batch.nus_projected.rowwise() - mean_decision.transpose();
  const Eigen::VectorXd updated = weighted_update(mean_decision, eps_decision, batch.weights);

  AdmmInit final_init;
  final_init.nu_bar = updated;
  const ProjectionResult final = project(updated, solver_, final_init, config_.final_iters);
  ControlSequence out = to_waypoints(final.nu_bar);

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
    diagnostics->plan_residuals = constraint_residuals(final.nu_bar, solver_.constraints());
  }
  if (batch_out) {
    batch.mean = std::move(stats.mean);
    batch.covariance = std::move(stats.covariance);
    *batch_out = std::move(batch);
  }
  return out;
}

ControlSequence PiMppiController::plan(const State& x, const CostFunction& cost,
                                       StepDiagnostics* diagnostics) {
  last_plan_ = step(x, mean_, cost, nullptr, diagnostics);
  return last_plan_;
}

BoundaryConditions PiMppiController::next_boundary(const ControlSequence& plan) const {
  const double dt = config_.mppi.dt;
  if (plan.rows() < 4) throw DimensionError("boundary update needs K >= 4");
  BoundaryConditions bc;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    double value = plan(1, ch);
    double rate = (plan(2, ch) - plan(1, ch)) / dt;
    if (basis_ && config_.rate_pin == RatePin::Constraint) {
      const Eigen::VectorXd c = basis_->W_pinv * plan.col(ch);
      rate = basis_->Wdot.row(1).dot(c);
    }
    double accel = (plan(3, ch) - 2.0 * plan(2, ch) + plan(1, ch)) / (dt * dt);

    if (const auto& b0 = config_.bounds.at(ch, 0)) {
      value = b0->clamp(value);
      // Keep the next command value + rate * dt inside the value bounds.
      rate = std::clamp(rate, (b0->min - value) / dt, (b0->max - value) / dt);
    }
    if (const auto& b1 = config_.bounds.at(ch, 1)) rate = b1->clamp(rate);
    if (const auto& b2 = config_.bounds.at(ch, 2)) accel = b2->clamp(accel);
    bc.values[ch] = {value, rate, accel};
  }
  return bc;
}

void PiMppiController::advance() {
  set_boundary(next_boundary(last_plan_));
  mean_ = config_.shift ? shift_sequence(last_plan_) : last_plan_;
}

// ---------------------------------------------------------------------------
// Closed loop

const char* to_string(Failure failure) {
  switch (failure) {
    case Failure::None: return "none";
    case Failure::Collision: return "collision";
    case Failure::Crash: return "crash";
    case Failure::Singularity: return "singularity";
  }
  return "unknown";
}

MpcLog mpc_loop(const State& x0, const Task& task, Controller& controller, int steps,
                const DynamicsParams& dynamics) {
  if (steps < 1) throw ConfigError("steps must be at least 1");
  DynamicsParams sim = dynamics;
  sim.dt = controller.params().dt;

  const auto start = std::chrono::steady_clock::now();
  MpcLog log;
  log.states.push_back(x0);
  State x = x0;
  for (int i = 0; i < steps; ++i) {
    StepDiagnostics diag;
    const ControlSequence plan = controller.plan(x, task.cost(), &diag);
    const ControlPoint u = ControlPoint::from_row(plan, 0);
    const double theta_dot = (plan(1, 2) - plan(0, 2)) / sim.dt;
    log.commanded.push_back(u);
    log.diagnostics.push_back(diag);
    try {
      x = step(x, u, theta_dot, sim);
    } catch (const SingularityError&) {
      log.failure = Failure::Singularity;
      log.failure_step = i;
      break;
    }
    log.states.push_back(x);
    const Failure f = task.check_failure(x);
    if (f != Failure::None) {
      log.failure = f;
      log.failure_step = i;
      break;
    }
    controller.advance();
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

void write_diagnostics_csv(std::ostream& out, const MpcLog& log) {
  out << "step,cost_min,cost_mean,weight_entropy";
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) out << ",res_" << kChannelNames[ch] << "_d" << j;
  }
  out << ",v,phi,theta\n";
  out.precision(17);
  for (std::size_t i = 0; i < log.diagnostics.size(); ++i) {
    const StepDiagnostics& d = log.diagnostics[i];
    out << i << ',' << d.cost_min << ',' << d.cost_mean << ',' << d.weight_entropy;
    for (int ch = 0; ch < kNumChannels; ++ch) {
      for (int j = 0; j < 3; ++j) out << ',' << d.plan_residuals.inequality[ch][j];
    }
    const ControlPoint& u = log.commanded[i];
    out << ',' << u.v << ',' << u.phi << ',' << u.theta << '\n';
  }
}

}  // namespace pimppi
