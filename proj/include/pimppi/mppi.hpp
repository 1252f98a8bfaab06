#pragma once

#include "pimppi/basis.hpp"
#include "pimppi/dynamics.hpp"
#include "pimppi/projection.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace pimppi {

// Sampling-based MPC: perturb a mean control sequence, roll the perturbed
// sequences through the dynamics, weight them by cost and average.
//
// Flat layouts: a waypoint sequence is the channel-major vector of a K x 3
// ControlSequence (length 3K); a coefficient vector is [c_v; c_phi; c_theta]
// (length 3n). Batches store one sample per row.

/// Engine for sample `lane` of draw `stream` under `seed`. Every sample owns
/// its engine, so draws do not depend on how lanes are scheduled.
std::mt19937_64 lane_engine(std::uint64_t seed, std::uint64_t stream, std::uint64_t lane);

enum class NoiseSpace { Waypoint, Coefficient };

struct NoiseSpec {
  NoiseSpace space{NoiseSpace::Waypoint};
  /// Waypoint space: Sigma_k, shared by every k.
  Eigen::Matrix3d step_cov{Eigen::Matrix3d::Zero()};
  /// Coefficient space: Sigma_v, Sigma_phi, Sigma_theta (n x n each).
  std::array<Eigen::MatrixXd, kNumChannels> coeff_cov;

  static NoiseSpec waypoint(const Eigen::Vector3d& diagonal);
  /// Per-channel covariances scale * I_n.
  static NoiseSpec coefficient(const Eigen::Vector3d& scales, int n);
  /// Dimension of one draw for a horizon K.
  int dim(int K) const;
};

class CovarianceError : public Error {
 public:
  using Error::Error;
};

struct MppiParams {
  double sigma{5.0};
  double alpha{0.99};
  int M{256};
  int K{100};
  double dt{0.2};
  /// Control cost weight; the running cost gains 1/2 u^T R u.
  Eigen::Matrix3d R{Eigen::Matrix3d::Zero()};
  NoiseSpec noise;
  std::uint64_t seed{0};

  double gamma() const { return sigma * (1.0 - alpha); }
  /// Throws ConfigError on sigma <= 0, alpha outside (0, 1), M < 1 or K < 2.
  void validate() const;
};

/// Cost of a rollout: sum_k running(x_k, u_k, k) + terminal(x_K) plus an
/// optional term on the whole control sequence.
class CostFunction {
 public:
  virtual ~CostFunction() = default;
  virtual double running(const State& x, const ControlPoint& u, int k) const = 0;
  virtual double terminal(const State& x) const = 0;
  virtual double sequence(const ControlSequence& /*u*/) const { return 0.0; }
};

/// Rolls u out from x0 and accumulates its cost. A sequence that leaves the
/// model domain costs +infinity.
double rollout_cost(const State& x0, const ControlSequence& u, const CostFunction& cost,
                    const DynamicsParams& dynamics, const Eigen::Matrix3d& R);

/// Costs of every row of a waypoint batch (M x 3K).
Eigen::VectorXd batch_costs(const State& x0, const Eigen::Ref<const Eigen::MatrixXd>& sequences,
                            const CostFunction& cost, const DynamicsParams& dynamics,
                            const Eigen::Matrix3d& R);

struct SampleBatch {
  Eigen::MatrixXd epsilons;       // M x D, sampling space
  Eigen::MatrixXd nus;            // M x D, sampling space
  Eigen::MatrixXd nus_projected;  // M x D, decision space of the filter
  ControlSequence mean;           // u-bar
  std::vector<Eigen::Matrix3d> covariance;  // Sigma-bar_k
  Eigen::VectorXd costs;
  Eigen::VectorXd weights;
};

/// Draws M perturbations around `mean` (3K or 3n entries). Throws
/// CovarianceError when a covariance is not positive semidefinite.
SampleBatch sample_perturbations(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                 const MppiParams& params, std::uint64_t stream);

/// Weights from costs s, the mean sequence u, per-step covariances and the
/// sampled sequences (M x 3K):
///   w_m = exp(-(s~_m - rho) / sigma) / eta,   s~_m = s_m + gamma sum_k u_k^T S_k^{-1} nu_k
/// with S_k = Sigma_k + 1e-6 I and rho = min_m s~_m. Non-finite costs get
/// weight zero; throws Error when no cost is finite.
Eigen::VectorXd compute_weights(const Eigen::Ref<const Eigen::VectorXd>& costs,
                                const ControlSequence& mean,
                                const std::vector<Eigen::Matrix3d>& covariance,
                                const Eigen::Ref<const Eigen::MatrixXd>& nus,
                                const MppiParams& params);

/// Same without the control term (gamma = 0 or u = 0).
Eigen::VectorXd compute_weights(const Eigen::Ref<const Eigen::VectorXd>& costs, double sigma);

/// mean + sum_m w_m eps_m.
Eigen::VectorXd weighted_update(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                const Eigen::Ref<const Eigen::MatrixXd>& epsilons,
                                const Eigen::Ref<const Eigen::VectorXd>& weights);

struct SampleStatistics {
  ControlSequence mean;
  std::vector<Eigen::Matrix3d> covariance;  // unbiased, per k
  Eigen::MatrixXd epsilons;                 // nu_m - mean, M x 3K
};

/// Per-step sample mean and covariance of a waypoint batch (M x 3K).
SampleStatistics update_statistics(const Eigen::Ref<const Eigen::MatrixXd>& sequences, int K);

/// Shannon entropy of a weight vector, in nats.
double weight_entropy(const Eigen::Ref<const Eigen::VectorXd>& weights);

// ---------------------------------------------------------------------------
// Controllers

struct StepDiagnostics {
  double cost_min{0.0};
  double cost_mean{0.0};
  double weight_entropy{0.0};
  /// Bound violation of the returned plan per channel and order.
  ConstraintResiduals plan_residuals;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  /// Optimizes the plan for state x; row 0 of the result is the command.
  virtual ControlSequence plan(const State& x, const CostFunction& cost,
                               StepDiagnostics* diagnostics) = 0;
  /// Called after row 0 of the last plan has been applied.
  virtual void advance() = 0;
  /// Horizon K and step dt of the plans.
  virtual const MppiParams& params() const = 0;
};

/// Drops the first row and repeats the last one.
ControlSequence shift_sequence(const ControlSequence& u);

/// Initialization of the projection lanes; the default is all zeros.
class ProjectionInitializer {
 public:
  virtual ~ProjectionInitializer() = default;
  /// nus_waypoint: M x 3K sampled sequences; nus_decision: M x N filter
  /// inputs; bc: boundary values (channel, order) of this step.
  virtual BatchInit initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                               const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                               const BoundaryConditions& bc) const = 0;
  /// Iteration count to use instead of the solver's, or -1.
  virtual int iterations_override() const { return -1; }
  virtual std::string name() const = 0;
};

/// How the first-derivative boundary value at k = 0 is imposed on the plan.
enum class RatePin {
  /// The constraint rows of the filter (analytic derivative in coefficient
  /// space, forward difference in waypoint space).
  Constraint,
  /// Always the forward difference (u_1 - u_0) / dt, so the commanded
  /// controls of consecutive steps change at exactly the pinned rate.
  ForwardDifference,
};

struct PiMppiConfig {
  MppiParams mppi;
  Space space{Space::Coefficient};
  int n{11};
  DerivativeBounds bounds{DerivativeBounds::fixed_wing_defaults()};
  SolverOptions solver{100.0, 1.0, 50, 0.0, SlackRule::Shifted};
  RatePin rate_pin{RatePin::ForwardDifference};
  /// Shift the plan by one step between MPC iterations.
  bool shift{true};
  /// Iterations of the final projection of the averaged plan.
  int final_iters{50};
};

/// Projection-filtered MPPI. Every sample is projected onto the bounds and
/// the boundary conditions before the rollouts, the weights use the mean and
/// covariance of the projected samples, and the averaged plan is projected
/// once more.
class PiMppiController : public Controller {
 public:
  PiMppiController(PiMppiConfig config, const ControlPoint& trim,
                   std::shared_ptr<const ProjectionInitializer> init = nullptr,
                   const DynamicsParams& dynamics = {});

  std::string name() const override { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  ControlSequence plan(const State& x, const CostFunction& cost,
                       StepDiagnostics* diagnostics) override;
  void advance() override;
  const MppiParams& params() const override { return config_.mppi; }

  /// One full step from an explicit mean; exposes the sample batch.
  ControlSequence step(const State& x, const ControlSequence& mean_in, const CostFunction& cost,
                       SampleBatch* batch, StepDiagnostics* diagnostics);

  const BoundaryConditions& boundary() const { return bc_; }
  void set_boundary(const BoundaryConditions& bc);
  const ControlSequence& mean() const { return mean_; }
  void set_mean(const ControlSequence& mean) { mean_ = mean; }
  const ProjectionSolver& solver() const { return solver_; }
  const BasisMatrices* basis() const { return basis_.get(); }
  const PiMppiConfig& config() const { return config_; }

  /// Boundary values for the next step read off a plan at k = 1, clamped so
  /// the next filter problem stays feasible.
  BoundaryConditions next_boundary(const ControlSequence& plan) const;

 private:
  Eigen::VectorXd to_decision(const ControlSequence& u) const;
  ControlSequence to_waypoints(const Eigen::Ref<const Eigen::VectorXd>& z) const;
  Eigen::MatrixXd batch_to_waypoints(const Eigen::Ref<const Eigen::MatrixXd>& Z) const;

  PiMppiConfig config_;
  DynamicsParams dynamics_;
  std::shared_ptr<const BasisMatrices> basis_;
  ProjectionSolver solver_;
  std::shared_ptr<const ProjectionInitializer> init_;
  BoundaryConditions bc_;
  ControlSequence mean_;
  ControlSequence last_plan_;
  std::uint64_t stream_{0};
  std::string name_{"pi-mppi"};
};

// ---------------------------------------------------------------------------
// Closed loop

enum class Failure { None, Collision, Crash, Singularity };

const char* to_string(Failure failure);

/// Environment of a closed-loop run.
class Task {
 public:
  virtual ~Task() = default;
  virtual const CostFunction& cost() const = 0;
  virtual Failure check_failure(const State& x) const = 0;
  virtual double distance_to_goal(const State& x) const = 0;
};

struct MpcLog {
  std::vector<State> states;  // x_0 .. x_T
  std::vector<ControlPoint> commanded;
  std::vector<StepDiagnostics> diagnostics;
  Failure failure{Failure::None};
  int failure_step{-1};
  double seconds{0.0};
};

/// Plans, applies row 0 for one dt and advances, `steps` times or until the
/// task reports a failure.
MpcLog mpc_loop(const State& x0, const Task& task, Controller& controller, int steps,
                const DynamicsParams& dynamics = {});

/// One row per step: step, cost_min, cost_mean, weight_entropy, the plan
/// residual per channel and order, then the commanded v, phi, theta.
void write_diagnostics_csv(std::ostream& out, const MpcLog& log);

}  // namespace pimppi
