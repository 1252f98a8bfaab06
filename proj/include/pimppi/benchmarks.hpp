#pragma once

#include "pimppi/mppi.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pimppi {

// Benchmark scenarios: a sphere field with a goal to reach and orbit, and a
// terrain band to follow towards a 2D goal. Positions are north-east-down.

struct Sphere {
  Eigen::Vector3d center;  // NED, m
  double radius{0.0};      // m
};

struct ObstacleCostWeights {
  double goal{1e-3};
  double obstacle{1e3};
  double terminal{1.0};  // scale of the terminal state cost
};

class ObstacleField {
 public:
  ObstacleField() = default;
  ObstacleField(std::vector<Sphere> obstacles, Eigen::Vector3d extent_min, Eigen::Vector3d extent_max,
                Eigen::Vector3d goal, double vehicle_radius);

  const std::vector<Sphere>& obstacles() const { return obstacles_; }
  const Eigen::Vector3d& extent_min() const { return extent_min_; }
  const Eigen::Vector3d& extent_max() const { return extent_max_; }
  const Eigen::Vector3d& goal() const { return goal_; }
  double vehicle_radius() const { return vehicle_radius_; }

  /// sum_o max(0, r_o + r_fwv - |p - p_o|).
  double penetration(const Eigen::Vector3d& p) const;
  /// True iff |p - p_o| < r_o + r_fwv for some obstacle.
  bool collides(const Eigen::Vector3d& p) const;

 private:
  void build_index();
  template <typename F>
  void for_nearby(const Eigen::Vector3d& p, F&& f) const;

  std::vector<Sphere> obstacles_;
  Eigen::Vector3d extent_min_{Eigen::Vector3d::Zero()};
  Eigen::Vector3d extent_max_{Eigen::Vector3d::Zero()};
  Eigen::Vector3d goal_{Eigen::Vector3d::Zero()};
  double vehicle_radius_{0.0};
  // Uniform north-east grid; each cell lists the obstacles whose inflated
  // footprint overlaps it.
  double cell_{1.0};
  Eigen::Vector2d extent_lo_{Eigen::Vector2d::Zero()};
  int cells_n_{0};
  int cells_e_{0};
  std::vector<std::vector<int>> grid_;
};

struct Wave {
  double amplitude{0.0};
  double k_n{0.0};  // rad/m
  double k_e{0.0};  // rad/m
  double phase{0.0};
};

struct TerrainCostWeights {
  double goal{1.0};
  double band{10.0};
  double terminal{1.0};
};

class Terrain {
 public:
  Terrain() = default;
  /// Surface 50 + 50 * sum_i a_i sin(k_i . p + phase_i) / sum_i |a_i|, in [0, 100] m.
  Terrain(std::vector<Wave> waves, double extent, Eigen::Vector2d goal, double band_min = 5.0,
          double band_max = 15.0);

  double height(double p_n, double p_e) const;
  const std::vector<Wave>& waves() const { return waves_; }
  double extent() const { return extent_; }
  const Eigen::Vector2d& goal() const { return goal_; }
  double band_min() const { return band_min_; }
  double band_max() const { return band_max_; }
  /// max(0, z_min - z) + max(0, z - z_max) with z = -p_d and the band taken
  /// over the surface below the vehicle.
  double band_violation(const State& x) const;

 private:
  std::vector<Wave> waves_;
  double norm_{1.0};
  double extent_{4000.0};
  Eigen::Vector2d goal_{Eigen::Vector2d::Zero()};
  double band_min_{5.0};
  double band_max_{15.0};
};

enum class ScenarioKind { Obstacles, Terrain };

const char* to_string(ScenarioKind kind);
ScenarioKind parse_scenario_kind(const std::string& text);

struct Scenario {
  ScenarioKind kind{ScenarioKind::Obstacles};
  std::uint64_t seed{0};
  ObstacleField obstacles;
  ObstacleCostWeights obstacle_weights;
  Terrain terrain;
  TerrainCostWeights terrain_weights;
  State start;
  ControlPoint trim{20.0, 0.0, 0.0};
};

/// Placement settings of the generator.
struct GeneratorSettings {
  // Obstacles.
  int obstacle_count{100};
  double radius_min{20.0};
  double radius_max{30.0};
  double workspace{2000.0};
  double ceiling{400.0};
  double vehicle_radius{5.0};
  Eigen::Vector3d obstacle_start{600.0, 600.0, -200.0};
  Eigen::Vector3d obstacle_goal{1200.0, 1200.0, -200.0};
  double start_clearance{100.0};
  double goal_clearance{150.0};
  int max_attempts{100000};
  // Terrain.
  int waves{12};
  double terrain_extent{4000.0};
  double wavelength_min{800.0};
  double wavelength_max{4000.0};
  Eigen::Vector2d terrain_start{1000.0, 1000.0};
  Eigen::Vector2d terrain_goal{1700.0, 1700.0};
  double start_height{10.0};
};

/// Pure function of (kind, seed, settings).
Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed, const GeneratorSettings& settings = {});

/// w_goal |p - p_g|^2 + w_obs * penetration(p).
double obstacle_cost(const State& x, const ObstacleField& field, const ObstacleCostWeights& w);
/// w_goal |(p_n, p_e) - goal| + w_band * band_violation(x).
double terrain_cost(const State& x, const Terrain& terrain, const TerrainCostWeights& w);

Failure check_failure(const State& x, const Scenario& scenario);

/// Task adapter for mpc_loop. Keeps a reference to the scenario.
class ScenarioTask : public Task {
 public:
  explicit ScenarioTask(const Scenario& scenario);
  const CostFunction& cost() const override { return *cost_; }
  Failure check_failure(const State& x) const override;
  double distance_to_goal(const State& x) const override;

 private:
  const Scenario& scenario_;
  std::unique_ptr<CostFunction> cost_;
};

// ---------------------------------------------------------------------------
// Metrics

/// Per channel and derivative order.
using OrderTable = std::array<std::array<double, 3>, kNumChannels>;

struct TrialRecord {
  bool success{false};
  Failure failure{Failure::None};
  int steps{0};  // MPC steps executed
  std::vector<ControlPoint> commanded;
  std::vector<double> distances;  // after every executed step
  double seconds{0.0};
};

TrialRecord make_trial_record(const MpcLog& log, const Task& task, int planned_steps);

/// Violations of the commanded controls and of their finite-difference rates
/// (u_{i+1} - u_i) / dt_sim and second rates, per channel and order.
std::array<std::array<std::vector<double>, 3>, kNumChannels> commanded_violations(
    const std::vector<ControlPoint>& commanded, const DerivativeBounds& bounds, double dt_sim);

struct Metrics {
  int trials{0};
  int successes{0};
  double success_rate{0.0};      // percent
  double avg_dist_to_goal{0.0};  // over successful trials, NaN without any
  OrderTable residual_mean{};
  OrderTable residual_max{};
};

/// Residuals are pooled over every commanded step of every trial; the goal
/// distance is averaged over the last `window` fraction of the steps of
/// each successful trial.
Metrics compute_metrics(const std::vector<TrialRecord>& trials, const DerivativeBounds& bounds,
                        double dt_sim, double window = 0.4);

}  // namespace pimppi
