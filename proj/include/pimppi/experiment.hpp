#pragma once

#include "pimppi/baselines.hpp"
#include "pimppi/benchmarks.hpp"
#include "pimppi/warmstart.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pimppi {

// Benchmark harness: one configuration describes the scenario family, the
// bounds and every controller; trials differ only in their seeds.

enum class ControllerKind { PiMppi, PiMppiLearned, MppiSgf, MppiSgfHighCov, MppiSgfE, MppiPoly };

const char* to_string(ControllerKind kind);
ControllerKind parse_controller_kind(const std::string& text);
const std::vector<ControllerKind>& baseline_kinds();

/// Sampling covariances of one scenario family.
struct NoisePresets {
  Eigen::Vector3d pi_coefficient;  // Sigma_v, Sigma_phi, Sigma_theta scales
  Eigen::Vector3d sgf;             // diagonal Sigma_k
  Eigen::Vector3d sgf_high;
  Eigen::Vector3d poly;            // per-channel coefficient scale
  static NoisePresets defaults(ScenarioKind kind);
};

struct ExperimentConfig {
  ScenarioKind scenario{ScenarioKind::Obstacles};
  std::uint64_t seed{1};
  int trials{25};
  int steps{300};

  GeneratorSettings generator;
  ObstacleCostWeights obstacle_weights;
  TerrainCostWeights terrain_weights;
  /// When set, every trial uses these obstacles instead of generating them.
  std::optional<std::vector<Sphere>> obstacles;
  /// When set, every trial uses this terrain spectrum.
  std::optional<std::vector<Wave>> waves;

  DerivativeBounds bounds{DerivativeBounds::fixed_wing_defaults()};
  ControlPoint trim{20.0, 0.0, 0.0};

  int K{100};
  double dt{0.2};
  double sigma{5.0};
  double alpha{0.99};
  /// Baseline temperature; the baselines were tuned separately.
  double baseline_sigma{5.0};
  int M{256};
  int baseline_factor{4};

  Space space{Space::Coefficient};
  int n{11};
  SolverOptions solver{100.0, 1.0, 50, 0.0, SlackRule::Shifted};
  RatePin rate_pin{RatePin::ForwardDifference};
  InitKind init{InitKind::Zero};
  std::string weights_path;

  NoisePresets noise{NoisePresets::defaults(ScenarioKind::Obstacles)};
  SgfConfig sgf;
  PenaltyConfig penalty{default_penalty()};

  static PenaltyConfig default_penalty();
  /// Defaults of one scenario family, including its noise presets.
  static ExperimentConfig defaults(ScenarioKind kind);
  /// M = 1000, 4x for the baselines, 250 trials, 1000 steps.
  void apply_full_scale();
  void validate() const;
};

/// Scenario of trial `trial`.
Scenario make_trial_scenario(const ExperimentConfig& config, int trial);

std::uint64_t trial_seed(const ExperimentConfig& config, int trial);

/// Loads config.weights_path when the controller or init needs a network.
std::shared_ptr<const MlpWeights> load_experiment_weights(const ExperimentConfig& config, ControllerKind kind);

PiMppiConfig pi_mppi_config(const ExperimentConfig& config, std::uint64_t seed);
BaselineConfig baseline_config(const ExperimentConfig& config, ControllerKind kind, std::uint64_t seed);

std::unique_ptr<Controller> make_controller(const ExperimentConfig& config, ControllerKind kind,
                                            std::uint64_t seed,
                                            std::shared_ptr<const MlpWeights> weights = nullptr,
                                            std::shared_ptr<const ProjectionInitializer> init = nullptr);

struct TrialRun {
  TrialRecord record;
  MpcLog log;
};

TrialRun run_trial(const ExperimentConfig& config, ControllerKind kind, int trial,
                   std::shared_ptr<const MlpWeights> weights = nullptr,
                   std::shared_ptr<const ProjectionInitializer> init = nullptr);

/// Runs config.trials trials, in parallel across trials.
std::vector<TrialRun> run_trials(const ExperimentConfig& config, ControllerKind kind,
                                 std::shared_ptr<const MlpWeights> weights = nullptr);

}  // namespace pimppi
