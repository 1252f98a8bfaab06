#include "pimppi/experiment.hpp"

#include <exception>

namespace pimppi {

const char* to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::PiMppi: return "pi-mppi";
    case ControllerKind::PiMppiLearned: return "pi-mppi-learned";
    case ControllerKind::MppiSgf: return "mppiwsgf";
    case ControllerKind::MppiSgfHighCov: return "mppiwsgf-high-cov";
    case ControllerKind::MppiSgfE: return "mppiwsgf-e";
    case ControllerKind::MppiPoly: return "mppi-poly";
  }
  return "unknown";
}

ControllerKind parse_controller_kind(const std::string& text) {
  for (ControllerKind k : {ControllerKind::PiMppi, ControllerKind::PiMppiLearned, ControllerKind::MppiSgf,
                           ControllerKind::MppiSgfHighCov, ControllerKind::MppiSgfE, ControllerKind::MppiPoly}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("unknown controller '" + text + "'");
}

const std::vector<ControllerKind>& baseline_kinds() {
  static const std::vector<ControllerKind> kinds{ControllerKind::MppiSgf, ControllerKind::MppiSgfHighCov,
                                                 ControllerKind::MppiSgfE, ControllerKind::MppiPoly};
  return kinds;
}

NoisePresets NoisePresets::defaults(ScenarioKind kind) {
  NoisePresets p;
  if (kind == ScenarioKind::Obstacles) {
    p.pi_coefficient = {20.0, 2.0, 2.0};
    p.sgf = {0.02, 0.0002, 0.0003};
    p.sgf_high = {0.1, 0.001, 0.0015};
  } else {
    p.pi_coefficient = {100.0, 3.0, 0.6};
    p.sgf = {0.008, 0.0015, 0.006};
    p.sgf_high = {0.04, 0.0075, 0.03};
  }
  p.poly = {0.02, 0.0002, 0.002};
  return p;
}

PenaltyConfig ExperimentConfig::default_penalty() {
  PenaltyConfig p;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    p.weights[ch] = {0.0, 100.0, 10.0};
  }
  return p;
}

ExperimentConfig ExperimentConfig::defaults(ScenarioKind kind) {
  ExperimentConfig c;
  c.scenario = kind;
  c.noise = NoisePresets::defaults(kind);
  return c;
}

void ExperimentConfig::apply_full_scale() {
  M = 1000;
  baseline_factor = 4;
  trials = 250;
  steps = 1000;
}

void ExperimentConfig::validate() const {
  bounds.validate();
  if (trials < 1) throw ConfigError("trials must be at least 1");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (K < 4) throw ConfigError("K must be at least 4");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (M < 2 || baseline_factor < 1) throw ConfigError("sample counts must be positive");
  if (!(sigma > 0.0) || !(baseline_sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (!(solver.delta > 0.0) || !(solver.dual_scale > 0.0)) throw ConfigError("ADMM step sizes must be positive");
  if (n < 2 || n > K) throw ConfigError("basis size must lie in [2, K]");
  if (solver.max_iters < 0) throw ConfigError("projection iterations must be >= 0");
  sgf.validate();
  penalty.validate();
}

std::uint64_t trial_seed(const ExperimentConfig& config, int trial) {
  return config.seed * 1000003ULL + static_cast<std::uint64_t>(trial);
}

Scenario make_trial_scenario(const ExperimentConfig& config, int trial) {
  Scenario s = generate_scenario(config.scenario, trial_seed(config, trial), config.generator);
  if (config.scenario == ScenarioKind::Obstacles && config.obstacles) {
    s.obstacles = ObstacleField(*config.obstacles, s.obstacles.extent_min(), s.obstacles.extent_max(),
                                s.obstacles.goal(), s.obstacles.vehicle_radius());
  }
  if (config.scenario == ScenarioKind::Terrain && config.waves) {
    s.terrain = Terrain(*config.waves, s.terrain.extent(), s.terrain.goal(), s.terrain.band_min(),
                        s.terrain.band_max());
    const double surface = s.terrain.height(s.start.p_n, s.start.p_e);
    s.start.p_d = -(surface + config.generator.start_height);
  }
  s.obstacle_weights = config.obstacle_weights;
  s.terrain_weights = config.terrain_weights;
  s.trim = config.trim;
  return s;
}

std::shared_ptr<const MlpWeights> load_experiment_weights(const ExperimentConfig& config, ControllerKind kind) {
  const bool needs = kind == ControllerKind::PiMppiLearned ||
                     (kind == ControllerKind::PiMppi &&
                      (config.init == InitKind::Neural || config.init == InitKind::Direct));
  if (!needs) return nullptr;
  if (config.weights_path.empty()) {
    throw ConfigError(std::string(to_string(kind)) + " with a network initialization needs --weights");
  }
  auto weights = std::make_shared<const MlpWeights>(load_weights(config.weights_path));
  const int N = kNumChannels * (config.space == Space::Coefficient ? config.n : config.K);
  check_compatible(*weights, config.K, N);
  return weights;
}

PiMppiConfig pi_mppi_config(const ExperimentConfig& config, std::uint64_t seed) {
  PiMppiConfig pc;
  pc.mppi.sigma = config.sigma;
  pc.mppi.alpha = config.alpha;
  pc.mppi.M = config.M;
  pc.mppi.K = config.K;
  pc.mppi.dt = config.dt;
  pc.mppi.seed = seed;
  pc.space = config.space;
  pc.n = config.n;
  pc.mppi.noise = config.space == Space::Coefficient
                      ? NoiseSpec::coefficient(config.noise.pi_coefficient, config.n)
                      : NoiseSpec::waypoint(config.noise.sgf_high);
  pc.bounds = config.bounds;
  pc.solver = config.solver;
  pc.rate_pin = config.rate_pin;
  pc.final_iters = config.solver.max_iters;
  return pc;
}

BaselineConfig baseline_config(const ExperimentConfig& config, ControllerKind kind, std::uint64_t seed) {
  BaselineConfig bc;
  bc.mppi.sigma = config.baseline_sigma;
  bc.mppi.alpha = config.alpha;
  bc.mppi.M = config.M * config.baseline_factor;
  bc.mppi.K = config.K;
  bc.mppi.dt = config.dt;
  bc.mppi.seed = seed;
  bc.bounds = config.bounds;
  bc.sgf = config.sgf;
  bc.n = config.n;
  Eigen::Vector3d diag = config.noise.sgf;
  switch (kind) {
    case ControllerKind::MppiSgf: break;
    case ControllerKind::MppiSgfHighCov: diag = config.noise.sgf_high; break;
    case ControllerKind::MppiSgfE: bc.penalty = config.penalty; break;
    case ControllerKind::MppiPoly: diag = config.noise.poly; break;
    default: throw ConfigError("not a baseline controller");
  }
  bc.mppi.noise = kind == ControllerKind::MppiPoly ? NoiseSpec::coefficient(diag, config.n)
                                                   : NoiseSpec::waypoint(diag);
  bc.weight_cov = diag.asDiagonal();
  return bc;
}

std::unique_ptr<Controller> make_controller(const ExperimentConfig& config, ControllerKind kind,
                                            std::uint64_t seed, std::shared_ptr<const MlpWeights> weights,
                                            std::shared_ptr<const ProjectionInitializer> init) {
  if (kind == ControllerKind::PiMppi || kind == ControllerKind::PiMppiLearned) {
    if (!init) {
      const InitKind ik = kind == ControllerKind::PiMppiLearned ? InitKind::Neural : config.init;
      init = make_initializer(ik, std::move(weights));
    }
    auto c = std::make_unique<PiMppiController>(pi_mppi_config(config, seed), config.trim, std::move(init));
    c->set_name(to_string(kind));
    return c;
  }
  return std::make_unique<BaselineController>(baseline_config(config, kind, seed), config.trim, to_string(kind));
}

TrialRun run_trial(const ExperimentConfig& config, ControllerKind kind, int trial,
                   std::shared_ptr<const MlpWeights> weights, std::shared_ptr<const ProjectionInitializer> init) {
  const Scenario scenario = make_trial_scenario(config, trial);
  const ScenarioTask task(scenario);
  const std::uint64_t seed = trial_seed(config, trial) ^ 0x6a09e667f3bcc909ULL;
  std::unique_ptr<Controller> controller = make_controller(config, kind, seed, std::move(weights), std::move(init));
  TrialRun run;
  run.log = mpc_loop(scenario.start, task, *controller, config.steps);
  run.record = make_trial_record(run.log, task, config.steps);
  return run;
}

std::vector<TrialRun> run_trials(const ExperimentConfig& config, ControllerKind kind,
                                 std::shared_ptr<const MlpWeights> weights) {
  config.validate();
  std::vector<TrialRun> runs(static_cast<std::size_t>(config.trials));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (int t = 0; t < config.trials; ++t) {
    try {
      runs[static_cast<std::size_t>(t)] = run_trial(config, kind, t, weights);
    } catch (...) {
#pragma omp critical(pimppi_trial_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return runs;
}

}  // namespace pimppi
