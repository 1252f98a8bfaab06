#include "pimppi/benchmarks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace pimppi {

namespace {

Eigen::Vector3d position(const State& x) { return {x.p_n, x.p_e, x.p_d}; }

}  // namespace

// ---------------------------------------------------------------------------
// Obstacles

ObstacleField::ObstacleField(std::vector<Sphere> obstacles, Eigen::Vector3d extent_min,
                             Eigen::Vector3d extent_max, Eigen::Vector3d goal, double vehicle_radius)
    : obstacles_(std::move(obstacles)),
      extent_min_(extent_min),
      extent_max_(extent_max),
      goal_(goal),
      vehicle_radius_(vehicle_radius) {
  if (!(vehicle_radius >= 0.0)) throw ConfigError("vehicle radius must be >= 0");
  for (const Sphere& s : obstacles_) {
    if (!(s.radius > 0.0)) throw ConfigError("obstacle radius must be positive");
  }
  build_index();
}

void ObstacleField::build_index() {
  grid_.clear();
  cells_n_ = cells_e_ = 0;
  if (obstacles_.empty()) return;
  double reach = 0.0;
  for (const Sphere& s : obstacles_) reach = std::max(reach, s.radius + vehicle_radius_);
  cell_ = 2.0 * reach;
  Eigen::Vector2d lo(std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity());
  Eigen::Vector2d hi = -lo;
  for (const Sphere& s : obstacles_) {
    lo = lo.cwiseMin(s.center.head<2>());
    hi = hi.cwiseMax(s.center.head<2>());
  }
  // Grid covers the centres grown by the largest inflated radius.
  lo.array() -= reach;
  hi.array() += reach;
  extent_lo_ = lo;
  cells_n_ = std::max(1, static_cast<int>(std::ceil((hi(0) - lo(0)) / cell_)));
  cells_e_ = std::max(1, static_cast<int>(std::ceil((hi(1) - lo(1)) / cell_)));
  grid_.assign(static_cast<std::size_t>(cells_n_) * cells_e_, {});
  for (int o = 0; o < static_cast<int>(obstacles_.size()); ++o) {
    const Sphere& s = obstacles_[o];
    const double r = s.radius + vehicle_radius_;
    const int n0 = std::max(0, static_cast<int>(std::floor((s.center(0) - r - lo(0)) / cell_)));
    const int n1 = std::min(cells_n_ - 1, static_cast<int>(std::floor((s.center(0) + r - lo(0)) / cell_)));
    const int e0 = std::max(0, static_cast<int>(std::floor((s.center(1) - r - lo(1)) / cell_)));
    const int e1 = std::min(cells_e_ - 1, static_cast<int>(std::floor((s.center(1) + r - lo(1)) / cell_)));
    for (int i = n0; i <= n1; ++i) {
      for (int j = e0; j <= e1; ++j) grid_[static_cast<std::size_t>(i) * cells_e_ + j].push_back(o);
    }
  }
}

template <typename F>
void ObstacleField::for_nearby(const Eigen::Vector3d& p, F&& f) const {
  if (grid_.empty()) return;
  const double fi = std::floor((p(0) - extent_lo_(0)) / cell_);
  const double fj = std::floor((p(1) - extent_lo_(1)) / cell_);
  if (!(fi >= 0.0 && fi < cells_n_ && fj >= 0.0 && fj < cells_e_)) return;
  const auto& cell = grid_[static_cast<std::size_t>(fi) * cells_e_ + static_cast<std::size_t>(fj)];
  for (int o : cell) f(obstacles_[o]);
}

double ObstacleField::penetration(const Eigen::Vector3d& p) const {
  double total = 0.0;
  for_nearby(p, [&](const Sphere& s) {
    total += std::max(0.0, s.radius + vehicle_radius_ - (p - s.center).norm());
  });
  return total;
}

bool ObstacleField::collides(const Eigen::Vector3d& p) const {
  bool hit = false;
  for_nearby(p, [&](const Sphere& s) {
    if ((p - s.center).norm() < s.radius + vehicle_radius_) hit = true;
  });
  return hit;
}

// ---------------------------------------------------------------------------
// Terrain

Terrain::Terrain(std::vector<Wave> waves, double extent, Eigen::Vector2d goal, double band_min,
                 double band_max)
    : waves_(std::move(waves)), extent_(extent), goal_(goal), band_min_(band_min), band_max_(band_max) {
  if (!(band_min < band_max)) throw ConfigError("terrain band must have min < max");
  norm_ = 0.0;
  for (const Wave& w : waves_) norm_ += std::abs(w.amplitude);
  if (norm_ == 0.0) norm_ = 1.0;
}

double Terrain::height(double p_n, double p_e) const {
  double s = 0.0;
  for (const Wave& w : waves_) s += w.amplitude * std::sin(w.k_n * p_n + w.k_e * p_e + w.phase);
  return 50.0 + 50.0 * s / norm_;
}

double Terrain::band_violation(const State& x) const {
  const double surface = height(x.p_n, x.p_e);
  const double z = x.altitude();
  return std::max(0.0, surface + band_min_ - z) + std::max(0.0, z - (surface + band_max_));
}

// ---------------------------------------------------------------------------
// Scenarios

const char* to_string(ScenarioKind kind) {
  return kind == ScenarioKind::Obstacles ? "obstacles" : "terrain";
}

ScenarioKind parse_scenario_kind(const std::string& text) {
  if (text == "obstacles" || text == "obstacle") return ScenarioKind::Obstacles;
  if (text == "terrain") return ScenarioKind::Terrain;
  throw ConfigError("unknown scenario kind '" + text + "'");
}

Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed, const GeneratorSettings& s) {
  Scenario out;
  out.kind = kind;
  out.seed = seed;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (kind == ScenarioKind::Obstacles) {
    if (!(s.radius_min > 0.0 && s.radius_min <= s.radius_max)) throw ConfigError("bad radius range");
    std::vector<Sphere> spheres;
    int attempts = 0;
    while (static_cast<int>(spheres.size()) < s.obstacle_count) {
      if (++attempts > s.max_attempts) throw ConfigError("obstacle placement did not terminate");
      Sphere sp;
      sp.center = {s.workspace * unit(rng), s.workspace * unit(rng), -s.ceiling * unit(rng)};
      sp.radius = s.radius_min + (s.radius_max - s.radius_min) * unit(rng);
      const double inflated = sp.radius + s.vehicle_radius;
      if ((sp.center - s.obstacle_start).norm() < inflated + s.start_clearance) continue;
      if ((sp.center - s.obstacle_goal).norm() < inflated + s.goal_clearance) continue;
      spheres.push_back(sp);
    }
    out.obstacles = ObstacleField(std::move(spheres), Eigen::Vector3d(0.0, 0.0, -s.ceiling),
                                  Eigen::Vector3d(s.workspace, s.workspace, 0.0), s.obstacle_goal,
                                  s.vehicle_radius);
    const Eigen::Vector3d d = s.obstacle_goal - s.obstacle_start;
    out.start = {s.obstacle_start(0), s.obstacle_start(1), s.obstacle_start(2), std::atan2(d(1), d(0))};
  } else {
    std::vector<Wave> waves;
    const double log_min = std::log(s.wavelength_min);
    const double log_max = std::log(s.wavelength_max);
    for (int i = 0; i < s.waves; ++i) {
      const double wavelength = std::exp(log_min + (log_max - log_min) * unit(rng));
      const double direction = 2.0 * std::numbers::pi * unit(rng);
      const double k = 2.0 * std::numbers::pi / wavelength;
      Wave w;
      // Longer waves carry more height, which bounds the slope.
      w.amplitude = (0.5 + 0.5 * unit(rng)) * wavelength / s.wavelength_max;
      w.k_n = k * std::cos(direction);
      w.k_e = k * std::sin(direction);
      w.phase = 2.0 * std::numbers::pi * unit(rng);
      waves.push_back(w);
    }
    out.terrain = Terrain(std::move(waves), s.terrain_extent, s.terrain_goal);
    const Eigen::Vector2d d = s.terrain_goal - s.terrain_start;
    const double surface = out.terrain.height(s.terrain_start(0), s.terrain_start(1));
    out.start = {s.terrain_start(0), s.terrain_start(1), -(surface + s.start_height),
                 std::atan2(d(1), d(0))};
  }
  return out;
}

double obstacle_cost(const State& x, const ObstacleField& field, const ObstacleCostWeights& w) {
  const Eigen::Vector3d p = position(x);
  return w.goal * (p - field.goal()).squaredNorm() + w.obstacle * field.penetration(p);
}

double terrain_cost(const State& x, const Terrain& terrain, const TerrainCostWeights& w) {
  const double dn = x.p_n - terrain.goal()(0);
  const double de = x.p_e - terrain.goal()(1);
  return w.goal * std::sqrt(dn * dn + de * de) + w.band * terrain.band_violation(x);
}

Failure check_failure(const State& x, const Scenario& scenario) {
  if (scenario.kind == ScenarioKind::Obstacles) {
    if (scenario.obstacles.collides(position(x))) return Failure::Collision;
    if (x.altitude() < 0.0) return Failure::Crash;
    return Failure::None;
  }
  if (x.altitude() < scenario.terrain.height(x.p_n, x.p_e)) return Failure::Crash;
  return Failure::None;
}

namespace {

class ObstacleCost : public CostFunction {
 public:
  ObstacleCost(const ObstacleField& field, ObstacleCostWeights w) : field_(field), w_(w) {}
  double running(const State& x, const ControlPoint&, int) const override {
    return obstacle_cost(x, field_, w_);
  }
  double terminal(const State& x) const override { return w_.terminal * obstacle_cost(x, field_, w_); }

 private:
  const ObstacleField& field_;
  ObstacleCostWeights w_;
};

class TerrainCost : public CostFunction {
 public:
  TerrainCost(const Terrain& terrain, TerrainCostWeights w) : terrain_(terrain), w_(w) {}
  double running(const State& x, const ControlPoint&, int) const override {
    return terrain_cost(x, terrain_, w_);
  }
  double terminal(const State& x) const override { return w_.terminal * terrain_cost(x, terrain_, w_); }

 private:
  const Terrain& terrain_;
  TerrainCostWeights w_;
};

}  // namespace

ScenarioTask::ScenarioTask(const Scenario& scenario) : scenario_(scenario) {
  if (scenario.kind == ScenarioKind::Obstacles) {
    cost_ = std::make_unique<ObstacleCost>(scenario.obstacles, scenario.obstacle_weights);
  } else {
    cost_ = std::make_unique<TerrainCost>(scenario.terrain, scenario.terrain_weights);
  }
}

Failure ScenarioTask::check_failure(const State& x) const { return pimppi::check_failure(x, scenario_); }

double ScenarioTask::distance_to_goal(const State& x) const {
  if (scenario_.kind == ScenarioKind::Obstacles) {
    return (position(x) - scenario_.obstacles.goal()).norm();
  }
  return (Eigen::Vector2d(x.p_n, x.p_e) - scenario_.terrain.goal()).norm();
}

// ---------------------------------------------------------------------------
// Metrics

TrialRecord make_trial_record(const MpcLog& log, const Task& task, int planned_steps) {
  TrialRecord r;
  r.failure = log.failure;
  r.success = log.failure == Failure::None && static_cast<int>(log.commanded.size()) == planned_steps;
  r.steps = static_cast<int>(log.commanded.size());
  r.commanded = log.commanded;
  for (std::size_t i = 1; i < log.states.size(); ++i) r.distances.push_back(task.distance_to_goal(log.states[i]));
  r.seconds = log.seconds;
  return r;
}

std::array<std::array<std::vector<double>, 3>, kNumChannels> commanded_violations(
    const std::vector<ControlPoint>& commanded, const DerivativeBounds& bounds, double dt_sim) {
  std::array<std::array<std::vector<double>, 3>, kNumChannels> out;
  const std::size_t T = commanded.size();
  for (int ch = 0; ch < kNumChannels; ++ch) {
    std::vector<double> value(T);
    for (std::size_t i = 0; i < T; ++i) {
      const ControlPoint& c = commanded[i];
      value[i] = ch == 0 ? c.v : (ch == 1 ? c.phi : c.theta);
    }
    std::vector<double> rate;
    for (std::size_t i = 0; i + 1 < T; ++i) rate.push_back((value[i + 1] - value[i]) / dt_sim);
    std::vector<double> accel;
    for (std::size_t i = 0; i + 1 < rate.size(); ++i) accel.push_back((rate[i + 1] - rate[i]) / dt_sim);
    const std::array<const std::vector<double>*, 3> series{&value, &rate, &accel};
    for (int j = 0; j < 3; ++j) {
      const auto& b = bounds.at(ch, j);
      for (double s : *series[j]) out[ch][j].push_back(b ? b->violation(s) : 0.0);
    }
  }
  return out;
}

Metrics compute_metrics(const std::vector<TrialRecord>& trials, const DerivativeBounds& bounds,
                        double dt_sim, double window) {
  Metrics m;
  m.trials = static_cast<int>(trials.size());
  OrderTable sum{};
  std::array<std::array<std::size_t, 3>, kNumChannels> count{};
  double dist_sum = 0.0;
  for (const TrialRecord& t : trials) {
    if (t.success) {
      ++m.successes;
      const std::size_t n = t.distances.size();
      const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(window * n)));
      double s = 0.0;
      for (std::size_t i = n - std::min(n, w); i < n; ++i) s += t.distances[i];
      dist_sum += n > 0 ? s / static_cast<double>(std::min(n, w)) : 0.0;
    }
    const auto v = commanded_violations(t.commanded, bounds, dt_sim);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      for (int j = 0; j < 3; ++j) {
        for (double x : v[ch][j]) {
          sum[ch][j] += x;
          m.residual_max[ch][j] = std::max(m.residual_max[ch][j], x);
          ++count[ch][j];
        }
      }
    }
  }
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) {
      m.residual_mean[ch][j] = count[ch][j] > 0 ? sum[ch][j] / static_cast<double>(count[ch][j]) : 0.0;
    }
  }
  m.success_rate = m.trials > 0 ? 100.0 * m.successes / m.trials : 0.0;
  m.avg_dist_to_goal = m.successes > 0 ? dist_sum / m.successes : std::numeric_limits<double>::quiet_NaN();
  return m;
}

}  // namespace pimppi
