#include "pimppi/scenario_io.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <set>
#include <sstream>

namespace pimppi {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 3> kOrderNames{"value", "rate", "accel"};

void allow_keys(const json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

Eigen::Vector3d vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + " must have 3 entries");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

RatePin parse_rate_pin(const std::string& s) {
  if (s == "forward-difference") return RatePin::ForwardDifference;
  if (s == "constraint") return RatePin::Constraint;
  throw ConfigError("unknown rate_pin '" + s + "'");
}

const char* rate_pin_name(RatePin p) {
  return p == RatePin::ForwardDifference ? "forward-difference" : "constraint";
}

void parse_into(const json& j, ExperimentConfig& c) {
  allow_keys(j, "config", {"schema_version", "scenario", "seed", "trials", "steps", "horizon", "mppi",
                           "projection", "bounds", "trim", "noise", "sgf", "penalty", "costs", "generator",
                           "obstacles", "terrain_waves"});
  int version = kConfigSchemaVersion;
  read(j, "schema_version", version);
  if (version != kConfigSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(version));
  read(j, "seed", c.seed);
  read(j, "trials", c.trials);
  read(j, "steps", c.steps);

  if (j.contains("horizon")) {
    const json& h = j["horizon"];
    allow_keys(h, "horizon", {"K", "dt"});
    read(h, "K", c.K);
    read(h, "dt", c.dt);
  }
  if (j.contains("mppi")) {
    const json& m = j["mppi"];
    allow_keys(m, "mppi", {"sigma", "alpha", "M", "baseline_factor", "baseline_sigma"});
    read(m, "sigma", c.sigma);
    read(m, "alpha", c.alpha);
    read(m, "M", c.M);
    read(m, "baseline_factor", c.baseline_factor);
    read(m, "baseline_sigma", c.baseline_sigma);
  }
  if (j.contains("projection")) {
    const json& p = j["projection"];
    allow_keys(p, "projection", {"space", "n", "iterations", "delta", "dual_scale", "rate_pin", "init", "weights"});
    if (p.contains("space")) c.space = parse_space(p["space"].get<std::string>());
    read(p, "n", c.n);
    read(p, "iterations", c.solver.max_iters);
    read(p, "delta", c.solver.delta);
    read(p, "dual_scale", c.solver.dual_scale);
    if (p.contains("rate_pin")) c.rate_pin = parse_rate_pin(p["rate_pin"].get<std::string>());
    if (p.contains("init")) c.init = parse_init_kind(p["init"].get<std::string>());
    read(p, "weights", c.weights_path);
  }
  if (j.contains("bounds")) {
    const json& b = j["bounds"];
    allow_keys(b, "bounds", {"v", "phi", "theta"});
    for (int ch = 0; ch < kNumChannels; ++ch) {
      if (!b.contains(kChannelNames[ch])) continue;
      const json& bc = b[kChannelNames[ch]];
      allow_keys(bc, "bounds channel", {"value", "rate", "accel"});
      for (int o = 0; o < 3; ++o) {
        if (!bc.contains(kOrderNames[o])) continue;
        const json& iv = bc[kOrderNames[o]];
        if (iv.is_null()) {
          c.bounds.limits[ch][o].reset();
        } else {
          if (!iv.is_array() || iv.size() != 2) throw ConfigError("a bound is [min, max]");
          c.bounds.limits[ch][o] = Interval{iv[0].get<double>(), iv[1].get<double>()};
        }
      }
    }
  }
  if (j.contains("trim")) {
    const Eigen::Vector3d t = vec3(j["trim"], "trim");
    c.trim = {t(0), t(1), t(2)};
  }
  if (j.contains("noise")) {
    const json& n = j["noise"];
    allow_keys(n, "noise", {"pi_coefficient", "sgf", "sgf_high", "poly"});
    if (n.contains("pi_coefficient")) c.noise.pi_coefficient = vec3(n["pi_coefficient"], "pi_coefficient");
    if (n.contains("sgf")) c.noise.sgf = vec3(n["sgf"], "sgf");
    if (n.contains("sgf_high")) c.noise.sgf_high = vec3(n["sgf_high"], "sgf_high");
    if (n.contains("poly")) c.noise.poly = vec3(n["poly"], "poly");
  }
  if (j.contains("sgf")) {
    const json& s = j["sgf"];
    allow_keys(s, "sgf", {"window", "order"});
    read(s, "window", c.sgf.window);
    read(s, "order", c.sgf.order);
  }
  if (j.contains("penalty")) {
    const json& p = j["penalty"];
    allow_keys(p, "penalty", {"v", "phi", "theta"});
    for (int ch = 0; ch < kNumChannels; ++ch) {
      if (!p.contains(kChannelNames[ch])) continue;
      const Eigen::Vector3d w = vec3(p[kChannelNames[ch]], "penalty");
      c.penalty.weights[ch] = {w(0), w(1), w(2)};
    }
  }
  if (j.contains("costs")) {
    const json& cs = j["costs"];
    allow_keys(cs, "costs", {"obstacles", "terrain"});
    if (cs.contains("obstacles")) {
      const json& o = cs["obstacles"];
      allow_keys(o, "obstacle costs", {"goal", "obstacle", "terminal"});
      read(o, "goal", c.obstacle_weights.goal);
      read(o, "obstacle", c.obstacle_weights.obstacle);
      read(o, "terminal", c.obstacle_weights.terminal);
    }
    if (cs.contains("terrain")) {
      const json& t = cs["terrain"];
      allow_keys(t, "terrain costs", {"goal", "band", "terminal"});
      read(t, "goal", c.terrain_weights.goal);
      read(t, "band", c.terrain_weights.band);
      read(t, "terminal", c.terrain_weights.terminal);
    }
  }
  if (j.contains("generator")) {
    const json& g = j["generator"];
    GeneratorSettings& s = c.generator;
    allow_keys(g, "generator",
               {"obstacle_count", "radius_min", "radius_max", "workspace", "ceiling", "vehicle_radius",
                "obstacle_start", "obstacle_goal", "start_clearance", "goal_clearance", "max_attempts", "waves",
                "terrain_extent", "wavelength_min", "wavelength_max", "terrain_start", "terrain_goal",
                "start_height"});
    read(g, "obstacle_count", s.obstacle_count);
    read(g, "radius_min", s.radius_min);
    read(g, "radius_max", s.radius_max);
    read(g, "workspace", s.workspace);
    read(g, "ceiling", s.ceiling);
    read(g, "vehicle_radius", s.vehicle_radius);
    if (g.contains("obstacle_start")) s.obstacle_start = vec3(g["obstacle_start"], "obstacle_start");
    if (g.contains("obstacle_goal")) s.obstacle_goal = vec3(g["obstacle_goal"], "obstacle_goal");
    read(g, "start_clearance", s.start_clearance);
    read(g, "goal_clearance", s.goal_clearance);
    read(g, "max_attempts", s.max_attempts);
    read(g, "waves", s.waves);
    read(g, "terrain_extent", s.terrain_extent);
    read(g, "wavelength_min", s.wavelength_min);
    read(g, "wavelength_max", s.wavelength_max);
    for (const char* key : {"terrain_start", "terrain_goal"}) {
      if (!g.contains(key)) continue;
      const json& v = g[key];
      if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + " must have 2 entries");
      (std::string(key) == "terrain_start" ? s.terrain_start : s.terrain_goal) =
          Eigen::Vector2d(v[0].get<double>(), v[1].get<double>());
    }
    read(g, "start_height", s.start_height);
  }
  if (j.contains("obstacles")) {
    std::vector<Sphere> spheres;
    for (const json& o : j["obstacles"]) {
      allow_keys(o, "obstacle", {"center", "radius"});
      spheres.push_back({vec3(o.at("center"), "center"), o.at("radius").get<double>()});
    }
    c.obstacles = std::move(spheres);
  }
  if (j.contains("terrain_waves")) {
    std::vector<Wave> waves;
    for (const json& w : j["terrain_waves"]) {
      allow_keys(w, "wave", {"amplitude", "k_n", "k_e", "phase"});
      waves.push_back({w.at("amplitude").get<double>(), w.at("k_n").get<double>(), w.at("k_e").get<double>(),
                       w.at("phase").get<double>()});
    }
    c.waves = std::move(waves);
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ScenarioKind kind = ScenarioKind::Obstacles;
  if (j.contains("scenario")) kind = parse_scenario_kind(j["scenario"].get<std::string>());
  ExperimentConfig c = ExperimentConfig::defaults(kind);
  try {
    parse_into(j, c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["scenario"] = to_string(c.scenario);
  j["seed"] = c.seed;
  j["trials"] = c.trials;
  j["steps"] = c.steps;
  j["horizon"] = {{"K", c.K}, {"dt", c.dt}};
  j["mppi"] = {{"sigma", c.sigma},
               {"alpha", c.alpha},
               {"M", c.M},
               {"baseline_factor", c.baseline_factor},
               {"baseline_sigma", c.baseline_sigma}};
  j["projection"] = {{"space", c.space == Space::Coefficient ? "coefficient" : "waypoint"},
                     {"n", c.n},
                     {"iterations", c.solver.max_iters},
                     {"delta", c.solver.delta},
                     {"dual_scale", c.solver.dual_scale},
                     {"rate_pin", rate_pin_name(c.rate_pin)},
                     {"init", to_string(c.init)},
                     {"weights", c.weights_path}};
  json bounds;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    json b;
    for (int o = 0; o < 3; ++o) {
      const auto& iv = c.bounds.at(ch, o);
      b[kOrderNames[o]] = iv ? json::array({iv->min, iv->max}) : json(nullptr);
    }
    bounds[kChannelNames[ch]] = b;
  }
  j["bounds"] = bounds;
  j["trim"] = {c.trim.v, c.trim.phi, c.trim.theta};
  j["noise"] = {{"pi_coefficient", vec_json(c.noise.pi_coefficient)},
                {"sgf", vec_json(c.noise.sgf)},
                {"sgf_high", vec_json(c.noise.sgf_high)},
                {"poly", vec_json(c.noise.poly)}};
  j["sgf"] = {{"window", c.sgf.window}, {"order", c.sgf.order}};
  json penalty;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    penalty[kChannelNames[ch]] = {c.penalty.weights[ch][0], c.penalty.weights[ch][1], c.penalty.weights[ch][2]};
  }
  j["penalty"] = penalty;
  j["costs"] = {{"obstacles",
                 {{"goal", c.obstacle_weights.goal},
                  {"obstacle", c.obstacle_weights.obstacle},
                  {"terminal", c.obstacle_weights.terminal}}},
                {"terrain",
                 {{"goal", c.terrain_weights.goal},
                  {"band", c.terrain_weights.band},
                  {"terminal", c.terrain_weights.terminal}}}};
  const GeneratorSettings& g = c.generator;
  j["generator"] = {{"obstacle_count", g.obstacle_count},
                    {"radius_min", g.radius_min},
                    {"radius_max", g.radius_max},
                    {"workspace", g.workspace},
                    {"ceiling", g.ceiling},
                    {"vehicle_radius", g.vehicle_radius},
                    {"obstacle_start", vec_json(g.obstacle_start)},
                    {"obstacle_goal", vec_json(g.obstacle_goal)},
                    {"start_clearance", g.start_clearance},
                    {"goal_clearance", g.goal_clearance},
                    {"max_attempts", g.max_attempts},
                    {"waves", g.waves},
                    {"terrain_extent", g.terrain_extent},
                    {"wavelength_min", g.wavelength_min},
                    {"wavelength_max", g.wavelength_max},
                    {"terrain_start", vec_json(g.terrain_start)},
                    {"terrain_goal", vec_json(g.terrain_goal)},
                    {"start_height", g.start_height}};
  if (c.obstacles) {
    json list = json::array();
    for (const Sphere& s : *c.obstacles) list.push_back({{"center", vec_json(s.center)}, {"radius", s.radius}});
    j["obstacles"] = list;
  }
  if (c.waves) {
    json list = json::array();
    for (const Wave& w : *c.waves) {
      list.push_back({{"amplitude", w.amplitude}, {"k_n", w.k_n}, {"k_e", w.k_e}, {"phase", w.phase}});
    }
    j["terrain_waves"] = list;
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// CSV

void write_trials_csv(std::ostream& out, const std::vector<TrialRecord>& records, const ExperimentConfig& config,
                      double window) {
  out << "trial,seed,success,failure,steps,avg_dist,seconds\n";
  out.precision(17);
  for (std::size_t t = 0; t < records.size(); ++t) {
    const TrialRecord& r = records[t];
    const Metrics m = compute_metrics({r}, config.bounds, config.dt, window);
    out << t << ',' << trial_seed(config, static_cast<int>(t)) << ',' << (r.success ? 1 : 0) << ','
        << to_string(r.failure) << ',' << r.steps << ',' << m.avg_dist_to_goal << ',' << r.seconds << '\n';
  }
}

void write_commanded_csv(std::ostream& out, const TrialRecord& record) {
  out << "step,v,phi,theta,dist_to_goal\n";
  out.precision(17);
  for (std::size_t i = 0; i < record.commanded.size(); ++i) {
    const ControlPoint& u = record.commanded[i];
    out << i << ',' << u.v << ',' << u.phi << ',' << u.theta << ',';
    if (i < record.distances.size()) out << record.distances[i];
    out << '\n';
  }
}

void write_summary_header(std::ostream& out) {
  out << "controller,trials,success_rate,avg_dist";
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) {
      out << ",mean_" << kChannelNames[ch] << "_d" << j << ",max_" << kChannelNames[ch] << "_d" << j;
    }
  }
  out << '\n';
}

void write_summary_row(std::ostream& out, const std::string& controller, const Metrics& m) {
  out.precision(10);
  out << controller << ',' << m.trials << ',' << m.success_rate << ',' << m.avg_dist_to_goal;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) out << ',' << m.residual_mean[ch][j] << ',' << m.residual_max[ch][j];
  }
  out << '\n';
}

}  // namespace pimppi
