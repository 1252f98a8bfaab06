#include "pimppi/experiment.hpp"
#include "pimppi/scenario_io.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using namespace pimppi;

namespace {

struct CommonArgs {
  std::string scenario{"obstacles"};
  std::optional<int> trials;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> iters;
  std::optional<int> samples;
  std::string init;
  std::string space;
  std::string weights;
  bool full_scale{false};
};

void add_common(CLI::App* app, CommonArgs& a) {
  app->add_option("--scenario", a.scenario, "scenario kind (obstacles, terrain) or a JSON config file")
      ->capture_default_str();
  app->add_option("--trials", a.trials, "number of trials");
  app->add_option("--seed", a.seed, "base seed");
  app->add_option("--steps", a.steps, "MPC steps per trial");
  app->add_option("--iters", a.iters, "projection iterations");
  app->add_option("--samples", a.samples, "pi-MPPI sample count M (baselines use 4M)");
  app->add_option("--init", a.init, "projection initialization")
      ->check(CLI::IsMember({"zero", "nu", "neural", "direct"}));
  app->add_option("--space", a.space, "parametrization of the filter")
      ->check(CLI::IsMember({"waypoint", "coeff", "coefficient"}));
  app->add_option("--weights", a.weights, "warm-start weight file");
  app->add_flag("--full-scale", a.full_scale, "M = 1000 (4000 for baselines), 250 trials, 1000 steps");
}

ExperimentConfig resolve_config(const CommonArgs& a) {
  ExperimentConfig c;
  if (a.scenario == "obstacles" || a.scenario == "terrain") {
    c = ExperimentConfig::defaults(parse_scenario_kind(a.scenario));
  } else {
    c = load_config(a.scenario);
  }
  if (a.full_scale) c.apply_full_scale();
  if (a.trials) c.trials = *a.trials;
  if (a.seed) c.seed = *a.seed;
  if (a.steps) c.steps = *a.steps;
  if (a.iters) c.solver.max_iters = *a.iters;
  if (a.samples) c.M = *a.samples;
  if (!a.init.empty()) c.init = parse_init_kind(a.init);
  if (!a.space.empty()) c.space = parse_space(a.space);
  if (!a.weights.empty()) c.weights_path = a.weights;
  c.validate();
  return c;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  return out;
}

std::vector<ControllerKind> parse_controllers(const std::vector<std::string>& names) {
  std::vector<ControllerKind> kinds;
  for (const std::string& name : names) {
    if (name == "all") {
      kinds.push_back(ControllerKind::PiMppi);
      for (ControllerKind k : baseline_kinds()) kinds.push_back(k);
    } else {
      kinds.push_back(parse_controller_kind(name));
    }
  }
  return kinds;
}

int cmd_run(const CommonArgs& args, const std::vector<std::string>& controllers, const std::string& out_dir,
            bool diagnostics) {
  const ExperimentConfig config = resolve_config(args);
  const std::vector<ControllerKind> kinds = parse_controllers(controllers);
  // Fail on missing weights before any trial runs.
  std::vector<std::shared_ptr<const MlpWeights>> weights;
  for (ControllerKind k : kinds) weights.push_back(load_experiment_weights(config, k));

  const fs::path out(out_dir);
  fs::create_directories(out);
  open_out(out / "config.json") << dump_config(config) << '\n';
  std::ofstream summary = open_out(out / "summary.csv");
  write_summary_header(summary);

  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const std::string name = to_string(kinds[i]);
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<TrialRun> runs = run_trials(config, kinds[i], weights[i]);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::vector<TrialRecord> records;
    const fs::path dir = out / name;
    fs::create_directories(dir);
    for (std::size_t t = 0; t < runs.size(); ++t) {
      records.push_back(runs[t].record);
      std::ofstream f = open_out(dir / ("trial_" + std::to_string(t) + ".csv"));
      write_commanded_csv(f, runs[t].record);
      if (diagnostics) {
        std::ofstream d = open_out(dir / ("diagnostics_" + std::to_string(t) + ".csv"));
        write_diagnostics_csv(d, runs[t].log);
      }
    }
    std::ofstream trials = open_out(out / ("trials_" + name + ".csv"));
    write_trials_csv(trials, records, config);
    const Metrics m = compute_metrics(records, config.bounds, config.dt);
    write_summary_row(summary, name, m);
    std::cout << name << ": success " << m.success_rate << "%, avg dist " << m.avg_dist_to_goal << " m, "
              << seconds << " s\n";
  }
  return 0;
}

int cmd_bench(const CommonArgs& args, const std::vector<std::string>& spaces, const std::vector<int>& batches,
              const std::vector<int>& iterations, int repeats, const std::string& out_path) {
  ExperimentConfig config = resolve_config(args);
  const BoundaryConditions bc = BoundaryConditions::from_control(config.trim.v, config.trim.phi, config.trim.theta);
  const int max_batch = *std::max_element(batches.begin(), batches.end());

  // Fixed random inputs at twice the bound scale around trim.
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss;
  std::vector<ControlSequence> inputs(static_cast<std::size_t>(max_batch));
  for (ControlSequence& u : inputs) {
    u.resize(config.K, kNumChannels);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const auto& iv = config.bounds.at(ch, 0);
      const double mid = iv ? 0.5 * (iv->min + iv->max) : 0.0;
      const double half = iv ? (iv->max - iv->min) : 1.0;
      for (int k = 0; k < config.K; ++k) u(k, ch) = mid + half * gauss(rng);
    }
  }

  struct Setup {
    Space space;
    std::unique_ptr<PiMppiController> controller;
    Eigen::MatrixXd nus;
  };
  std::vector<Setup> setups;
  for (const std::string& s : spaces) {
    ExperimentConfig c = config;
    c.space = parse_space(s);
    Setup setup{c.space, std::make_unique<PiMppiController>(pi_mppi_config(c, c.seed), c.trim), {}};
    setup.controller->set_boundary(bc);
    const int dim = setup.controller->solver().dim();
    setup.nus.resize(max_batch, dim);
    for (int m = 0; m < max_batch; ++m) {
      const ControlSequence& u = inputs[static_cast<std::size_t>(m)];
      if (const BasisMatrices* B = setup.controller->basis()) {
        setup.nus.row(m) = controls_to_stacked(u, *B).transpose();
      } else {
        setup.nus.row(m) = flat(u).transpose();
      }
    }
    setups.push_back(std::move(setup));
  }

  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    file = open_out(out_path);
    out = &file;
  }
  *out << "# K=" << config.K << " n=" << config.n;
  for (const Setup& s : setups) *out << ' ' << to_string(s.space) << "_dim=" << s.controller->solver().dim();
  *out << '\n';
  *out << "space,dim,batch,iterations,seconds,us_per_sample\n";
  for (const Setup& s : setups) {
    const ProjectionSolver& solver = s.controller->solver();
    for (int batch : batches) {
      for (int iters : iterations) {
        double best = std::numeric_limits<double>::infinity();
        for (int r = 0; r < repeats; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          const Eigen::MatrixXd P = batch_project(s.nus.topRows(batch), solver, {}, iters);
          const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          if (!P.allFinite()) throw Error("non-finite projection output");
          best = std::min(best, dt);
        }
        *out << to_string(s.space) << ',' << solver.dim() << ',' << batch << ',' << iters << ',' << best << ','
             << 1e6 * best / batch << '\n';
      }
    }
  }
  return 0;
}

int cmd_log_samples(const CommonArgs& args, const std::string& out_path, double keep) {
  const ExperimentConfig config = resolve_config(args);
  SampleLogWriter writer(out_path, config.K, config.space == Space::Coefficient ? config.n : config.K, keep,
                         config.seed);
  auto init = std::make_shared<LoggingInitializer>(writer);
  // The writer is shared, so trials run one after another.
  for (int t = 0; t < config.trials; ++t) {
    const TrialRun run = run_trial(config, ControllerKind::PiMppi, t, nullptr, init);
    std::cout << "trial " << t << ": " << run.record.steps << " steps, " << to_string(run.record.failure) << '\n';
  }
  writer.close();
  std::cout << writer.offered() << " observations offered, " << writer.rows() << " rows in " << out_path << '\n';
  return 0;
}

int cmd_validate_weights(const CommonArgs& args, const std::string& path) {
  ExperimentConfig config = resolve_config(args);
  const MlpWeights w = load_weights(path);
  const int N = kNumChannels * (config.space == Space::Coefficient ? config.n : config.K);
  std::cout << "layers " << w.layers.size() << ", input " << w.input_dim() << ", output " << w.output_dim() << '\n';
  check_compatible(w, config.K, N);
  std::cout << "compatible with K=" << config.K << ", decision dim " << N << " (" << to_string(config.space)
            << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sampling-based MPC with a projection filter for fixed-wing guidance"};
  app.require_subcommand(1);

  CommonArgs run_args;
  std::vector<std::string> controllers{"pi-mppi"};
  std::string out_dir{"results"};
  bool diagnostics = false;
  CLI::App* run = app.add_subcommand("run", "run closed-loop trials and write CSV results");
  add_common(run, run_args);
  run->add_option("--controller", controllers,
                  "pi-mppi, pi-mppi-learned, mppiwsgf, mppiwsgf-high-cov, mppiwsgf-e, mppi-poly or all")
      ->delimiter(',')
      ->capture_default_str();
  run->add_option("--out", out_dir, "output directory")->capture_default_str();
  run->add_flag("--diagnostics", diagnostics, "also write per-step solver diagnostics");

  CommonArgs bench_args;
  std::vector<std::string> spaces{"coefficient", "waypoint"};
  std::vector<int> batches{16, 64, 256, 1024};
  std::vector<int> iterations{5, 25, 50};
  int repeats = 3;
  std::string bench_out;
  CLI::App* bench = app.add_subcommand("bench-projection", "time batch projection in both parametrizations");
  add_common(bench, bench_args);
  bench->add_option("--spaces", spaces, "spaces to time")->delimiter(',')->capture_default_str();
  bench->add_option("--batch", batches, "batch sizes")->delimiter(',')->check(CLI::PositiveNumber);
  bench->add_option("--iterations", iterations, "iteration counts")->delimiter(',')->check(CLI::NonNegativeNumber);
  bench->add_option("--repeats", repeats, "best of this many runs")->check(CLI::PositiveNumber);
  bench->add_option("--out", bench_out, "CSV path (stdout when omitted)");

  CommonArgs log_args;
  std::string log_out{"samples.bin"};
  double keep = 1.0;
  CLI::App* log = app.add_subcommand("log-samples", "run pi-MPPI with zero initialization and log filter inputs");
  add_common(log, log_args);
  log->add_option("--out", log_out, "sample log (appended when it exists)")->capture_default_str();
  log->add_option("--subsample", keep, "probability of keeping each observation")->check(CLI::Range(0.0, 1.0));

  CommonArgs val_args;
  std::string weights_path;
  CLI::App* val = app.add_subcommand("validate-weights", "check a weight file against a solver configuration");
  add_common(val, val_args);
  val->remove_option(val->get_option("--weights"));
  val->add_option("weights", weights_path, "weight file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args, controllers, out_dir, diagnostics);
    if (*bench) {
      if (batches.empty() || iterations.empty()) throw ConfigError("empty batch or iteration list");
      return cmd_bench(bench_args, spaces, batches, iterations, repeats, bench_out);
    }
    if (*log) return cmd_log_samples(log_args, log_out, keep);
    if (*val) return cmd_validate_weights(val_args, weights_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
