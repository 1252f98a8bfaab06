#pragma once

#include "pimppi/experiment.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace pimppi {

// Experiment files are JSON. Every key is optional and falls back to the
// defaults of the scenario family; unknown keys are rejected.
//
// {
//   "schema_version": 1,
//   "scenario": "obstacles" | "terrain",
//   "seed": 1, "trials": 25, "steps": 300,
//   "horizon": {"K": 100, "dt": 0.2},
//   "mppi": {"sigma": 5, "alpha": 0.99, "M": 256, "baseline_factor": 4, "baseline_sigma": 5},
//   "projection": {"space": "coefficient" | "waypoint", "n": 11, "iterations": 50,
//                  "delta": 100, "dual_scale": 1, "rate_pin": "forward-difference" | "constraint",
//                  "init": "zero" | "nu" | "neural" | "direct", "weights": "path"},
//   "bounds": {"v": {"value": [15, 25], "rate": [-2, 2], "accel": [-2, 2]}, "phi": {...}, "theta": {...}},
//   "trim": [20, 0, 0],
//   "noise": {"pi_coefficient": [20, 2, 2], "sgf": [...], "sgf_high": [...], "poly": [...]},
//   "sgf": {"window": 11, "order": 3},
//   "penalty": {"v": [0, 100, 10], "phi": [...], "theta": [...]},
//   "costs": {"obstacles": {"goal": 1e-3, "obstacle": 1e3, "terminal": 1},
//             "terrain": {"goal": 1, "band": 10, "terminal": 1}},
//   "generator": {"obstacle_count": 100, "radius_min": 20, ...},
//   "obstacles": [{"center": [n, e, d], "radius": r}, ...],
//   "terrain_waves": [{"amplitude": a, "k_n": kn, "k_e": ke, "phase": p}, ...]
// }
//
// A bound given as null leaves that order unconstrained.

inline constexpr int kConfigSchemaVersion = 1;

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Complete JSON echo of a configuration; parse_config(dump_config(c)) == c.
std::string dump_config(const ExperimentConfig& config);

/// trial,seed,success,failure,steps,avg_dist,seconds
void write_trials_csv(std::ostream& out, const std::vector<TrialRecord>& records,
                      const ExperimentConfig& config, double window = 0.4);
/// step,v,phi,theta,dist_to_goal of one trial.
void write_commanded_csv(std::ostream& out, const TrialRecord& record);
/// One row per controller: success rate, average distance, and the mean and
/// max residual of every channel and order.
void write_summary_header(std::ostream& out);
void write_summary_row(std::ostream& out, const std::string& controller, const Metrics& metrics);

}  // namespace pimppi
