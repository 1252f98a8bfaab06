#pragma once

#include "pimppi/types.hpp"

#include <vector>

namespace pimppi {

// Reduced-order kinematic 3D Dubins model of a fixed-wing vehicle.
// North-east-down positions, yaw; controls are speed, roll and pitch.

struct State {
  double p_n{0.0};  // m
  double p_e{0.0};  // m
  double p_d{0.0};  // m, positive down
  double psi{0.0};  // rad

  double altitude() const { return -p_d; }
  bool operator==(const State&) const = default;
};

struct ControlPoint {
  double v{0.0};      // m/s
  double phi{0.0};    // rad
  double theta{0.0};  // rad

  static ControlPoint from_row(const ControlSequence& u, Eigen::Index k) {
    return {u(k, 0), u(k, 1), u(k, 2)};
  }
};

struct StateDerivative {
  double p_n_dot{0.0};
  double p_e_dot{0.0};
  double p_d_dot{0.0};
  double psi_dot{0.0};
  // Intermediate body rates: q about the pitch axis, r about the yaw axis.
  double q{0.0};
  double r{0.0};
};

enum class Integrator { Euler, RK4 };

struct DynamicsParams {
  double g{9.81};   // m/s^2
  double dt{0.2};   // s
  Integrator scheme{Integrator::Euler};
  /// cos(theta) and cos(phi) must stay above this floor.
  double cos_floor{1e-6};
};

class SingularityError : public Error {
 public:
  SingularityError(const std::string& what, Eigen::Index index = -1)
      : Error(what), index_(index) {}
  /// Offending control index within a rollout, -1 for a single evaluation.
  Eigen::Index index() const { return index_; }

 private:
  Eigen::Index index_;
};

/// Continuous-time model. theta_dot is supplied by the caller since the
/// control point carries only the pitch angle.
StateDerivative state_derivative(const State& x, const ControlPoint& u, double theta_dot,
                                 const DynamicsParams& params);

/// One integration step of length params.dt; psi is wrapped to (-pi, pi].
State step(const State& x, const ControlPoint& u, double theta_dot, const DynamicsParams& params);

/// Forward-difference pitch rate of a sequence; the last value is repeated,
/// and a single-point sequence has zero rate.
Eigen::VectorXd pitch_rates(const ControlSequence& controls, double dt);

/// Trajectory of K+1 states; element 0 is x0. Throws SingularityError with the
/// offending control index.
std::vector<State> rollout(const State& x0, const ControlSequence& controls,
                           const DynamicsParams& params);

double wrap_angle(double angle);

}  // namespace pimppi
