#include "pimppi/dynamics.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace pimppi {

double wrap_angle(double angle) {
  double wrapped = std::remainder(angle, 2.0 * std::numbers::pi);
  if (wrapped <= -std::numbers::pi) wrapped += 2.0 * std::numbers::pi;
  return wrapped;
}

StateDerivative state_derivative(const State& x, const ControlPoint& u, double theta_dot,
                                 const DynamicsParams& params) {
  const double cos_theta = std::cos(u.theta);
  const double cos_phi = std::cos(u.phi);
  if (!(u.v > 0.0) || !(cos_theta > params.cos_floor) || !(cos_phi > params.cos_floor)) {
    std::ostringstream msg;
    msg << "control outside model domain (v=" << u.v << ", phi=" << u.phi
        << ", theta=" << u.theta << ")";
    throw SingularityError(msg.str());
  }
  const double sin_theta = std::sin(u.theta);
  const double sin_phi = std::sin(u.phi);

  StateDerivative d;
  d.p_n_dot = u.v * std::cos(x.psi) * cos_theta;
  d.p_e_dot = u.v * std::sin(x.psi) * cos_theta;
  d.p_d_dot = -u.v * sin_theta;
  d.r = params.g / u.v * sin_phi * cos_theta;
  d.q = (theta_dot + d.r * sin_phi) / cos_phi;
  d.psi_dot = sin_phi / cos_theta * d.q + cos_phi / cos_theta * d.r;
  return d;
}

namespace {

State advance(const State& x, const StateDerivative& d, double h) {
  return {x.p_n + h * d.p_n_dot, x.p_e + h * d.p_e_dot, x.p_d + h * d.p_d_dot,
          x.psi + h * d.psi_dot};
}

}  // namespace

State step(const State& x, const ControlPoint& u, double theta_dot, const DynamicsParams& params) {
  const double dt = params.dt;
  State next;
  if (params.scheme == Integrator::Euler) {
    next = advance(x, state_derivative(x, u, theta_dot, params), dt);
  } else {
    // Control held constant over the step, so only psi varies inside the stages.
    const StateDerivative k1 = state_derivative(x, u, theta_dot, params);
    const StateDerivative k2 = state_derivative(advance(x, k1, 0.5 * dt), u, theta_dot, params);
    const StateDerivative k3 = state_derivative(advance(x, k2, 0.5 * dt), u, theta_dot, params);
    const StateDerivative k4 = state_derivative(advance(x, k3, dt), u, theta_dot, params);
    const double w = dt / 6.0;
    next.p_n = x.p_n + w * (k1.p_n_dot + 2.0 * k2.p_n_dot + 2.0 * k3.p_n_dot + k4.p_n_dot);
    next.p_e = x.p_e + w * (k1.p_e_dot + 2.0 * k2.p_e_dot + 2.0 * k3.p_e_dot + k4.p_e_dot);
    next.p_d = x.p_d + w * (k1.p_d_dot + 2.0 * k2.p_d_dot + 2.0 * k3.p_d_dot + k4.p_d_dot);
    next.psi = x.psi + w * (k1.psi_dot + 2.0 * k2.psi_dot + 2.0 * k3.psi_dot + k4.psi_dot);
  }
  next.psi = wrap_angle(next.psi);
  return next;
}

Eigen::VectorXd pitch_rates(const ControlSequence& controls, double dt) {
  const Eigen::Index K = controls.rows();
  Eigen::VectorXd rates = Eigen::VectorXd::Zero(K);
  if (K < 2) return rates;
  for (Eigen::Index k = 0; k + 1 < K; ++k) {
    rates(k) = (controls(k + 1, 2) - controls(k, 2)) / dt;
  }
  rates(K - 1) = rates(K - 2);
  return rates;
}

std::vector<State> rollout(const State& x0, const ControlSequence& controls,
                           const DynamicsParams& params) {
  const Eigen::Index K = controls.rows();
  if (K < 1) throw DimensionError("rollout needs at least one control point");
  const Eigen::VectorXd theta_dot = pitch_rates(controls, params.dt);

  std::vector<State> trajectory;
  trajectory.reserve(static_cast<std::size_t>(K) + 1);
  trajectory.push_back(x0);
  for (Eigen::Index k = 0; k < K; ++k) {
    try {
      trajectory.push_back(
          step(trajectory.back(), ControlPoint::from_row(controls, k), theta_dot(k), params));
    } catch (const SingularityError& e) {
      throw SingularityError(std::string(e.what()) + " at index " + std::to_string(k), k);
    }
  }
  return trajectory;
}

}  // namespace pimppi
