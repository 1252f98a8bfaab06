#pragma once

#include "pimppi/mppi.hpp"

#include <optional>

namespace pimppi {

// Comparison controllers: standard MPPI with clipping and Savitzky-Golay
// smoothing (optionally with bound-violation penalties, or with noise drawn
// on polynomial coefficients). No projection.

struct SgfConfig {
  int window{11};
  int order{3};
  /// Throws ConfigError unless the window is odd and order < window.
  void validate() const;
};

/// Per-channel Savitzky-Golay smoothing. Interior points use the centered
/// window; the first and last window/2 points are evaluated on the
/// polynomial fitted to the first or last full window.
ControlSequence sgf_smooth(const ControlSequence& u, const SgfConfig& config);

/// Elementwise clamp to the order-0 bounds of each channel.
ControlSequence clip_controls(const ControlSequence& u, const DerivativeBounds& bounds);

/// Weight of each max(0, g) term per channel and derivative order.
struct PenaltyConfig {
  std::array<std::array<double, 3>, kNumChannels> weights{};
  void validate() const;
};

/// sum over channels, orders and time steps of weight * violation, with the
/// derivatives taken as finite differences of the sequence.
double bound_penalty(const ControlSequence& u, const DerivativeBounds& bounds,
                     const PenaltyConfig& penalties, double dt);

/// `base` plus bound_penalty on the sampled sequence. Keeps a reference to
/// base, which must outlive the wrapper.
class PenaltyAugmentedCost : public CostFunction {
 public:
  PenaltyAugmentedCost(const CostFunction& base, DerivativeBounds bounds, PenaltyConfig penalties,
                       double dt);
  double running(const State& x, const ControlPoint& u, int k) const override;
  double terminal(const State& x) const override;
  double sequence(const ControlSequence& u) const override;

 private:
  const CostFunction& base_;
  DerivativeBounds bounds_;
  PenaltyConfig penalties_;
  double dt_;
};

PenaltyAugmentedCost penalty_augmented_cost(const CostFunction& base, const DerivativeBounds& bounds,
                                            const PenaltyConfig& penalties, double dt);

struct BaselineConfig {
  /// Waypoint noise for the SGF variants, coefficient noise for MPPI-poly.
  MppiParams mppi;
  DerivativeBounds bounds{DerivativeBounds::fixed_wing_defaults()};
  SgfConfig sgf;
  std::optional<PenaltyConfig> penalty;
  /// Basis size of the coefficient noise.
  int n{11};
  /// Sigma_k of the control term in the weights.
  Eigen::Matrix3d weight_cov{Eigen::Matrix3d::Zero()};
  bool shift{true};
};

/// Sample, clip, roll out, weight with the unclipped mean, update and smooth.
class BaselineController : public Controller {
 public:
  BaselineController(BaselineConfig config, const ControlPoint& trim, std::string name,
                     const DynamicsParams& dynamics = {});

  std::string name() const override { return name_; }
  ControlSequence plan(const State& x, const CostFunction& cost,
                       StepDiagnostics* diagnostics) override;
  void advance() override;
  const MppiParams& params() const override { return config_.mppi; }

  /// One step from an explicit mean; batch.nus holds the clipped samples.
  ControlSequence step(const State& x, const ControlSequence& mean_in, const CostFunction& cost,
                       SampleBatch* batch, StepDiagnostics* diagnostics);

  const ControlSequence& mean() const { return mean_; }
  void set_mean(const ControlSequence& mean) { mean_ = mean; }
  const BaselineConfig& config() const { return config_; }
  const BasisMatrices* basis() const { return basis_.get(); }

 private:
  BaselineConfig config_;
  DynamicsParams dynamics_;
  std::shared_ptr<const BasisMatrices> basis_;
  ControlSequence mean_;
  ControlSequence last_plan_;
  std::uint64_t stream_{0};
  std::string name_;
};

}  // namespace pimppi
