#pragma once

#include "pimppi/basis.hpp"
#include "pimppi/types.hpp"

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

namespace pimppi {

// Projection filter: the QP
//
//   min_z 1/2 |nu - z|^2   s.t.   A z = b,   G z <= h
//
// where A pins the value (and first derivative) of every channel at k = 0 and
// G z <= h bounds each channel and its first and second time derivatives,
// solved with a batched ADMM scheme whose KKT matrix is factored once.
//
// Sign convention: G z - h + zeta = 0 with zeta >= 0, y the multiplier of
// that constraint and lambda = -G^T y its image in the decision space. One
// iteration is
//   zeta   <- max(0, -(G z - h) - y / delta)
//   [z mu] <- D^{-1} [nu + lambda + delta G^T (h - zeta); b]
//   y      <- y + (dual_scale * delta) (G z - h + zeta)
//   lambda <- lambda - (dual_scale * delta) G^T (G z - h + zeta)
// with D = [I + delta G^T G, A^T; A, 0]. SlackRule::Unshifted drops the
// y / delta term; that variant reaches a feasible point but in general not
// the minimizer, since multipliers of constraints violated early on are
// never released.

struct Interval {
  double min{0.0};
  double max{0.0};
  double range() const { return max - min; }
  bool contains(double x) const { return x >= min && x <= max; }
  double clamp(double x) const { return x < min ? min : (x > max ? max : x); }
  double violation(double x) const {
    return x > max ? x - max : (x < min ? min - x : 0.0);
  }
};

/// Magnitude bounds per channel (v, phi, theta) and derivative order j = 0, 1, 2,
/// in channel units / s^j. A missing entry leaves that order unconstrained.
struct DerivativeBounds {
  std::array<std::array<std::optional<Interval>, 3>, kNumChannels> limits{};

  const std::optional<Interval>& at(int channel, int order) const {
    return limits[channel][order];
  }
  /// Throws ConfigError unless every present interval is finite with min < max.
  void validate() const;
  /// Default fixed-wing limits used by the benchmarks.
  static DerivativeBounds fixed_wing_defaults();
};

/// Value and derivatives of each channel at k = 0: values[channel][order].
struct BoundaryConditions {
  std::array<std::array<double, 3>, kNumChannels> values{};

  static BoundaryConditions from_control(double v, double phi, double theta);
};

enum class Space { Waypoint, Coefficient };

const char* to_string(Space space);
Space parse_space(const std::string& text);

class InfeasibleBoundsError : public Error {
 public:
  using Error::Error;
};

/// Positive rescaling of inequality rows. The feasible set and the QP
/// solution are unchanged; only the ADMM iterates differ.
enum class RowScaling { None, UnitNorm };

/// Rows that pin the derivatives at k = 0 in coefficient space: the exact
/// derivative of the polynomial, or forward differences of its samples. The
/// waypoint space always uses differences.
enum class EqualityRows { Analytic, ForwardDifference };

struct ConstraintOptions {
  /// Highest derivative order pinned at k = 0 (0, 1 or 2; -1 pins nothing).
  int equality_max_order{1};
  EqualityRows equality_rows{EqualityRows::Analytic};
  /// Clamp boundary values that fall outside the bounds instead of throwing.
  bool clamp_infeasible{false};
  RowScaling row_scaling{RowScaling::None};
};

/// Per-channel rows of the stacked linear operator L = [D_0; D_1; D_2] with
/// lower <= L z_channel <= upper. ops keep the unscaled D_j; L, lower and
/// upper carry any row scaling.
struct ChannelConstraints {
  std::array<Eigen::MatrixXd, 3> ops;      // D_j, empty when order j is unbounded
  std::array<Eigen::Index, 3> offset{};    // first row of D_j inside L
  Eigen::MatrixXd L;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

struct ConstraintSet {
  Space space{Space::Waypoint};
  int horizon{0};       // K
  int channel_dim{0};   // K (waypoint) or n (coefficient)
  double dt{0.0};
  DerivativeBounds bounds;
  int equality_max_order{1};
  std::array<ChannelConstraints, kNumChannels> channels;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  /// Decision dimension N: 3K or 3n.
  int dim() const { return kNumChannels * channel_dim; }
  Eigen::Index num_inequalities() const;  // rows of G
  /// Dense G with, per channel and order, the block [L_j; -L_j].
  Eigen::MatrixXd G() const;
  /// Matching h = [upper_j; -lower_j] per block.
  Eigen::VectorXd h() const;
};

/// Finite-difference operators of the waypoint space.
Eigen::MatrixXd difference_operator(int K, int order, double dt);

ConstraintSet build_constraints(const DerivativeBounds& bounds, const BoundaryConditions& bc,
                                Space space, const BasisMatrices* basis, int K, double dt,
                                const ConstraintOptions& options = {});

/// Stacked equality right-hand side, per channel (value, first, [second]).
Eigen::VectorXd boundary_vector(const BoundaryConditions& bc, int equality_max_order);

/// Checks bc against the bounds, clamping if allowed; returns the adjusted
/// conditions or throws InfeasibleBoundsError.
BoundaryConditions check_boundary(const BoundaryConditions& bc, const DerivativeBounds& bounds,
                                  int equality_max_order, bool clamp_infeasible);

enum class SlackRule { Shifted, Unshifted };

struct SolverOptions {
  double delta{1.0};
  /// Dual step is dual_scale * delta.
  double dual_scale{0.5};
  int max_iters{50};
  /// Stop early once the fixed-point residual drops below this; 0 disables.
  double tolerance{0.0};
  SlackRule slack_rule{SlackRule::Shifted};
};

struct AdmmState {
  Eigen::VectorXd nu_bar;
  Eigen::VectorXd lambda;  // decision space, equals -G^T y
  Eigen::VectorXd zeta;    // rows of G, >= 0
  Eigen::VectorXd y;       // rows of G
};

class ProjectionSolver {
 public:
  ProjectionSolver(ConstraintSet constraints, SolverOptions options = {});

  /// Same A, G and factorization with a new equality right-hand side.
  ProjectionSolver with_boundary(const BoundaryConditions& bc, bool clamp_infeasible = false) const;
  ProjectionSolver with_options(const SolverOptions& options) const;

  const ConstraintSet& constraints() const { return constraints_; }
  const SolverOptions& options() const { return options_; }
  int dim() const { return constraints_.dim(); }

  /// Solves D [z; mu] = [rhs; b] with the stored factorization; returns z.
  Eigen::VectorXd solve_kkt(const Eigen::Ref<const Eigen::VectorXd>& rhs) const;
  /// The assembled KKT matrix D.
  const Eigen::MatrixXd& kkt_matrix() const;

  /// Number of KKT factorizations performed process-wide.
  static std::size_t factorization_count();

  struct Factorization;
  const Factorization& factorization() const { return *kkt_; }

 private:
  ProjectionSolver() = default;

  ConstraintSet constraints_;
  SolverOptions options_;
  std::shared_ptr<const Factorization> kkt_;
};

AdmmState zero_state(const ProjectionSolver& solver);

/// One application of the fixed-point map (structured evaluation).
AdmmState admm_iterate(const AdmmState& state, const Eigen::Ref<const Eigen::VectorXd>& nu,
                       const ProjectionSolver& solver);

/// The same map evaluated literally with the dense G and h.
AdmmState admm_iterate_dense(const AdmmState& state, const Eigen::Ref<const Eigen::VectorXd>& nu,
                             const ProjectionSolver& solver);

struct ProjectionResult {
  Eigen::VectorXd nu_bar;
  Eigen::VectorXd lambda;
  Eigen::VectorXd y;
  /// |(nu_bar, lambda)^{l+1} - (nu_bar, lambda)^l|_2 per iteration.
  std::vector<double> residual_history;
};

/// Initial iterate; empty vectors mean zero. When only lambda is given, y is
/// the minimum-norm solution of -G^T y = lambda.
struct AdmmInit {
  Eigen::VectorXd nu_bar;
  Eigen::VectorXd lambda;
  Eigen::VectorXd y;
};

/// Minimum-norm y with -G^T y = lambda.
Eigen::VectorXd multiplier_from_lambda(const Eigen::Ref<const Eigen::VectorXd>& lambda,
                                       const ProjectionSolver& solver);

/// Runs solver.options().max_iters iterations (or `iterations` when >= 0).
ProjectionResult project(const Eigen::Ref<const Eigen::VectorXd>& nu, const ProjectionSolver& solver,
                         const AdmmInit& init = {}, int iterations = -1);

/// Row-wise projection of an M x N matrix; each row is identical to a
/// separate project() call. Rows of init_nu_bar / init_lambda, when non-empty,
/// seed the corresponding lanes.
struct BatchInit {
  Eigen::MatrixXd nu_bar;
  Eigen::MatrixXd lambda;
};

Eigen::MatrixXd batch_project(const Eigen::Ref<const Eigen::MatrixXd>& nus,
                              const ProjectionSolver& solver, const BatchInit& init = {},
                              int iterations = -1,
                              std::vector<std::vector<double>>* residual_histories = nullptr);

struct ConstraintResiduals {
  /// max over k of the bound violation, per channel and order.
  std::array<std::array<double, 3>, kNumChannels> inequality{};
  double equality{0.0};  // |A z - b|_inf

  double max_inequality() const;
};

ConstraintResiduals constraint_residuals(const Eigen::Ref<const Eigen::VectorXd>& nu_bar,
                                         const ConstraintSet& constraints);

/// Residuals of a waypoint sequence against bounds using finite differences.
ConstraintResiduals sequence_residuals(const ControlSequence& u, const DerivativeBounds& bounds,
                                       double dt);

}  // namespace pimppi
