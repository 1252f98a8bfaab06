#include "pimppi/projection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <sstream>
#include <vector>

namespace pimppi {

namespace {

std::atomic<std::size_t> g_factorizations{0};

}  // namespace

// ---------------------------------------------------------------------------
// Bounds and boundary conditions

void DerivativeBounds::validate() const {
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) {
      const auto& iv = limits[ch][j];
      if (!iv) continue;
      if (!std::isfinite(iv->min) || !std::isfinite(iv->max) || !(iv->min < iv->max)) {
        std::ostringstream msg;
        msg << "bound for channel " << kChannelNames[ch] << " order " << j
            << " must be finite with min < max";
        throw ConfigError(msg.str());
      }
    }
  }
}

DerivativeBounds DerivativeBounds::fixed_wing_defaults() {
  DerivativeBounds b;
  b.limits[0] = {Interval{15.0, 25.0}, Interval{-2.0, 2.0}, Interval{-2.0, 2.0}};
  b.limits[1] = {Interval{-0.6, 0.6}, Interval{-0.4, 0.4}, Interval{-1.0, 1.0}};
  b.limits[2] = {Interval{-0.3, 0.3}, Interval{-0.2, 0.2}, Interval{-0.6, 0.6}};
  return b;
}

BoundaryConditions BoundaryConditions::from_control(double v, double phi, double theta) {
  BoundaryConditions bc;
  bc.values[0] = {v, 0.0, 0.0};
  bc.values[1] = {phi, 0.0, 0.0};
  bc.values[2] = {theta, 0.0, 0.0};
  return bc;
}

const char* to_string(Space space) {
  return space == Space::Waypoint ? "waypoint" : "coefficient";
}

Space parse_space(const std::string& text) {
  if (text == "waypoint") return Space::Waypoint;
  if (text == "coeff" || text == "coefficient") return Space::Coefficient;
  throw ConfigError("unknown parametrization space '" + text + "'");
}

BoundaryConditions check_boundary(const BoundaryConditions& bc, const DerivativeBounds& bounds,
                                  int equality_max_order, bool clamp_infeasible) {
  BoundaryConditions out = bc;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j <= equality_max_order; ++j) {
      const auto& iv = bounds.at(ch, j);
      const double value = bc.values[ch][j];
      if (!std::isfinite(value)) throw InfeasibleBoundsError("boundary value is not finite");
      if (!iv || iv->contains(value)) continue;
      std::ostringstream msg;
      msg << "boundary condition " << kChannelNames[ch] << " order " << j << " = " << value
          << " outside [" << iv->min << ", " << iv->max << "]";
      if (!clamp_infeasible) throw InfeasibleBoundsError(msg.str());
      std::clog << "warning: " << msg.str() << ", clamped\n";
      out.values[ch][j] = iv->clamp(value);
    }
  }
  return out;
}

Eigen::VectorXd boundary_vector(const BoundaryConditions& bc, int equality_max_order) {
  const int per_channel = equality_max_order + 1;
  Eigen::VectorXd b(kNumChannels * per_channel);
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < per_channel; ++j) b(ch * per_channel + j) = bc.values[ch][j];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Constraint construction

Eigen::MatrixXd difference_operator(int K, int order, double dt) {
  if (order == 0) return Eigen::MatrixXd::Identity(K, K);
  const int rows = K - order;
  if (rows <= 0) throw DimensionError("horizon too short for difference operator");
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(rows, K);
  for (int k = 0; k < rows; ++k) {
    if (order == 1) {
      D(k, k) = -1.0 / dt;
      D(k, k + 1) = 1.0 / dt;
    } else {
      const double s = 1.0 / (dt * dt);
      D(k, k) = s;
      D(k, k + 1) = -2.0 * s;
      D(k, k + 2) = s;
    }
  }
  return D;
}

Eigen::Index ConstraintSet::num_inequalities() const {
  Eigen::Index rows = 0;
  for (const auto& c : channels) rows += 2 * c.L.rows();
  return rows;
}

Eigen::MatrixXd ConstraintSet::G() const {
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(num_inequalities(), dim());
  Eigen::Index row = 0;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const ChannelConstraints& c = channels[ch];
    for (int j = 0; j < 3; ++j) {
      if (c.ops[j].size() == 0) continue;
      const Eigen::Index rows = c.ops[j].rows();
      const auto block = c.L.middleRows(c.offset[j], rows);
      G.block(row, ch * channel_dim, rows, channel_dim) = block;
      G.block(row + rows, ch * channel_dim, rows, channel_dim) = -block;
      row += 2 * rows;
    }
  }
  return G;
}

Eigen::VectorXd ConstraintSet::h() const {
  Eigen::VectorXd h(num_inequalities());
  Eigen::Index row = 0;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const ChannelConstraints& c = channels[ch];
    for (int j = 0; j < 3; ++j) {
      if (c.ops[j].size() == 0) continue;
      const Eigen::Index rows = c.ops[j].rows();
      h.segment(row, rows) = c.upper.segment(c.offset[j], rows);
      h.segment(row + rows, rows) = -c.lower.segment(c.offset[j], rows);
      row += 2 * rows;
    }
  }
  return h;
}

ConstraintSet build_constraints(const DerivativeBounds& bounds, const BoundaryConditions& bc,
                                Space space, const BasisMatrices* basis, int K, double dt,
                                const ConstraintOptions& options) {
  bounds.validate();
  if (options.equality_max_order < -1 || options.equality_max_order > 2) {
    throw ConfigError("equality order must be -1 (none), 0, 1 or 2");
  }
  if (K < 1) throw DimensionError("horizon must be positive");

  ConstraintSet cs;
  cs.space = space;
  cs.horizon = K;
  cs.dt = dt;
  cs.bounds = bounds;
  cs.equality_max_order = options.equality_max_order;

  std::array<Eigen::MatrixXd, 3> ops;
  if (space == Space::Waypoint) {
    if (!(dt > 0.0)) throw DimensionError("waypoint constraints need dt > 0");
    if (K < options.equality_max_order + 1) throw DimensionError("horizon too short");
    cs.channel_dim = K;
    for (int j = 0; j < 3; ++j) {
      if (K - j >= 1) ops[j] = difference_operator(K, j, dt);
    }
  } else {
    if (basis == nullptr) throw DimensionError("coefficient constraints need a basis");
    if (basis->K != K) throw DimensionError("basis horizon does not match K");
    cs.channel_dim = basis->n;
    ops = {basis->W, basis->Wdot, basis->Wddot};
  }

  for (int ch = 0; ch < kNumChannels; ++ch) {
    ChannelConstraints& c = cs.channels[ch];
    Eigen::Index rows = 0;
    for (int j = 0; j < 3; ++j) {
      if (bounds.at(ch, j) && ops[j].rows() > 0) {
        c.ops[j] = ops[j];
        c.offset[j] = rows;
        rows += ops[j].rows();
      }
    }
    c.L.resize(rows, cs.channel_dim);
    c.lower.resize(rows);
    c.upper.resize(rows);
    for (int j = 0; j < 3; ++j) {
      if (c.ops[j].size() == 0) continue;
      const Interval& iv = *bounds.at(ch, j);
      c.L.middleRows(c.offset[j], c.ops[j].rows()) = c.ops[j];
      c.lower.segment(c.offset[j], c.ops[j].rows()).setConstant(iv.min);
      c.upper.segment(c.offset[j], c.ops[j].rows()).setConstant(iv.max);
    }
    if (options.row_scaling == RowScaling::UnitNorm) {
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double norm = c.L.row(r).norm();
        if (norm <= 0.0) continue;
        c.L.row(r) /= norm;
        c.lower(r) /= norm;
        c.upper(r) /= norm;
      }
    }
  }

  const int per_channel = options.equality_max_order + 1;
  std::array<Eigen::RowVectorXd, 3> pins;
  for (int j = 0; j < per_channel; ++j) pins[j] = ops[j].row(0);
  if (space == Space::Coefficient && options.equality_rows == EqualityRows::ForwardDifference) {
    if (K < per_channel) throw DimensionError("horizon too short");
    if (!(dt > 0.0)) throw DimensionError("difference rows need dt > 0");
    const Eigen::MatrixXd& W = basis->W;
    if (per_channel > 1) pins[1] = (W.row(1) - W.row(0)) / dt;
    if (per_channel > 2) pins[2] = (W.row(0) - 2.0 * W.row(1) + W.row(2)) / (dt * dt);
  }
  cs.A = Eigen::MatrixXd::Zero(kNumChannels * per_channel, cs.dim());
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < per_channel; ++j) {
      cs.A.block(ch * per_channel + j, ch * cs.channel_dim, 1, cs.channel_dim) = pins[j];
    }
  }
  const BoundaryConditions checked =
      check_boundary(bc, bounds, options.equality_max_order, options.clamp_infeasible);
  cs.b = boundary_vector(checked, options.equality_max_order);
  return cs;
}

// ---------------------------------------------------------------------------
// Solver

// Compressed rows of L, used when at most a quarter of the entries are
// nonzero (the waypoint difference operators).
struct SparseRows {
  bool used{false};
  std::vector<Eigen::Index> start;
  std::vector<Eigen::Index> col;
  std::vector<double> value;

  static SparseRows from_dense(const Eigen::MatrixXd& L) {
    SparseRows s;
    const Eigen::Index nnz = (L.array() != 0.0).count();
    if (L.size() == 0 || 4 * nnz > L.size()) return s;
    s.used = true;
    s.start.reserve(static_cast<std::size_t>(L.rows() + 1));
    s.start.push_back(0);
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      for (Eigen::Index c = 0; c < L.cols(); ++c) {
        if (L(r, c) != 0.0) {
          s.col.push_back(c);
          s.value.push_back(L(r, c));
        }
      }
      s.start.push_back(static_cast<Eigen::Index>(s.col.size()));
    }
    return s;
  }
};

struct ProjectionSolver::Factorization {
  Eigen::MatrixXd D;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
  // D^{-1} is block diagonal per channel since A and G are; S holds the
  // blocks acting on the stacked right-hand side, T those acting on b.
  std::array<Eigen::MatrixXd, kNumChannels> S;
  std::array<Eigen::MatrixXd, kNumChannels> T;
  std::array<Eigen::MatrixXd, kNumChannels> L;
  std::array<SparseRows, kNumChannels> Lsparse;
  std::array<Eigen::MatrixXd, kNumChannels> LtL2;   // 2 L^T L
  std::array<SparseRows, kNumChannels> LtL2_sparse;
  std::array<Eigen::MatrixXd, kNumChannels> Lpinv;  // L (2 L^T L)^+
  std::array<Eigen::Index, kNumChannels> eq_begin{};
  std::array<Eigen::Index, kNumChannels> eq_count{};
};

ProjectionSolver::ProjectionSolver(ConstraintSet constraints, SolverOptions options)
    : constraints_(std::move(constraints)), options_(options) {
  if (!(options_.delta > 0.0)) throw ConfigError("delta must be positive");
  if (!(options_.dual_scale > 0.0)) throw ConfigError("dual_scale must be positive");
  const int N = constraints_.dim();
  const int n = constraints_.channel_dim;
  const Eigen::Index p = constraints_.A.rows();
  if (constraints_.A.cols() != N) throw DimensionError("A has wrong column count");
  if (constraints_.b.size() != p) throw DimensionError("b has wrong length");
  if (p > 0) {
    Eigen::FullPivLU<Eigen::MatrixXd> rank_check(constraints_.A);
    if (rank_check.rank() < p) throw DimensionError("equality matrix A lacks full row rank");
  }

  auto f = std::make_shared<Factorization>();
  const Eigen::MatrixXd G = constraints_.G();
  f->D = Eigen::MatrixXd::Zero(N + p, N + p);
  f->D.topLeftCorner(N, N).setIdentity();
  if (G.rows() > 0) f->D.topLeftCorner(N, N).noalias() += options_.delta * G.transpose() * G;
  f->D.topRightCorner(N, p) = constraints_.A.transpose();
  f->D.bottomLeftCorner(p, N) = constraints_.A;
  f->lu.compute(f->D);
  ++g_factorizations;

  const Eigen::MatrixXd Dinv = f->lu.inverse();
  for (int ch = 0; ch < kNumChannels; ++ch) {
    // Equality rows touching this channel.
    Eigen::Index first = p, count = 0;
    for (Eigen::Index r = 0; r < p; ++r) {
      if (constraints_.A.row(r).segment(ch * n, n).cwiseAbs().maxCoeff() > 0.0) {
        first = std::min(first, r);
        ++count;
      }
    }
    f->eq_begin[ch] = count > 0 ? first : 0;
    f->eq_count[ch] = count;
    f->S[ch] = Dinv.block(ch * n, ch * n, n, n);
    f->T[ch] = Dinv.block(ch * n, N + f->eq_begin[ch], n, count);

    f->L[ch] = constraints_.channels[ch].L;
    f->Lsparse[ch] = SparseRows::from_dense(f->L[ch]);
    f->LtL2[ch] = 2.0 * f->L[ch].transpose() * f->L[ch];
    f->LtL2_sparse[ch] = SparseRows::from_dense(f->LtL2[ch]);
    if (f->L[ch].rows() > 0) {
      Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(f->LtL2[ch]);
      f->Lpinv[ch] = f->L[ch] * cod.pseudoInverse();
    } else {
      f->Lpinv[ch].resize(0, n);
    }
  }
  kkt_ = std::move(f);
}

ProjectionSolver ProjectionSolver::with_boundary(const BoundaryConditions& bc,
                                                 bool clamp_infeasible) const {
  ProjectionSolver copy;
  copy.constraints_ = constraints_;
  copy.options_ = options_;
  copy.kkt_ = kkt_;
  const BoundaryConditions checked = check_boundary(bc, constraints_.bounds,
                                                    constraints_.equality_max_order,
                                                    clamp_infeasible);
  copy.constraints_.b = boundary_vector(checked, constraints_.equality_max_order);
  return copy;
}

ProjectionSolver ProjectionSolver::with_options(const SolverOptions& options) const {
  if (options.delta != options_.delta) return ProjectionSolver(constraints_, options);
  if (!(options.dual_scale > 0.0)) throw ConfigError("dual_scale must be positive");
  ProjectionSolver copy;
  copy.constraints_ = constraints_;
  copy.options_ = options;
  copy.kkt_ = kkt_;
  return copy;
}

Eigen::VectorXd ProjectionSolver::solve_kkt(const Eigen::Ref<const Eigen::VectorXd>& rhs) const {
  const int N = dim();
  const Eigen::Index p = constraints_.A.rows();
  if (rhs.size() != N) throw DimensionError("KKT right-hand side has wrong length");
  Eigen::VectorXd full(N + p);
  full.head(N) = rhs;
  full.tail(p) = constraints_.b;
  return kkt_->lu.solve(full).head(N);
}

const Eigen::MatrixXd& ProjectionSolver::kkt_matrix() const { return kkt_->D; }

std::size_t ProjectionSolver::factorization_count() { return g_factorizations.load(); }

// ---------------------------------------------------------------------------
// ADMM iteration
//
// Per channel G = [L; -L] and h = [upper; -lower], so with y split into the
// upper and lower halves every G-sized quantity is handled row-wise on L:
//   G^T (h - zeta)  = L^T w,   w = upper + lower - zeta_up + zeta_lo
//   G^T r           = 2 L^T L z_new - L^T w
// which costs one product with L and one with L^T per channel and iteration.

namespace {

// Position of (channel, order, row, side) inside the rows of G.
struct GLayout {
  std::array<std::array<Eigen::Index, 3>, kNumChannels> base{};

  explicit GLayout(const ConstraintSet& cs) {
    Eigen::Index row = 0;
    for (int ch = 0; ch < kNumChannels; ++ch) {
      for (int j = 0; j < 3; ++j) {
        base[ch][j] = row;
        row += 2 * cs.channels[ch].ops[j].rows();
      }
    }
  }
};

// Up to kWidth independent lanes advanced together. Every lane-indexed
// quantity is a Pack holding one value per lane, so all arithmetic is
// elementwise across lanes and each lane sees the same sequence of
// operations whatever the other lanes hold. A single projection is a block
// with one used lane.
constexpr int kWidth = 8;
using Pack = Eigen::Array<double, kWidth, 1>;
using Packs = std::vector<Pack, Eigen::aligned_allocator<Pack>>;

class LaneBlock {
 public:
  explicit LaneBlock(const ProjectionSolver& solver)
      : f_(solver.factorization()),
        cs_(solver.constraints()),
        opt_(solver.options()),
        n_(cs_.channel_dim),
        N_(cs_.dim()) {
    const auto vec = [](Eigen::Index size) {
      return Packs(static_cast<std::size_t>(size), Pack::Zero());
    };
    nu_ = vec(N_);
    nu_bar_ = vec(N_);
    lambda_ = vec(N_);
    g_ = vec(N_);
    rhs_ = vec(N_);
    step_ = vec(N_);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const Eigen::Index rows = f_.L[ch].rows();
      Lz_[ch] = vec(rows);
      w_[ch] = vec(rows);
      for (int s = 0; s < 2; ++s) {
        zeta_up_[s][ch] = vec(rows);
        zeta_lo_[s][ch] = vec(rows);
      }
      y_up_[ch] = vec(rows);
      y_lo_[ch] = vec(rows);
      // Constant part of the primal step.
      offset_[ch] = f_.T[ch] * cs_.b.segment(f_.eq_begin[ch], f_.eq_count[ch]);
    }
  }

  void set_lane(int l, const Eigen::Ref<const Eigen::VectorXd>& nu, const AdmmInit& init) {
    if (nu.size() != N_) throw DimensionError("projection input has wrong dimension");
    put(nu_, l, nu);
    if (init.nu_bar.size() > 0) {
      if (init.nu_bar.size() != N_) throw DimensionError("initial nu_bar has wrong dimension");
      put(nu_bar_, l, init.nu_bar);
    }
    if (init.y.size() > 0) {
      if (init.y.size() != cs_.num_inequalities()) {
        throw DimensionError("initial y has wrong dimension");
      }
      scatter_y(l, init.y);
      if (init.lambda.size() > 0) {
        if (init.lambda.size() != N_) throw DimensionError("initial lambda has wrong dimension");
        put(lambda_, l, init.lambda);
      } else {
        put(lambda_, l, lambda_from_y(l));
      }
    } else if (init.lambda.size() > 0) {
      if (init.lambda.size() != N_) throw DimensionError("initial lambda has wrong dimension");
      put(lambda_, l, init.lambda);
      for (int ch = 0; ch < kNumChannels; ++ch) {
        const Eigen::VectorXd half = f_.Lpinv[ch] * init.lambda.segment(ch * n_, n_);
        for (Eigen::Index r = 0; r < half.size(); ++r) {
          y_up_[ch][r](l) = -half(r);
          y_lo_[ch][r](l) = half(r);
        }
      }
    }
  }

  /// Computes the first slack and g from the initial iterate.
  void start() {
    for (int ch = 0; ch < kNumChannels; ++ch) row_pass(ch, false);
    cur_ ^= 1;
  }

  /// One iteration; change(l) = |(nu_bar, lambda)^{l+1} - (nu_bar, lambda)^l|_2.
  void iterate(Pack& change) {
    const double delta = opt_.delta;
    const double kappa = opt_.dual_scale * delta;
    for (std::size_t i = 0; i < nu_.size(); ++i) rhs_[i] = nu_[i] + lambda_[i] + delta * g_[i];

    // Primal step through the stored factorization; g = G^T (h - zeta) is
    // left over from the previous row pass.
    Pack sq = Pack::Zero();
    for (int ch = 0; ch < kNumChannels; ++ch) {
      Pack* out = step_.data() + ch * n_;
      for (Eigen::Index i = 0; i < n_; ++i) out[i].setZero();
      dense_apply(f_.S[ch], rhs_.data() + ch * n_, out);
      const Pack* old = nu_bar_.data() + ch * n_;
      for (Eigen::Index i = 0; i < n_; ++i) {
        out[i] += offset_[ch](i);
        sq += (out[i] - old[i]).square();
      }
    }
    nu_bar_.swap(step_);

    // lambda <- lambda - kappa (2 L^T L z - g), before g is overwritten.
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const Pack* z = nu_bar_.data() + ch * n_;
      Pack* dl = step_.data() + ch * n_;  // reused as scratch
      for (Eigen::Index i = 0; i < n_; ++i) dl[i].setZero();
      if (f_.LtL2_sparse[ch].used) {
        sparse_apply(f_.LtL2_sparse[ch], 0, n_, z, dl);
      } else {
        dense_apply(f_.LtL2[ch], z, dl);
      }
      const Pack* g = g_.data() + ch * n_;
      Pack* lam = lambda_.data() + ch * n_;
      for (Eigen::Index i = 0; i < n_; ++i) {
        const Pack d = -kappa * (dl[i] - g[i]);
        sq += d.square();
        lam[i] += d;
      }
    }

    // y step with this iteration's slack, then the next slack and g.
    for (int ch = 0; ch < kNumChannels; ++ch) row_pass(ch, true);
    cur_ ^= 1;
    change = sq.sqrt();
  }

  Eigen::VectorXd nu_bar(int l) const { return take(nu_bar_, l); }
  Eigen::VectorXd lambda(int l) const { return take(lambda_, l); }
  Eigen::VectorXd y(int l) const { return gather(y_up_, y_lo_, l); }
  /// Slack of the most recent iteration in the row order of G.
  Eigen::VectorXd zeta(int l) const { return gather(zeta_up_[cur_ ^ 1], zeta_lo_[cur_ ^ 1], l); }

 private:
  using Buffers = std::array<Packs, kNumChannels>;
  static constexpr Eigen::Index kBlock = 64;

  // out += M x for a dense column-major M.
  static void dense_apply(const Eigen::MatrixXd& M, const Pack* x, Pack* out) {
    const Eigen::Index rows = M.rows();
    for (Eigen::Index k = 0; k < M.cols(); ++k) {
      const double* col = M.data() + k * rows;
      const Pack xk = x[k];
      for (Eigen::Index i = 0; i < rows; ++i) out[i] += col[i] * xk;
    }
  }

  // out[r] += (M x)[r] for rows r0..r1 of a compressed-row M.
  static void sparse_apply(const SparseRows& M, Eigen::Index r0, Eigen::Index r1, const Pack* x,
                           Pack* out) {
    for (Eigen::Index r = r0; r < r1; ++r) {
      Pack acc = out[r];
      for (Eigen::Index k = M.start[r]; k < M.start[r + 1]; ++k) acc += M.value[k] * x[M.col[k]];
      out[r] = acc;
    }
  }

  // One sweep over the rows of L for channel ch in cache-sized blocks:
  // Lz = L z, optionally the y step with the slack in [cur_], then the next
  // slack into [cur_ ^ 1], w and g = L^T w. The caller flips cur_.
  void row_pass(int ch, bool dual_step) {
    const ChannelConstraints& c = cs_.channels[ch];
    const SparseRows& sp = f_.Lsparse[ch];
    const Eigen::Index rows = f_.L[ch].rows();
    const double* Lc = f_.L[ch].data();
    const double* up = c.upper.data();
    const double* lo = c.lower.data();
    const Pack* z = nu_bar_.data() + ch * n_;
    Pack* lz = Lz_[ch].data();
    Pack* yu = y_up_[ch].data();
    Pack* yl = y_lo_[ch].data();
    const Pack* zu_old = zeta_up_[cur_][ch].data();
    const Pack* zl_old = zeta_lo_[cur_][ch].data();
    Pack* zu = zeta_up_[cur_ ^ 1][ch].data();
    Pack* zl = zeta_lo_[cur_ ^ 1][ch].data();
    Pack* w = w_[ch].data();
    Pack* g = g_.data() + ch * n_;
    const double kappa = opt_.dual_scale * opt_.delta;
    const double inv_delta = opt_.slack_rule == SlackRule::Shifted ? 1.0 / opt_.delta : 0.0;

    for (Eigen::Index i = 0; i < n_; ++i) g[i].setZero();
    for (Eigen::Index r0 = 0; r0 < rows; r0 += kBlock) {
      const Eigen::Index r1 = std::min(rows, r0 + kBlock);
      for (Eigen::Index r = r0; r < r1; ++r) lz[r].setZero();
      if (sp.used) {
        sparse_apply(sp, r0, r1, z, lz);
      } else {
        for (Eigen::Index i = 0; i < n_; ++i) {
          const double* col = Lc + i * rows;
          const Pack zi = z[i];
          for (Eigen::Index r = r0; r < r1; ++r) lz[r] += col[r] * zi;
        }
      }
      if (dual_step) {
        for (Eigen::Index r = r0; r < r1; ++r) {
          yu[r] += kappa * (lz[r] - up[r] + zu_old[r]);
          yl[r] += kappa * (lo[r] - lz[r] + zl_old[r]);
        }
      }
      for (Eigen::Index r = r0; r < r1; ++r) {
        zu[r] = (up[r] - lz[r] - yu[r] * inv_delta).max(0.0);
        zl[r] = (lz[r] - lo[r] - yl[r] * inv_delta).max(0.0);
        w[r] = (up[r] + lo[r]) - zu[r] + zl[r];
      }
      if (sp.used) {
        for (Eigen::Index r = r0; r < r1; ++r) {
          const Pack wr = w[r];
          for (Eigen::Index k = sp.start[r]; k < sp.start[r + 1]; ++k) g[sp.col[k]] += sp.value[k] * wr;
        }
      } else {
        for (Eigen::Index i = 0; i < n_; ++i) {
          const double* col = Lc + i * rows;
          Pack acc = g[i];
          for (Eigen::Index r = r0; r < r1; ++r) acc += col[r] * w[r];
          g[i] = acc;
        }
      }
    }
  }

  static void put(Packs& dst, int l, const Eigen::Ref<const Eigen::VectorXd>& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) dst[i](l) = v(i);
  }

  static Eigen::VectorXd take(const Packs& src, int l) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(src.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = src[i](l);
    return v;
  }

  Eigen::VectorXd gather(const Buffers& up, const Buffers& lo, int l) const {
    const GLayout layout(cs_);
    Eigen::VectorXd out(cs_.num_inequalities());
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const ChannelConstraints& c = cs_.channels[ch];
      for (int j = 0; j < 3; ++j) {
        if (c.ops[j].size() == 0) continue;
        const Eigen::Index rows = c.ops[j].rows();
        for (Eigen::Index r = 0; r < rows; ++r) {
          out(layout.base[ch][j] + r) = up[ch][c.offset[j] + r](l);
          out(layout.base[ch][j] + rows + r) = lo[ch][c.offset[j] + r](l);
        }
      }
    }
    return out;
  }

  void scatter_y(int l, const Eigen::VectorXd& y) {
    const GLayout layout(cs_);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const ChannelConstraints& c = cs_.channels[ch];
      for (int j = 0; j < 3; ++j) {
        if (c.ops[j].size() == 0) continue;
        const Eigen::Index rows = c.ops[j].rows();
        for (Eigen::Index r = 0; r < rows; ++r) {
          y_up_[ch][c.offset[j] + r](l) = y(layout.base[ch][j] + r);
          y_lo_[ch][c.offset[j] + r](l) = y(layout.base[ch][j] + rows + r);
        }
      }
    }
  }

  Eigen::VectorXd lambda_from_y(int l) const {
    Eigen::VectorXd lambda(N_);
    for (int ch = 0; ch < kNumChannels; ++ch) {
      const Eigen::Index rows = f_.L[ch].rows();
      Eigen::VectorXd diff(rows);
      for (Eigen::Index r = 0; r < rows; ++r) diff(r) = y_up_[ch][r](l) - y_lo_[ch][r](l);
      lambda.segment(ch * n_, n_).noalias() = -(f_.L[ch].transpose() * diff);
    }
    return lambda;
  }

  const ProjectionSolver::Factorization& f_;
  const ConstraintSet& cs_;
  const SolverOptions& opt_;
  const Eigen::Index n_;
  const Eigen::Index N_;

  Packs nu_;
  Packs nu_bar_;
  Packs lambda_;
  Packs g_;
  Packs rhs_;
  Packs step_;
  std::array<Eigen::VectorXd, kNumChannels> offset_;
  Buffers Lz_;
  Buffers w_;
  // Slack double buffer: [cur_] is consumed by the next y step.
  std::array<Buffers, 2> zeta_up_;
  std::array<Buffers, 2> zeta_lo_;
  int cur_{0};
  Buffers y_up_;
  Buffers y_lo_;
};

// Runs up to `iters` iterations on a prepared block. Lane l stops (and its
// outputs are frozen) once its change drops below tol, exactly as a single
// lane would.
void run_block(LaneBlock& block, int used, int iters, double tol,
               std::array<ProjectionResult, kWidth>& results) {
  std::array<bool, kWidth> done{};
  for (int l = 0; l < used; ++l) results[l].residual_history.reserve(static_cast<std::size_t>(iters));
  block.start();
  Pack change = Pack::Zero();
  int remaining = used;
  for (int it = 0; it < iters && remaining > 0; ++it) {
    block.iterate(change);
    for (int l = 0; l < used; ++l) {
      if (done[l]) continue;
      results[l].residual_history.push_back(change(l));
      if (tol > 0.0 && change(l) < tol) {
        done[l] = true;
        --remaining;
        results[l].nu_bar = block.nu_bar(l);
        results[l].lambda = block.lambda(l);
        results[l].y = block.y(l);
      }
    }
  }
  for (int l = 0; l < used; ++l) {
    if (done[l]) continue;
    results[l].nu_bar = block.nu_bar(l);
    results[l].lambda = block.lambda(l);
    results[l].y = block.y(l);
  }
}

}  // namespace

Eigen::VectorXd multiplier_from_lambda(const Eigen::Ref<const Eigen::VectorXd>& lambda,
                                       const ProjectionSolver& solver) {
  if (lambda.size() != solver.dim()) throw DimensionError("lambda has wrong dimension");
  const ConstraintSet& cs = solver.constraints();
  const auto& f = solver.factorization();
  const GLayout layout(cs);
  const int n = cs.channel_dim;
  Eigen::VectorXd y(cs.num_inequalities());
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const Eigen::VectorXd half = f.Lpinv[ch] * lambda.segment(ch * n, n);
    const ChannelConstraints& c = cs.channels[ch];
    for (int j = 0; j < 3; ++j) {
      const Eigen::Index rows = c.ops[j].rows();
      if (c.ops[j].size() == 0) continue;
      y.segment(layout.base[ch][j], rows) = -half.segment(c.offset[j], rows);
      y.segment(layout.base[ch][j] + rows, rows) = half.segment(c.offset[j], rows);
    }
  }
  return y;
}

AdmmState zero_state(const ProjectionSolver& solver) {
  AdmmState s;
  s.nu_bar = Eigen::VectorXd::Zero(solver.dim());
  s.lambda = Eigen::VectorXd::Zero(solver.dim());
  s.zeta = Eigen::VectorXd::Zero(solver.constraints().num_inequalities());
  s.y = Eigen::VectorXd::Zero(solver.constraints().num_inequalities());
  return s;
}

AdmmState admm_iterate(const AdmmState& state, const Eigen::Ref<const Eigen::VectorXd>& nu,
                       const ProjectionSolver& solver) {
  LaneBlock block(solver);
  block.set_lane(0, nu, {state.nu_bar, state.lambda, state.y});
  block.start();
  Pack change;
  block.iterate(change);
  AdmmState next;
  next.nu_bar = block.nu_bar(0);
  next.lambda = block.lambda(0);
  next.zeta = block.zeta(0);
  next.y = block.y(0);
  return next;
}

AdmmState admm_iterate_dense(const AdmmState& state, const Eigen::Ref<const Eigen::VectorXd>& nu,
                             const ProjectionSolver& solver) {
  const ConstraintSet& cs = solver.constraints();
  const SolverOptions& opt = solver.options();
  const Eigen::MatrixXd G = cs.G();
  const Eigen::VectorXd h = cs.h();
  if (state.nu_bar.size() != cs.dim() || state.lambda.size() != cs.dim() ||
      nu.size() != cs.dim()) {
    throw DimensionError("ADMM state does not match solver dimension");
  }
  const Eigen::VectorXd y =
      state.y.size() > 0 ? Eigen::VectorXd(state.y) : multiplier_from_lambda(state.lambda, solver);
  if (y.size() != G.rows()) throw DimensionError("ADMM multiplier has wrong dimension");

  AdmmState next;
  Eigen::VectorXd shifted = h - G * state.nu_bar;
  if (opt.slack_rule == SlackRule::Shifted) shifted -= y / opt.delta;
  next.zeta = shifted.cwiseMax(0.0);
  const Eigen::VectorXd rhs = nu + state.lambda + opt.delta * G.transpose() * (h - next.zeta);
  next.nu_bar = solver.solve_kkt(rhs);
  const Eigen::VectorXd r = G * next.nu_bar - h + next.zeta;
  const double kappa = opt.dual_scale * opt.delta;
  next.y = y + kappa * r;
  next.lambda = state.lambda - kappa * G.transpose() * r;
  return next;
}

ProjectionResult project(const Eigen::Ref<const Eigen::VectorXd>& nu, const ProjectionSolver& solver,
                         const AdmmInit& init, int iterations) {
  const int iters = iterations >= 0 ? iterations : solver.options().max_iters;
  LaneBlock block(solver);
  block.set_lane(0, nu, init);
  std::array<ProjectionResult, kWidth> results;
  run_block(block, 1, iters, solver.options().tolerance, results);
  return std::move(results[0]);
}

Eigen::MatrixXd batch_project(const Eigen::Ref<const Eigen::MatrixXd>& nus,
                              const ProjectionSolver& solver, const BatchInit& init, int iterations,
                              std::vector<std::vector<double>>* residual_histories) {
  const Eigen::Index M = nus.rows();
  if (nus.cols() != solver.dim()) throw DimensionError("batch input has wrong column count");
  const bool seeded_nu = init.nu_bar.size() > 0;
  const bool seeded_lambda = init.lambda.size() > 0;
  if ((seeded_nu && (init.nu_bar.rows() != M || init.nu_bar.cols() != nus.cols())) ||
      (seeded_lambda && (init.lambda.rows() != M || init.lambda.cols() != nus.cols()))) {
    throw DimensionError("batch initialization has wrong shape");
  }
  const int iters = iterations >= 0 ? iterations : solver.options().max_iters;

  Eigen::MatrixXd out(M, nus.cols());
  if (residual_histories) residual_histories->assign(static_cast<std::size_t>(M), {});
  const Eigen::Index blocks = (M + kWidth - 1) / kWidth;

#pragma omp parallel for schedule(static)
  for (Eigen::Index blk = 0; blk < blocks; ++blk) {
    const Eigen::Index first = blk * kWidth;
    const int used = static_cast<int>(std::min<Eigen::Index>(kWidth, M - first));
    LaneBlock block(solver);
    for (int l = 0; l < used; ++l) {
      AdmmInit lane_init;
      if (seeded_nu) lane_init.nu_bar = init.nu_bar.row(first + l).transpose();
      if (seeded_lambda) lane_init.lambda = init.lambda.row(first + l).transpose();
      block.set_lane(l, nus.row(first + l).transpose(), lane_init);
    }
    std::array<ProjectionResult, kWidth> results;
    run_block(block, used, iters, solver.options().tolerance, results);
    for (int l = 0; l < used; ++l) {
      out.row(first + l) = results[l].nu_bar.transpose();
      if (residual_histories) {
        (*residual_histories)[static_cast<std::size_t>(first + l)] =
            std::move(results[l].residual_history);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Residuals

double ConstraintResiduals::max_inequality() const {
  double worst = 0.0;
  for (const auto& ch : inequality) {
    for (double v : ch) worst = std::max(worst, v);
  }
  return worst;
}

ConstraintResiduals constraint_residuals(const Eigen::Ref<const Eigen::VectorXd>& nu_bar,
                                         const ConstraintSet& cs) {
  if (nu_bar.size() != cs.dim()) throw DimensionError("residual input has wrong dimension");
  ConstraintResiduals res;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    const auto z = nu_bar.segment(ch * cs.channel_dim, cs.channel_dim);
    for (int j = 0; j < 3; ++j) {
      const Eigen::MatrixXd& D = cs.channels[ch].ops[j];
      if (D.size() == 0) continue;
      const Interval& iv = *cs.bounds.at(ch, j);
      const Eigen::VectorXd values = D * z;
      double worst = 0.0;
      for (Eigen::Index k = 0; k < values.size(); ++k) worst = std::max(worst, iv.violation(values(k)));
      res.inequality[ch][j] = worst;
    }
  }
  if (cs.A.rows() > 0) res.equality = (cs.A * nu_bar - cs.b).cwiseAbs().maxCoeff();
  return res;
}

ConstraintResiduals sequence_residuals(const ControlSequence& u, const DerivativeBounds& bounds,
                                       double dt) {
  ConstraintResiduals res;
  const int K = static_cast<int>(u.rows());
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) {
      const auto& iv = bounds.at(ch, j);
      if (!iv || K - j < 1) continue;
      const Eigen::VectorXd values = difference_operator(K, j, dt) * u.col(ch);
      double worst = 0.0;
      for (Eigen::Index k = 0; k < values.size(); ++k) worst = std::max(worst, iv->violation(values(k)));
      res.inequality[ch][j] = worst;
    }
  }
  return res;
}

}  // namespace pimppi
