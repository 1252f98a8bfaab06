#include "pimppi/basis.hpp"

#include <string>

namespace pimppi {

namespace {

// All Bernstein polynomials of the given degree at s in [0, 1], via the
// triangular recurrence B_{i,d} = (1-s) B_{i,d-1} + s B_{i-1,d-1}.
Eigen::VectorXd bernstein_all(int degree, double s) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(degree + 1);
  b(0) = 1.0;
  for (int d = 1; d <= degree; ++d) {
    for (int i = d; i >= 1; --i) b(i) = (1.0 - s) * b(i) + s * b(i - 1);
    b(0) *= (1.0 - s);
  }
  return b;
}

}  // namespace

Eigen::VectorXd CoefficientTriple::stacked() const {
  Eigen::VectorXd c(c_v.size() + c_phi.size() + c_theta.size());
  c << c_v, c_phi, c_theta;
  return c;
}

CoefficientTriple CoefficientTriple::from_stacked(const Eigen::Ref<const Eigen::VectorXd>& c,
                                                  int n) {
  if (c.size() != 3 * n) throw DimensionError("stacked coefficient vector must have length 3n");
  return {c.segment(0, n), c.segment(n, n), c.segment(2 * n, n)};
}

const Eigen::VectorXd& CoefficientTriple::operator[](int channel) const {
  return channel == 0 ? c_v : (channel == 1 ? c_phi : c_theta);
}

Eigen::VectorXd& CoefficientTriple::operator[](int channel) {
  return channel == 0 ? c_v : (channel == 1 ? c_phi : c_theta);
}

BasisMatrices build_basis(int K, int n, double T) {
  if (n < 2 || n > K || !(T > 0.0)) {
    throw DimensionError("build_basis requires 2 <= n <= K and T > 0 (got K=" +
                         std::to_string(K) + ", n=" + std::to_string(n) + ")");
  }
  const int deg = n - 1;
  BasisMatrices B;
  B.n = n;
  B.K = K;
  B.T = T;
  B.W.setZero(K, n);
  B.Wdot.setZero(K, n);
  B.Wddot.setZero(K, n);

  for (int k = 0; k < K; ++k) {
    const double s = static_cast<double>(k) / static_cast<double>(K - 1);
    B.W.row(k) = bernstein_all(deg, s).transpose();
    // d/ds B_{i,d} = d (B_{i-1,d-1} - B_{i,d-1})
    const Eigen::VectorXd b1 = bernstein_all(deg - 1, s);
    for (int i = 0; i <= deg; ++i) {
      const double left = i >= 1 ? b1(i - 1) : 0.0;
      const double right = i <= deg - 1 ? b1(i) : 0.0;
      B.Wdot(k, i) = deg * (left - right) / T;
    }
    if (deg >= 2) {
      const Eigen::VectorXd b2 = bernstein_all(deg - 2, s);
      for (int i = 0; i <= deg; ++i) {
        const double a = i >= 2 ? b2(i - 2) : 0.0;
        const double m = (i >= 1 && i - 1 <= deg - 2) ? b2(i - 1) : 0.0;
        const double c = i <= deg - 2 ? b2(i) : 0.0;
        B.Wddot(k, i) = deg * (deg - 1) * (a - 2.0 * m + c) / (T * T);
      }
    }
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(B.W);
  if (qr.rank() < n) throw RankError("basis matrix W lacks full column rank");
  B.W_pinv = qr.solve(Eigen::MatrixXd::Identity(K, K));
  return B;
}

ControlSequence coeffs_to_controls(const CoefficientTriple& c, const BasisMatrices& B,
                                   Derivative order) {
  const Eigen::MatrixXd& M =
      order == Derivative::Value ? B.W : (order == Derivative::First ? B.Wdot : B.Wddot);
  ControlSequence u(B.K, kNumChannels);
  for (int ch = 0; ch < kNumChannels; ++ch) {
    if (c[ch].size() != B.n) throw DimensionError("coefficient length does not match basis");
    u.col(ch).noalias() = M * c[ch];
  }
  return u;
}

CoefficientTriple fit_coeffs(const ControlSequence& u, const BasisMatrices& B) {
  if (u.rows() != B.K) throw DimensionError("sequence length does not match basis");
  CoefficientTriple c;
  for (int ch = 0; ch < kNumChannels; ++ch) c[ch].noalias() = B.W_pinv * u.col(ch);
  return c;
}

ControlSequence stacked_to_controls(const Eigen::Ref<const Eigen::VectorXd>& c,
                                    const BasisMatrices& B) {
  if (c.size() != 3 * B.n) throw DimensionError("stacked coefficient vector must have length 3n");
  ControlSequence u(B.K, kNumChannels);
  for (int ch = 0; ch < kNumChannels; ++ch) u.col(ch).noalias() = B.W * c.segment(ch * B.n, B.n);
  return u;
}

Eigen::VectorXd controls_to_stacked(const ControlSequence& u, const BasisMatrices& B) {
  if (u.rows() != B.K) throw DimensionError("sequence length does not match basis");
  Eigen::VectorXd c(3 * B.n);
  for (int ch = 0; ch < kNumChannels; ++ch) c.segment(ch * B.n, B.n).noalias() = B.W_pinv * u.col(ch);
  return c;
}

}  // namespace pimppi
