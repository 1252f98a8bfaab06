#pragma once

#include "pimppi/types.hpp"

namespace pimppi {

/// Bernstein polynomial basis of degree n-1 on [0, T], sampled at K uniform
/// times t_k = k T / (K-1). Row k of W evaluates every basis function at t_k;
/// Wdot and Wddot hold the exact first and second time derivatives.
struct BasisMatrices {
  Eigen::MatrixXd W;
  Eigen::MatrixXd Wdot;
  Eigen::MatrixXd Wddot;
  /// Least-squares left inverse of W (n x K).
  Eigen::MatrixXd W_pinv;
  int n{0};
  int K{0};
  double T{0.0};
};

/// Coefficients per channel, each of length n.
struct CoefficientTriple {
  Eigen::VectorXd c_v;
  Eigen::VectorXd c_phi;
  Eigen::VectorXd c_theta;

  /// Channel-major concatenation [c_v; c_phi; c_theta].
  Eigen::VectorXd stacked() const;
  static CoefficientTriple from_stacked(const Eigen::Ref<const Eigen::VectorXd>& c, int n);
  const Eigen::VectorXd& operator[](int channel) const;
  Eigen::VectorXd& operator[](int channel);
};

class RankError : public Error {
 public:
  using Error::Error;
};

/// Throws DimensionError unless 2 <= n <= K and T > 0.
BasisMatrices build_basis(int K, int n, double T);

enum class Derivative { Value = 0, First = 1, Second = 2 };

/// Evaluates the sequence (or its time derivative) described by c.
ControlSequence coeffs_to_controls(const CoefficientTriple& c, const BasisMatrices& B,
                                   Derivative order = Derivative::Value);

/// Channel-wise least squares fit; exact for sequences in the span of W.
CoefficientTriple fit_coeffs(const ControlSequence& u, const BasisMatrices& B);

/// Stacked-coefficient variants used on hot paths.
ControlSequence stacked_to_controls(const Eigen::Ref<const Eigen::VectorXd>& c,
                                    const BasisMatrices& B);
Eigen::VectorXd controls_to_stacked(const ControlSequence& u, const BasisMatrices& B);

}  // namespace pimppi
