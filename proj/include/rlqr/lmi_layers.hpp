#pragma once

#include <Eigen/Dense>

#include "rlqr/lin_sys.hpp"
#include "rlqr/riccati.hpp"
#include "rlqr/sdp.hpp"

namespace rlqr {

// Flat layer parameters theta = [vec(A), vec(B), vec(Q), vec(R), vec(D), sigma]
// (column-major). Both encodings wire param_jacobian in this layout; the
// nominal encoding has zero derivatives along D and sigma.
struct ParamLayout {
  int n = 0;
  int m = 0;

  int a_offset() const { return 0; }
  int b_offset() const { return n * n; }
  int q_offset() const { return b_offset() + n * m; }
  int r_offset() const { return q_offset() + n * n; }
  int d_offset() const { return r_offset() + m * m; }
  int sigma_offset() const { return d_offset() + (n + m) * (n + m); }
  int size() const { return sigma_offset() + 1; }
};

struct LayerParams {
  MatrixXd a, b, q, r, d;
  double sigma = 0.0;

  ParamLayout layout() const {
    return {static_cast<int>(a.rows()), static_cast<int>(b.cols())};
  }
  VectorXd flatten() const;
  static LayerParams unflatten(const VectorXd& theta, const ParamLayout& layout);
  static LayerParams from(const LinearSystem& sys, const UncertaintyEllipsoid& unc);
  static LayerParams from(const LinearSystem& sys);  // D = I placeholder
  LinearSystem system() const;
  UncertaintyEllipsoid ellipsoid() const;
};

/**
 * Nominal LQR as an SDP over x = [svec(P), vec(S1), vec(S2)]:
 *
 *   maximize trace(P)
 *   s.t.  S1 = PB,  S2 = PA,
 *         [[R + sym(B'S1), B'S2], [S2'B, Q - P + sym(A'S2)]] >= 0,  P >= 0
 *
 * The optimal P is the stabilizing ARE solution.
 */
struct NominalEncoding {
  int n = 0;
  int m = 0;
  sdp::SdpProblem problem;

  int p_offset() const { return 0; }
  int s1_offset() const { return sdp::svec_dim(n); }
  int s2_offset() const { return s1_offset() + n * m; }
  MatrixXd p(const VectorXd& x) const;
};

struct RobustOptions {
  double epsilon = 1e-9;      // floor Xi >= epsilon I
  bool use_aux = true;        // S = Xi [A, B]' as a variable with equalities
  bool with_jacobian = true;  // fill param_jacobian
};

/**
 * Robust LQR over x = [svec(Xi), lambda, vec(S)] with Xi = [[W, Z], [Z', Y]]
 * and Xbar = [A, B]:
 *
 *   minimize trace(diag(Q, R) Xi)
 *   s.t.  S = Xi Xbar',  lambda >= 0,  Xi - epsilon I >= 0,
 *         [[I,       sigma I,                         0        ],
 *          [sigma I, W - Xbar Xi Xbar' - lambda I,    S'       ],
 *          [0,       S,                               lambda D - Xi]] >= 0
 *
 * The last LMI is the S-procedure form of W >= X Xi X' + sigma^2 I for every
 * X in the ellipsoid. Without the auxiliary, S is replaced by Xi Xbar'.
 */
struct RobustEncoding {
  int n = 0;
  int m = 0;
  RobustOptions options;
  sdp::SdpProblem problem;

  int xi_offset() const { return 0; }
  int lambda_offset() const { return sdp::svec_dim(n + m); }
  int s_offset() const { return lambda_offset() + 1; }
  MatrixXd xi(const VectorXd& x) const;
  MatrixXd w(const VectorXd& x) const;
  MatrixXd z(const VectorXd& x) const;
  double lambda(const VectorXd& x) const;
};

NominalEncoding build_nominal_lmi(const LinearSystem& sys, bool with_jacobian = true);
RobustEncoding build_robust_sdp(const LinearSystem& sys,
                                const UncertaintyEllipsoid& unc,
                                const RobustOptions& opts = {});

// Solves and throws SolverError (with the last residual) unless optimal.
sdp::SdpSolution solve_layer(const sdp::SdpProblem& prob,
                             const sdp::SolveOptions& opts = {});

// K = Z' W^{-1}, spectral radius on `nominal`. Throws NumericalError when
// the smallest eigenvalue of W is <= 1e-9.
GainPolicy recover_gain(const RobustEncoding& enc, const sdp::SdpSolution& sol,
                        const Model& nominal);
GainPolicy gain_from_xi(const MatrixXd& xi, int n, const Model& nominal);

// P from the nominal solution, K from lqr_gain and the ARE defect norm.
AreSolution recover_p(const NominalEncoding& enc, const sdp::SdpSolution& sol,
                      const LinearSystem& sys);

// trace(diag(Q, R) Xi) at the solution.
double worst_case_cost(const RobustEncoding& enc, const sdp::SdpSolution& sol,
                       const LinearSystem& sys);

}  // namespace rlqr
