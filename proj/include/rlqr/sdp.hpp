#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rlqr::sdp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Scaled lower-triangular vectorization of symmetric matrices: entries are
// taken column by column from the lower triangle and off-diagonals are
// multiplied by sqrt(2), so svec(A)'svec(B) = trace(AB).
int svec_dim(int k);
int svec_side(int dim);  // inverse of svec_dim; throws on a non-triangular size
VectorXd svec(const MatrixXd& s);
MatrixXd smat(const VectorXd& v);
// Position of entry (i, j) (either triangle) of a k x k matrix in svec.
int svec_index(int i, int j, int k);

// F(x) = smat(offset + lin * x), required to be positive semidefinite.
struct PsdBlock {
  int size = 0;
  VectorXd offset;  // svec_dim(size)
  MatrixXd lin;     // svec_dim(size) x var_dim
};

// Derivative of the problem data along one external parameter. Shapes match
// the corresponding SdpProblem fields.
struct ProblemDelta {
  VectorXd c;
  MatrixXd eq_a;
  VectorXd eq_b;
  std::vector<PsdBlock> psd_blocks;
};

/**
 * Dense SDP in standard conic form:
 *
 *   minimize    c'x
 *   subject to  eq_a x = eq_b
 *               F_k(x) >= 0 (PSD) for every block k
 *               x_j >= 0 for j in nonneg_vars
 *
 * Every block map is affine in x and produces symmetric matrices by
 * construction (it is stored in svec form). param_jacobian, when present,
 * holds one ProblemDelta per external parameter.
 */
struct SdpProblem {
  int var_dim = 0;
  VectorXd c;
  MatrixXd eq_a;
  VectorXd eq_b;
  std::vector<PsdBlock> psd_blocks;
  std::vector<int> nonneg_vars;
  std::vector<ProblemDelta> param_jacobian;

  // Throws InputError when shapes are inconsistent.
  void validate() const;
  MatrixXd block_value(int k, const VectorXd& x) const;
};

enum class SdpStatus { optimal, infeasible, unbounded, max_iter };
std::string to_string(SdpStatus status);

struct SdpSolution {
  VectorXd primal;                 // x
  VectorXd eq_dual;                // multipliers of eq_a x = eq_b
  std::vector<MatrixXd> psd_dual;  // Z_k, one per PSD block
  VectorXd nonneg_dual;            // one per entry of nonneg_vars
  // Stacked conic slack and dual (nonnegative part first, then svec blocks).
  VectorXd slack;
  VectorXd cone_dual;
  double primal_objective = 0.0;
  double dual_objective = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double duality_gap = 0.0;
  int iterations = 0;
  SdpStatus status = SdpStatus::max_iter;

  bool optimal() const { return status == SdpStatus::optimal; }
};

struct SolveOptions {
  double tol = 1e-8;
  int max_iter = 200;
  bool polish = true;  // Newton refinement on the exact KKT system after convergence
};

// Primal-dual interior point method (Mehrotra predictor-corrector with
// Nesterov-Todd scaling, infeasible start). Never throws on infeasible or
// unbounded input; the outcome is reported in SdpSolution::status.
SdpSolution solve(const SdpProblem& prob, const SolveOptions& opts = {});

// Solves problems on up to `threads` workers; output order matches input.
std::vector<SdpSolution> solve_batch(const std::vector<SdpProblem>& probs,
                                     const SolveOptions& opts = {},
                                     int threads = 1);

/**
 * Linearization of the optimality conditions at an optimal solution
 *
 *   G'z + A'y + c = 0,  Gx + s = h,  Ax = b,  s o z = 0
 *
 * with respect to (x, y, z, s). Forward and adjoint solves share one LU
 * factorization. Construction throws DegeneracyError when the (equilibrated)
 * system is numerically singular, i.e. its estimated condition number
 * exceeds `max_condition`.
 */
class KktLinearization {
 public:
  KktLinearization(const SdpProblem& prob, const SdpSolution& sol,
                   double max_condition = 1e12);

  // Directional derivative of x* along a parameter direction (one weight
  // per entry of param_jacobian).
  VectorXd forward(const VectorXd& dparam) const;
  // Derivative of x* along an explicit data perturbation.
  VectorXd forward(const ProblemDelta& delta) const;
  // Gradient over parameters of g'x*, i.e. the transpose of forward().
  VectorXd adjoint(const VectorXd& dl_dx) const;

  double condition_estimate() const { return condition_; }

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
  double condition_ = 0.0;
};

VectorXd kkt_differentiate(const SdpProblem& prob, const SdpSolution& sol,
                           const VectorXd& dparam);

// Sparse triplet dump for cross-checking with external solvers.
//   vars <N>
//   c <var> <value>
//   eq <row> <var> <value> / eqb <row> <value>
//   block <k> <size>
//   F <k> <var|-1 for offset> <i> <j> <value>   (lower-triangle matrix entries)
//   nonneg <var>
void write_triplets(const SdpProblem& prob, std::ostream& os);

}  // namespace rlqr::sdp
