#pragma once

// Conic-form view of SdpProblem shared by the interior point solver and the
// KKT differentiation:
//
//   minimize c'x  s.t.  Gx + s = h,  Ax = b,  s in K
//
// K is the product of a nonnegative orthant (one entry per nonneg variable)
// and PSD cones in svec form, stacked in that order.

#include <vector>

#include <Eigen/Dense>

#include "rlqr/sdp.hpp"

namespace rlqr::sdp::detail {

struct Cone {
  int l = 0;
  std::vector<int> sizes;
  std::vector<int> offsets;
  int dim = 0;

  int degree() const;
  int block_dim(int k) const { return svec_dim(sizes[k]); }
};

struct ConicForm {
  Cone cone;
  VectorXd c;
  MatrixXd g;
  VectorXd h;
  MatrixXd a;
  VectorXd b;
};

struct ConicDelta {
  VectorXd c;
  MatrixXd g;
  VectorXd h;
  MatrixXd a;
  VectorXd b;
};

Cone make_cone(const SdpProblem& prob);
ConicForm to_conic(const SdpProblem& prob);
ConicDelta to_conic(const SdpProblem& prob, const ProblemDelta& delta);

VectorXd identity(const Cone& cone);
// u o v: elementwise on the orthant, (UV + VU)/2 on PSD blocks.
VectorXd jordan(const Cone& cone, const VectorXd& u, const VectorXd& v);
// Matrix of v -> u o v.
MatrixXd jordan_matrix(const Cone& cone, const VectorXd& u);
// Smallest eigenvalue over all cone blocks (orthant entries count as 1x1).
double min_eig(const Cone& cone, const VectorXd& u);
// Largest alpha with u + alpha du in the cone, for u in the interior.
// Returns +infinity when du is a recession direction.
double max_step(const Cone& cone, const VectorXd& u, const VectorXd& du);

// Matrix of the linear map X -> fn(X) on svec coordinates of a k x k block.
template <typename Fn>
MatrixXd svec_operator(int k, Fn&& fn) {
  const int d = svec_dim(k);
  MatrixXd op(d, d);
  VectorXd e = VectorXd::Zero(d);
  for (int p = 0; p < d; ++p) {
    e(p) = 1.0;
    op.col(p) = svec(fn(smat(e)));
    e(p) = 0.0;
  }
  return op;
}

}  // namespace rlqr::sdp::detail
