#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "rlqr/lin_sys.hpp"

namespace rlqr {

struct AreSolution {
  MatrixXd p;
  MatrixXd k;
  double residual = 0.0;  // Frobenius norm of the ARE defect at p
  int iterations = 0;
};

struct AreOptions {
  double tol = 1e-12;     // relative to max(1, ||P||_F)
  int max_iter = 100000;
  int divergence_window = 50;
};

// Defect P - (A'PA + Q - A'PB (R + B'PB)^{-1} B'PA).
MatrixXd are_defect(const MatrixXd& p, const MatrixXd& a, const MatrixXd& b,
                    const MatrixXd& q, const MatrixXd& r);

// Stabilizing solution of the discrete-time ARE by value iteration from
// P = Q. Throws SolverError (carrying the last residual) when the residual
// grows for `divergence_window` consecutive iterations or max_iter is hit.
AreSolution solve_are(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q,
                      const MatrixXd& r, const AreOptions& opts = {});

// K = -(B'PB + R)^{-1} B'PA, with the closed-loop spectral radius of A + BK.
// Throws NumericalError when B'PB + R is singular.
GainPolicy lqr_gain(const MatrixXd& p, const MatrixXd& a, const MatrixXd& b,
                    const MatrixXd& r);

struct FiniteHorizonSolution {
  std::vector<MatrixXd> gains;       // K_0 .. K_{T-1}
  std::vector<MatrixXd> value_mats;  // P_0 .. P_T, P_T = Q
  int horizon = 0;
};

// Backward Riccati recursion with terminal cost Q.
FiniteHorizonSolution solve_finite_horizon(const MatrixXd& a,
                                           const MatrixXd& b,
                                           const MatrixXd& q,
                                           const MatrixXd& r, int horizon);

// Rolls out the time-varying plan u_t = K_t x_t. Without an environment the
// plan is simulated on its own model (A, B); noise defaults to zero.
struct PlanRollout {
  VectorXd x0;
  std::optional<Model> environment;
  std::vector<VectorXd> noise;
};

Trajectory execute_plan(const FiniteHorizonSolution& plan, const MatrixXd& a,
                        const MatrixXd& b, const PlanRollout& rollout);

struct TrajectoryGradient {
  std::vector<VectorXd> d_states;    // dl/dx_0 .. dl/dx_T
  std::vector<VectorXd> d_controls;  // dl/du_0 .. dl/du_{T-1}
};

struct ProblemGradient {
  MatrixXd d_a, d_b, d_q, d_r;
};

// Gradient of a scalar loss of the executed plan w.r.t. (A, B, Q, R),
// given dl/dtau. Uses forward-mode differentiation through both the backward
// recursion and the rollout; Q and R gradients are symmetric.
ProblemGradient finite_horizon_grad(const TrajectoryGradient& dl_dtau,
                                    const MatrixXd& a, const MatrixXd& b,
                                    const MatrixXd& q, const MatrixXd& r,
                                    int horizon, const PlanRollout& rollout);

}  // namespace rlqr
