#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rlqr/lmi_layers.hpp"
#include "rlqr/sdp.hpp"

namespace rlqr {

// Which parameter blocks are trainable.
struct ParamMask {
  bool a = true, b = true, q = true, r = true, d = true, sigma = true;

  static ParamMask all() { return {}; }
  static ParamMask none() { return {false, false, false, false, false, false}; }
  static ParamMask nominal() { return {true, true, true, true, false, false}; }
  // Per-entry view in ParamLayout order.
  VectorXd expand(const ParamLayout& layout) const;
  bool any() const { return a || b || q || r || d || sigma; }
};

enum class GradPath { implicit, finite_diff };
std::string to_string(GradPath path);

struct ParamGradient {
  MatrixXd d_a_nom, d_b_nom, d_q, d_r, d_d;
  double d_sigma = 0.0;
  ParamMask mask;
  GradPath path = GradPath::implicit;
  double condition = 0.0;  // KKT condition estimate when the implicit path ran
  std::vector<std::string> warnings;

  static ParamGradient zeros(int n, int m, const ParamMask& mask = {});
  static ParamGradient unflatten(const VectorXd& g, const ParamLayout& layout,
                                 const ParamMask& mask = {});
  VectorXd flatten() const;
  ParamLayout layout() const;
  // Zeroes frozen blocks.
  void apply_mask();
};

// Gradient of a scalar loss with respect to (W, Z) of K = Z' W^{-1}.
struct GainGradient {
  MatrixXd d_w;  // symmetric
  MatrixXd d_z;
};
GainGradient grad_through_gain(const MatrixXd& dl_dk, const MatrixXd& w, const MatrixXd& z);
GainGradient grad_through_gain(const MatrixXd& dl_dk, const RobustEncoding& enc,
                               const sdp::SdpSolution& sol);

// Upstream gradient of a loss l(K, cost) at the layer output; dl_dcost only
// applies to the robust layer (worst-case cost).
struct LayerLossGrad {
  MatrixXd dl_dk;
  double dl_dcost = 0.0;
};

struct GradOptions {
  ParamMask mask;
  double max_condition = 1e12;
  bool allow_fallback = true;
  bool force_finite_diff = false;
  double fd_rel_step = 1e-5;
  double fd_min_step = 1e-7;
  sdp::SolveOptions solve;
  RobustOptions robust;  // used for finite-difference re-solves
  int threads = 1;
};

ParamGradient grad_robust_layer(const LayerLossGrad& loss, const LinearSystem& sys,
                                const UncertaintyEllipsoid& unc, const RobustEncoding& enc,
                                const sdp::SdpSolution& sol, const GradOptions& opts = {});

ParamGradient grad_nominal_layer(const MatrixXd& dl_dk, const LinearSystem& sys,
                                 const NominalEncoding& enc, const sdp::SdpSolution& sol,
                                 const GradOptions& opts = {});

// A loss over layer parameters; nullopt (or a thrown SolverError, InputError
// or NumericalError) marks an infeasible evaluation.
using ParamLoss = std::function<std::optional<double>(const LayerParams&)>;

// Central differences per scalar parameter. Symmetric blocks (Q, R, D) move
// (i, j) and (j, i) together; the step is max(rel_step |theta_j|, min_step).
// Coordinates whose perturbed loss cannot be evaluated are left at zero and
// named in `warnings`.
ParamGradient fd_oracle(const ParamLoss& loss, const LayerParams& theta,
                        const ParamMask& mask = {}, double rel_step = 1e-5,
                        double min_step = 1e-7, int threads = 1);

}  // namespace rlqr
