#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace rlqr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Dynamics pair (A, B) used to step a trajectory. Kept separate from
// LinearSystem so the same policy can be simulated on perturbed models.
struct Model {
  MatrixXd a;
  MatrixXd b;
};

/**
 * Nominal discrete-time linear system with quadratic cost and additive
 * Gaussian process noise:
 *
 *   x_{t+1} = A x_t + B u_t + w_t,  w_t ~ N(0, sigma^2 I_n)
 *   cost    = sum_t x_t' Q x_t + u_t' R u_t
 *
 * Construction validates dimensions, Q = Q' > 0, R = R' > 0 and sigma >= 0;
 * violations throw InputError.
 */
class LinearSystem {
 public:
  LinearSystem(MatrixXd a_nom, MatrixXd b_nom, MatrixXd q, MatrixXd r,
               double sigma);

  const MatrixXd& a_nom() const { return a_nom_; }
  const MatrixXd& b_nom() const { return b_nom_; }
  const MatrixXd& q() const { return q_; }
  const MatrixXd& r() const { return r_; }
  double sigma() const { return sigma_; }
  int n() const { return static_cast<int>(a_nom_.rows()); }
  int m() const { return static_cast<int>(b_nom_.cols()); }
  Model nominal_model() const { return {a_nom_, b_nom_}; }

 private:
  MatrixXd a_nom_;
  MatrixXd b_nom_;
  MatrixXd q_;
  MatrixXd r_;
  double sigma_;
};

/**
 * Ellipsoidal model set
 *
 *   Theta = { X = [A, B] : (X' - mu)' D (X' - mu) <= I_n }
 *
 * with D symmetric positive definite of size (n+m) and the center mu stored
 * as the (n+m) x n matrix [A_nom, B_nom]'.
 */
class UncertaintyEllipsoid {
 public:
  UncertaintyEllipsoid(MatrixXd d, MatrixXd center);
  // Center taken from the nominal pair.
  UncertaintyEllipsoid(MatrixXd d, const MatrixXd& a_nom, const MatrixXd& b_nom);

  const MatrixXd& d() const { return d_; }
  const MatrixXd& center() const { return center_; }
  int n() const { return static_cast<int>(center_.cols()); }
  int m() const { return static_cast<int>(center_.rows()) - n(); }

  // Largest eigenvalue of (X' - mu)' D (X' - mu); <= 1 inside the set.
  double level(const Model& model) const;
  bool contains(const Model& model, double tol = 1e-9) const;

  // Model X = mu' + Delta' with Delta = D^{-1/2} U, U a uniformly random
  // (n+m) x n matrix with orthonormal columns, so Delta' D Delta = I.
  Model sample_boundary(std::mt19937_64& rng) const;
  std::vector<Model> sample_boundary(int count, std::uint64_t seed) const;

 private:
  MatrixXd d_;
  MatrixXd center_;
};

inline constexpr double kStabilityMargin = 1e-9;

// State feedback u = K x with the closed-loop spectral radius on the model it
// was built for.
struct GainPolicy {
  MatrixXd k;
  double spectral_radius = 0.0;

  bool stabilizing() const { return spectral_radius < 1.0 - kStabilityMargin; }
  static GainPolicy for_model(MatrixXd k, const Model& model);
};

struct Trajectory {
  std::vector<VectorXd> states;    // x_0 .. x_T
  std::vector<VectorXd> controls;  // u_0 .. u_{T-1}

  int horizon() const { return static_cast<int>(controls.size()); }
};

// Independent, reproducible random streams keyed by (seed, stream). Each
// trajectory in a batch owns a stream, so results do not depend on the order
// in which trajectories are simulated.
std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream = 0);

// w_0 .. w_{T-1}, each sigma * N(0, I_n), drawn component-wise in time order.
std::vector<VectorXd> sample_noise(int n, int horizon, double sigma,
                                   std::uint64_t seed);
VectorXd sample_gaussian(int n, double scale, std::mt19937_64& rng);

// Simulates x_{t+1} = A x_t + B u_t + w_t with u_t = K_t x_t. `gains` holds
// either a single gain (time invariant) or one gain per step.
Trajectory simulate(const Model& model, const std::vector<MatrixXd>& gains,
                    const VectorXd& x0, const std::vector<VectorXd>& noise);

Trajectory rollout(const LinearSystem& sys, const Model& model,
                   const GainPolicy& policy, const VectorXd& x0, int horizon,
                   std::uint64_t rng_seed);

// sum_t x_t' Q x_t + u_t' R u_t over all stored states and controls,
// divided by the horizon when `average` is set.
double quadratic_cost(const Trajectory& traj, const MatrixXd& q,
                      const MatrixXd& r, bool average);

double spectral_radius(const MatrixXd& mat);

// Symmetric part (M + M') / 2.
MatrixXd sym(const MatrixXd& m);

// Smallest eigenvalue of the symmetric part.
double min_eigenvalue(const MatrixXd& m);

}  // namespace rlqr
