#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rlqr/autodiff.hpp"
#include "rlqr/lin_sys.hpp"
#include "rlqr/lmi_layers.hpp"

namespace rlqr {

enum class Scenario { known_model_unknown_d = 1, known_d_unknown_model = 2 };
enum class LayerKind { nominal_lmi, robust_lmi, finite_horizon };
// Policies trained on the stochastic control task; `linear` is the plain
// u = Kx baseline trained with Adam.
enum class AdpPolicy { nominal_lmi, robust_lmi, linear };

std::string to_string(LayerKind layer);
std::string to_string(AdpPolicy policy);
std::string to_string(Scenario scenario);
// Accepts "nominal", "robust", "finite" (and the full enum names).
LayerKind parse_layer(const std::string& s);
AdpPolicy parse_adp_policy(const std::string& s);
Scenario parse_scenario(int s);

// Child seed for an independent stream, e.g. derive_seed(seed, kDemoNoise, i).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// ---------------------------------------------------------------------------
// Experts and demonstrations

struct ExpertOptions {
  double d_min = 1.5;  // diagonal entries of D* ~ U[d_min, d_max]
  double d_max = 4.0;
  bool diag_uncertainty = true;  // otherwise D* = V diag(U[d_min, d_max]) V'
  int max_rejections = 100;
  int stability_samples = 100;
  double epsilon = 1e-9;
};

struct ExpertSpec {
  LinearSystem sys;  // true (A*, B*), Q* = R* = I, sigma*
  UncertaintyEllipsoid unc;
  GainPolicy expert_gain;
  std::uint64_t seed = 0;
  int rejections = 0;
};

// Gaussian (A, B) with A rescaled so rho(A) <= 0.9, D* as configured;
// resampled until the robust SDP is feasible and the robust gain stabilizes
// `stability_samples` boundary models. Throws SolverError after
// max_rejections consecutive rejections.
ExpertSpec generate_expert(std::uint64_t seed, int n, int m, double sigma,
                           const ExpertOptions& opts = {});

struct DemoSet {
  std::vector<Trajectory> trajectories;
  std::vector<VectorXd> initial_states;

  int count() const { return static_cast<int>(trajectories.size()); }
};

// Expert rollouts on the true nominal model, x0 ~ N(0, I), one fixed noise
// stream per trajectory.
DemoSet generate_demos(const ExpertSpec& expert, int count, int horizon, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Losses

// Mean over pairs of ||tau* - tau||^2 over stacked states and controls
// (states only when `states_only`). Throws InputError on count or horizon
// mismatch.
double imitation_loss(const std::vector<Trajectory>& demos,
                      const std::vector<Trajectory>& learner, bool states_only = false);
// Learner trajectories generated from each demo's initial state.
using TrajectoryGenerator = std::function<Trajectory(const VectorXd& x0, int index)>;
double imitation_loss(const DemoSet& demos, const TrajectoryGenerator& learner,
                      bool states_only = false);

// Frobenius norm of the learned blocks' difference: D in Scenario 1,
// [A, B] in Scenario 2.
double model_loss(const LayerParams& estimate, const LayerParams& truth, Scenario scenario);

struct ValidationOptions {
  int horizon = 50;
  int n_rollouts = 32;
  int n_models = 100;
  double cap = 1e6;
  double x0_scale = 1.0;  // x0 ~ N(0, x0_scale^2 I)
};

struct CostStats {
  double mean = 0.0;
  double stddev = 0.0;
  bool capped = false;  // at least one rollout hit the cap
  int worst_model = -1;
};

// Average stage cost of the policy on the worst of `n_models` boundary
// models of the true ellipsoid (by mean rollout cost, common random numbers
// across models), with mean and standard deviation over rollouts. `gains`
// holds one time-invariant gain or one gain per step. A model on which the
// stationary gain (the first one) is not stabilizing scores `cap`; rollouts
// above `cap` are capped.
CostStats validation_cost(const std::vector<MatrixXd>& gains, const ExpertSpec& truth,
                          const ValidationOptions& opts, std::uint64_t seed);
CostStats validation_cost(const GainPolicy& policy, const ExpertSpec& truth,
                          const ValidationOptions& opts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pathwise rollout differentiation

struct RolloutGradient {
  MatrixXd d_k;  // time-invariant gain
  MatrixXd d_a;
  MatrixXd d_b;
};

// Reverse-mode gradient of a loss of the trajectory x_{t+1} = A x_t + B u_t
// + w_t, u_t = K x_t (noise frozen), given dl/dx_t and dl/du_t.
RolloutGradient rollout_gradient(const Trajectory& traj, const Model& model, const MatrixXd& k,
                                 const std::vector<VectorXd>& d_states,
                                 const std::vector<VectorXd>& d_controls);

// ---------------------------------------------------------------------------
// Optimizers

struct RmspropConfig {
  double lr = 0.01;
  double momentum = 0.5;
  double decay = 0.99;
  double eps = 1e-8;
  double d_floor = 1e-6;   // eigenvalue floor for D
  double qr_floor = 1e-6;  // eigenvalue floor for Q, R
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct IterationRecord {
  int iteration = 0;
  double imitation_loss = 0.0;
  double model_loss = 0.0;
  double validation_cost = 0.0;
  double wall_time_s = 0.0;
  GradPath gradient_path = GradPath::implicit;
  double train_cost = 0.0;  // stochastic-control batch cost
  std::string event;        // skipped steps, rollbacks, rejections
};

struct TrainState {
  LayerParams params;
  ParamMask mask;
  bool diag_d = false;  // keep D diagonal
  LayerParams mean_square;  // RMSprop running mean of g^2, shaped like params
  LayerParams momentum;     // RMSprop momentum buffer
  MatrixXd gain;            // current policy gain
  int iteration = 0;
  std::vector<IterationRecord> history;

  static TrainState init(LayerParams params, const ParamMask& mask, bool diag_d = false);
};

// One RMSprop-with-momentum step on the trainable blocks. Q, R, D are
// re-symmetrized and floored to SPD, sigma floored at 0, D kept diagonal when
// requested. Returns false (state untouched) for a non-finite gradient.
bool rmsprop_step(TrainState& state, const ParamGradient& grads,
                  const RmspropConfig& cfg = {});

struct AdamState {
  VectorXd m, v;
  int t = 0;
};
// theta -= lr * m_hat / (sqrt(v_hat) + eps). Returns false for a non-finite gradient.
bool adam_step(VectorXd& theta, AdamState& state, const VectorXd& grad, const AdamConfig& cfg = {});

// ---------------------------------------------------------------------------
// Training

struct ImitationConfig {
  int n = 3;
  int m = 3;
  double sigma = 0.1;
  ExpertOptions expert;
  int n_demos = 64;
  int horizon = 20;
  int iterations = 200;
  int minibatch = 16;
  bool states_only = false;
  double d_init = 5.0;   // learner D = d_init I in Scenario 1
  RmspropConfig optimizer;
  ValidationOptions validation;
  int validate_every = 1;  // 0 disables per-iteration validation
  GradOptions grad;
  std::uint64_t seed = 0;
  std::optional<LayerParams> init;  // replaces imitation_init
};

struct ImitationRun {
  ExpertSpec expert;
  TrainState state;
  // Validation of the final policy.
  CostStats final_validation;
};

// Learner trajectories are rolled out on the learner's own nominal model
// from each demo's initial state with fresh noise (frozen per minibatch).
// Scenario 1 trains D only (robust layer; other layers have nothing to
// train), Scenario 2 trains A, B. A failed solve skips the iteration, rolls
// back to the last feasible parameters and is recorded in the history.
ImitationRun train_imitation(Scenario scenario, LayerKind layer, const ImitationConfig& cfg);
ImitationRun train_imitation(const ExpertSpec& expert, const DemoSet& demos, Scenario scenario,
                             LayerKind layer, const ImitationConfig& cfg);

// Initial learner parameters shared by every learner of one seed. In
// Scenario 2 the random stable model is redrawn until the robust layer is
// feasible under the known D.
LayerParams imitation_init(const ExpertSpec& expert, Scenario scenario,
                           const ImitationConfig& cfg);

// Time-varying or time-invariant gains of a layer at the given parameters;
// finite_horizon plans over `horizon` steps.
std::vector<MatrixXd> layer_gains(LayerKind layer, const LayerParams& params, int horizon,
                                  const GradOptions& opts = {});

struct AdpConfig {
  int n = 3;
  int m = 3;
  double sigma = 0.1;
  ExpertOptions system;  // draws the true uncertain system
  int horizon = 20;
  int batch = 64;
  int iterations = 200;
  RmspropConfig optimizer{0.03};  // lr from a grid search on seeds 100-104
  AdamConfig adam;
  double cap = 1e6;
  int eval_rollouts = 256;
  GradOptions grad;
  std::uint64_t seed = 0;
  std::optional<LayerParams> init;  // replaces the random Gaussian init
};

struct AdpRun {
  ExpertSpec truth;
  TrainState state;
  double final_cost = 0.0;  // fixed evaluation batch, common across policies
  bool diverged = false;    // final cost hit the cap
};

// Batch cost (1/T) sum_t |x_t|^2 + |u_t|^2 on models sampled from the true
// ellipsoid boundary, x0 ~ N(0, I). Rollouts above `cap` count as `cap` and
// contribute no gradient.
struct BatchCost {
  double cost = 0.0;
  int capped = 0;
  MatrixXd d_k;
};
BatchCost adp_batch_cost(const MatrixXd& k, const ExpertSpec& truth, int horizon, int batch,
                         double cap, std::uint64_t seed, bool with_gradient);

AdpRun train_adp(AdpPolicy policy, const AdpConfig& cfg);

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p(int wins, int trials);

}  // namespace rlqr
