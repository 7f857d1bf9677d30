#include "rlqr/learning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "rlqr/errors.hpp"
#include "rlqr/riccati.hpp"

namespace rlqr {

namespace {

// Stream tags for derive_seed.
enum Stream : std::uint64_t {
  kExpertDraw = 1,
  kExpertStability,
  kDemoState,
  kDemoNoise,
  kInit,
  kBatch,
  kLearnerNoise,
  kValidation,
  kValModels,
  kValState,
  kValNoise,
  kAdpInit,
  kAdpBatch,
  kAdpEval,
  kLinearInit,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

MatrixXd gaussian(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixXd out(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) out(i, j) = g(rng);
  return out;
}

MatrixXd stable_gaussian(int n, std::mt19937_64& rng) {
  MatrixXd a = gaussian(n, n, rng);
  const double rho = spectral_radius(a);
  if (rho > 0.9) a *= 0.9 / rho;
  return a;
}

MatrixXd floor_spd(const MatrixXd& m, double floor) {
  const Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(m));
  const VectorXd ev = es.eigenvalues().cwiseMax(floor);
  return sym(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ParamMask scenario_mask(Scenario scenario, LayerKind layer) {
  ParamMask mask = ParamMask::none();
  if (scenario == Scenario::known_model_unknown_d) {
    mask.d = layer == LayerKind::robust_lmi;
  } else {
    mask.a = mask.b = true;
  }
  return mask;
}

}  // namespace

std::string to_string(LayerKind layer) {
  switch (layer) {
    case LayerKind::nominal_lmi: return "nominal";
    case LayerKind::robust_lmi: return "robust";
    case LayerKind::finite_horizon: return "finite";
  }
  return "?";
}

std::string to_string(AdpPolicy policy) {
  switch (policy) {
    case AdpPolicy::nominal_lmi: return "nominal";
    case AdpPolicy::robust_lmi: return "robust";
    case AdpPolicy::linear: return "linear";
  }
  return "?";
}

std::string to_string(Scenario scenario) {
  return scenario == Scenario::known_model_unknown_d ? "1" : "2";
}

LayerKind parse_layer(const std::string& s) {
  if (s == "nominal" || s == "nominal_lmi") return LayerKind::nominal_lmi;
  if (s == "robust" || s == "robust_lmi") return LayerKind::robust_lmi;
  if (s == "finite" || s == "finite_horizon") return LayerKind::finite_horizon;
  throw InputError("unknown layer '" + s + "' (expected nominal, robust or finite)");
}

AdpPolicy parse_adp_policy(const std::string& s) {
  if (s == "nominal" || s == "nominal_lmi") return AdpPolicy::nominal_lmi;
  if (s == "robust" || s == "robust_lmi") return AdpPolicy::robust_lmi;
  if (s == "linear") return AdpPolicy::linear;
  throw InputError("unknown policy '" + s + "' (expected nominal, robust or linear)");
}

Scenario parse_scenario(int s) {
  if (s == 1) return Scenario::known_model_unknown_d;
  if (s == 2) return Scenario::known_d_unknown_model;
  throw InputError("scenario must be 1 or 2");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto rng = make_engine(seed ^ (a * 0x9e3779b97f4a7c15ULL), b + (a << 40));
  return rng();
}

// ---------------------------------------------------------------------------

ExpertSpec generate_expert(std::uint64_t seed, int n, int m, double sigma,
                           const ExpertOptions& opts) {
  if (n < 1 || m < 1) throw InputError("n and m must be >= 1");
  if (!(opts.d_min > 0.0) || opts.d_max < opts.d_min)
    throw InputError("expert D range must satisfy 0 < d_min <= d_max");
  if (opts.max_rejections < 1) throw InputError("max_rejections must be >= 1");
  auto rng = make_engine(seed, kExpertDraw);
  std::uniform_real_distribution<double> unif(opts.d_min, opts.d_max);
  const MatrixXd eye_n = MatrixXd::Identity(n, n), eye_m = MatrixXd::Identity(m, m);
  for (int attempt = 0; attempt < opts.max_rejections; ++attempt) {
    const MatrixXd a = stable_gaussian(n, rng);
    const MatrixXd b = gaussian(n, m, rng);
    VectorXd diag(n + m);
    for (int i = 0; i < n + m; ++i) diag(i) = unif(rng);
    MatrixXd d = diag.asDiagonal();
    if (!opts.diag_uncertainty) {
      const Eigen::HouseholderQR<MatrixXd> qr(gaussian(n + m, n + m, rng));
      const MatrixXd v = qr.householderQ();
      d = sym(v * diag.asDiagonal() * v.transpose());
    }
    LinearSystem sys(a, b, eye_n, eye_m, sigma);
    UncertaintyEllipsoid unc(d, a, b);
    const auto enc = build_robust_sdp(sys, unc, {opts.epsilon, true, false});
    const auto sol = sdp::solve(enc.problem);
    if (!sol.optimal()) continue;
    GainPolicy gain;
    try {
      gain = recover_gain(enc, sol, sys.nominal_model());
    } catch (const NumericalError&) {
      continue;
    }
    bool stable = true;
    for (const Model& mdl : unc.sample_boundary(
             opts.stability_samples, derive_seed(seed, kExpertStability, attempt)))
      if (!(spectral_radius(mdl.a + mdl.b * gain.k) < 1.0)) {
        stable = false;
        break;
      }
    if (!stable) continue;
    return {std::move(sys), std::move(unc), std::move(gain), seed, attempt};
  }
  std::ostringstream msg;
  msg << "generate_expert: " << opts.max_rejections
      << " consecutive draws were infeasible or not robustly stable; use larger D entries "
         "(currently U["
      << opts.d_min << ", " << opts.d_max << "]) for a smaller uncertainty set";
  throw SolverError(msg.str());
}

DemoSet generate_demos(const ExpertSpec& expert, int count, int horizon, std::uint64_t seed) {
  if (count < 1 || horizon < 1) throw InputError("demo count and horizon must be >= 1");
  DemoSet demos;
  const int n = expert.sys.n();
  for (int i = 0; i < count; ++i) {
    auto rng = make_engine(seed, derive_seed(seed, kDemoState, i));
    VectorXd x0 = sample_gaussian(n, 1.0, rng);
    const auto noise = sample_noise(n, horizon, expert.sys.sigma(), derive_seed(seed, kDemoNoise, i));
    demos.trajectories.push_back(
        simulate(expert.sys.nominal_model(), {expert.expert_gain.k}, x0, noise));
    demos.initial_states.push_back(std::move(x0));
  }
  return demos;
}

// ---------------------------------------------------------------------------

double imitation_loss(const std::vector<Trajectory>& demos,
                      const std::vector<Trajectory>& learner, bool states_only) {
  if (demos.size() != learner.size()) throw InputError("demo and learner counts differ");
  if (demos.empty()) throw InputError("imitation loss needs at least one trajectory");
  double total = 0.0;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    const Trajectory& d = demos[i];
    const Trajectory& l = learner[i];
    if (d.states.size() != l.states.size() || d.controls.size() != l.controls.size())
      throw InputError("learner trajectory horizon does not match the demonstration");
    for (std::size_t t = 0; t < d.states.size(); ++t) {
      if (d.states[t].size() != l.states[t].size()) throw InputError("state size mismatch");
      total += (d.states[t] - l.states[t]).squaredNorm();
    }
    if (!states_only)
      for (std::size_t t = 0; t < d.controls.size(); ++t) {
        if (d.controls[t].size() != l.controls[t].size())
          throw InputError("control size mismatch");
        total += (d.controls[t] - l.controls[t]).squaredNorm();
      }
  }
  return total / static_cast<double>(demos.size());
}

double imitation_loss(const DemoSet& demos, const TrajectoryGenerator& learner,
                      bool states_only) {
  if (static_cast<int>(demos.initial_states.size()) != demos.count())
    throw InputError("DemoSet initial states do not match its trajectories");
  std::vector<Trajectory> out;
  out.reserve(demos.count());
  for (int i = 0; i < demos.count(); ++i) out.push_back(learner(demos.initial_states[i], i));
  return imitation_loss(demos.trajectories, out, states_only);
}

double model_loss(const LayerParams& estimate, const LayerParams& truth, Scenario scenario) {
  if (scenario == Scenario::known_model_unknown_d) {
    if (estimate.d.rows() != truth.d.rows() || estimate.d.cols() != truth.d.cols())
      throw InputError("D shapes differ");
    return (estimate.d - truth.d).norm();
  }
  if (estimate.a.rows() != truth.a.rows() || estimate.b.cols() != truth.b.cols() ||
      estimate.a.cols() != truth.a.cols() || estimate.b.rows() != truth.b.rows())
    throw InputError("model shapes differ");
  return std::sqrt((estimate.a - truth.a).squaredNorm() + (estimate.b - truth.b).squaredNorm());
}

CostStats validation_cost(const std::vector<MatrixXd>& gains, const ExpertSpec& truth,
                          const ValidationOptions& opts, std::uint64_t seed) {
  if (gains.empty()) throw InputError("validation needs at least one gain");
  if (opts.horizon < 1 || opts.n_rollouts < 1 || opts.n_models < 1)
    throw InputError("validation horizon, rollouts and models must be >= 1");
  const int n = truth.sys.n();
  const auto models = truth.unc.sample_boundary(opts.n_models, derive_seed(seed, kValModels));
  std::vector<VectorXd> x0s;
  std::vector<std::vector<VectorXd>> noises;
  for (int r = 0; r < opts.n_rollouts; ++r) {
    auto rng = make_engine(derive_seed(seed, kValState), r);
    x0s.push_back(sample_gaussian(n, opts.x0_scale, rng));
    noises.push_back(sample_noise(n, opts.horizon, truth.sys.sigma(), derive_seed(seed, kValNoise, r)));
  }
  CostStats best;
  best.mean = -1.0;
  std::vector<double> costs(opts.n_rollouts);
  for (int k = 0; k < opts.n_models; ++k) {
    const Model& mdl = models[k];
    // The stationary gain (K, or K_0 of a plan) decides stability.
    const bool unstable = !(spectral_radius(mdl.a + mdl.b * gains.front()) < 1.0);
    bool capped = unstable;
    for (int r = 0; r < opts.n_rollouts; ++r) {
      double c = opts.cap;
      if (!unstable) {
        const Trajectory tr = simulate(mdl, gains, x0s[r], noises[r]);
        c = quadratic_cost(tr, truth.sys.q(), truth.sys.r(), true);
        if (!std::isfinite(c) || c > opts.cap) {
          c = opts.cap;
          capped = true;
        }
      }
      costs[r] = c;
    }
    const double mean = std::accumulate(costs.begin(), costs.end(), 0.0) / opts.n_rollouts;
    if (mean > best.mean) {
      double var = 0.0;
      for (double c : costs) var += (c - mean) * (c - mean);
      best.mean = mean;
      best.stddev = opts.n_rollouts > 1 ? std::sqrt(var / (opts.n_rollouts - 1)) : 0.0;
      best.capped = capped;
      best.worst_model = k;
    }
  }
  return best;
}

CostStats validation_cost(const GainPolicy& policy, const ExpertSpec& truth,
                          const ValidationOptions& opts, std::uint64_t seed) {
  return validation_cost(std::vector<MatrixXd>{policy.k}, truth, opts, seed);
}

// ---------------------------------------------------------------------------

RolloutGradient rollout_gradient(const Trajectory& traj, const Model& model, const MatrixXd& k,
                                 const std::vector<VectorXd>& d_states,
                                 const std::vector<VectorXd>& d_controls) {
  const int horizon = traj.horizon();
  if (static_cast<int>(traj.states.size()) != horizon + 1 ||
      static_cast<int>(d_states.size()) != horizon + 1 ||
      static_cast<int>(d_controls.size()) != horizon)
    throw InputError("rollout gradient: trajectory and loss gradient lengths differ");
  RolloutGradient g;
  g.d_k = MatrixXd::Zero(k.rows(), k.cols());
  g.d_a = MatrixXd::Zero(model.a.rows(), model.a.cols());
  g.d_b = MatrixXd::Zero(model.b.rows(), model.b.cols());
  VectorXd lam = d_states[horizon];
  for (int t = horizon - 1; t >= 0; --t) {
    const VectorXd& x = traj.states[t];
    const VectorXd gu = d_controls[t] + model.b.transpose() * lam;
    g.d_k += gu * x.transpose();
    g.d_a += lam * x.transpose();
    g.d_b += lam * traj.controls[t].transpose();
    lam = d_states[t] + model.a.transpose() * lam + k.transpose() * gu;
  }
  return g;
}

// ---------------------------------------------------------------------------

TrainState TrainState::init(LayerParams params, const ParamMask& mask, bool diag_d) {
  TrainState s;
  const ParamLayout lay = params.layout();
  s.mean_square = LayerParams::unflatten(VectorXd::Zero(lay.size()), lay);
  s.momentum = s.mean_square;
  s.params = std::move(params);
  s.mask = mask;
  s.diag_d = diag_d;
  return s;
}

bool rmsprop_step(TrainState& state, const ParamGradient& grads, const RmspropConfig& cfg) {
  const ParamLayout lay = state.params.layout();
  const ParamLayout glay = grads.layout();
  if (glay.n != lay.n || glay.m != lay.m) throw InputError("gradient shape does not match parameters");
  VectorXd g = grads.flatten();
  const VectorXd on = state.mask.expand(lay);
  if (state.diag_d)
    for (int j = 0; j < lay.n + lay.m; ++j)
      for (int i = 0; i < lay.n + lay.m; ++i)
        if (i != j) g(lay.d_offset() + j * (lay.n + lay.m) + i) = 0.0;
  for (int i = 0; i < g.size(); ++i) {
    if (on(i) == 0.0) continue;
    if (!std::isfinite(g(i))) return false;
  }
  VectorXd theta = state.params.flatten();
  VectorXd s = state.mean_square.flatten();
  VectorXd mom = state.momentum.flatten();
  for (int i = 0; i < g.size(); ++i) {
    if (on(i) == 0.0) continue;
    s(i) = cfg.decay * s(i) + (1.0 - cfg.decay) * g(i) * g(i);
    mom(i) = cfg.momentum * mom(i) + cfg.lr * g(i) / std::sqrt(s(i) + cfg.eps);
    theta(i) -= mom(i);
  }
  LayerParams p = LayerParams::unflatten(theta, lay);
  if (state.mask.q) p.q = floor_spd(p.q, cfg.qr_floor);
  if (state.mask.r) p.r = floor_spd(p.r, cfg.qr_floor);
  if (state.mask.d) {
    if (state.diag_d) {
      const VectorXd dg = p.d.diagonal().cwiseMax(cfg.d_floor);
      p.d = dg.asDiagonal();
    } else {
      p.d = floor_spd(p.d, cfg.d_floor);
    }
  }
  if (state.mask.sigma) p.sigma = std::max(p.sigma, 0.0);
  state.params = std::move(p);
  state.mean_square = LayerParams::unflatten(s, lay);
  state.momentum = LayerParams::unflatten(mom, lay);
  return true;
}

bool adam_step(VectorXd& theta, AdamState& state, const VectorXd& grad, const AdamConfig& cfg) {
  if (grad.size() != theta.size()) throw InputError("gradient length does not match parameters");
  if (!grad.allFinite()) return false;
  if (state.m.size() != theta.size()) {
    state.m = VectorXd::Zero(theta.size());
    state.v = VectorXd::Zero(theta.size());
    state.t = 0;
  }
  ++state.t;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, state.t);
  const double c2 = 1.0 - std::pow(cfg.beta2, state.t);
  for (int i = 0; i < theta.size(); ++i)
    theta(i) -= cfg.lr * (state.m(i) / c1) / (std::sqrt(state.v(i) / c2) + cfg.eps);
  return true;
}

// ---------------------------------------------------------------------------

std::vector<MatrixXd> layer_gains(LayerKind layer, const LayerParams& params, int horizon,
                                  const GradOptions& opts) {
  const LinearSystem sys = params.system();
  switch (layer) {
    case LayerKind::nominal_lmi: {
      const auto enc = build_nominal_lmi(sys, false);
      return {recover_p(enc, solve_layer(enc.problem, opts.solve), sys).k};
    }
    case LayerKind::robust_lmi: {
      const auto enc = build_robust_sdp(sys, params.ellipsoid(),
                                        {opts.robust.epsilon, opts.robust.use_aux, false});
      return {recover_gain(enc, solve_layer(enc.problem, opts.solve), sys.nominal_model()).k};
    }
    case LayerKind::finite_horizon:
      return solve_finite_horizon(params.a, params.b, params.q, params.r, horizon).gains;
  }
  return {};
}

LayerParams imitation_init(const ExpertSpec& expert, Scenario scenario,
                           const ImitationConfig& cfg) {
  LayerParams p = LayerParams::from(expert.sys, expert.unc);
  if (scenario == Scenario::known_model_unknown_d) {
    p.d = cfg.d_init * MatrixXd::Identity(p.d.rows(), p.d.cols());
  } else {
    // Redraw until the robust layer is feasible with the known D, so every
    // learner starts from the same point.
    auto rng = make_engine(derive_seed(cfg.seed, kInit));
    for (int attempt = 0; attempt < cfg.expert.max_rejections; ++attempt) {
      p.a = stable_gaussian(expert.sys.n(), rng);
      p.b = gaussian(expert.sys.n(), expert.sys.m(), rng);
      try {
        layer_gains(LayerKind::robust_lmi, p, cfg.horizon, cfg.grad);
        return p;
      } catch (const SolverError&) {
      } catch (const NumericalError&) {
      }
    }
    throw SolverError("no random initial model keeps the robust layer feasible");
  }
  return p;
}

namespace {

// Solved layer at the current parameters, ready for gradients.
struct LayerSolve {
  LinearSystem sys;
  std::optional<NominalEncoding> nominal;
  std::optional<RobustEncoding> robust;
  sdp::SdpSolution sol;
  std::vector<MatrixXd> gains;
};

LayerSolve solve_for(LayerKind layer, const LayerParams& p, int horizon, const GradOptions& opts) {
  LayerSolve out{p.system(), std::nullopt, std::nullopt, {}, {}};
  switch (layer) {
    case LayerKind::nominal_lmi: {
      out.nominal = build_nominal_lmi(out.sys, true);
      out.sol = solve_layer(out.nominal->problem, opts.solve);
      out.gains = {recover_p(*out.nominal, out.sol, out.sys).k};
      break;
    }
    case LayerKind::robust_lmi: {
      out.robust = build_robust_sdp(out.sys, p.ellipsoid(),
                                    {opts.robust.epsilon, opts.robust.use_aux, true});
      out.sol = solve_layer(out.robust->problem, opts.solve);
      out.gains = {recover_gain(*out.robust, out.sol, out.sys.nominal_model()).k};
      break;
    }
    case LayerKind::finite_horizon:
      out.gains = solve_finite_horizon(p.a, p.b, p.q, p.r, horizon).gains;
      break;
  }
  return out;
}

// Gradient over theta given dl/dK (time-invariant layers).
ParamGradient layer_gradient(LayerKind layer, const LayerSolve& ls, const LayerParams& p,
                             const MatrixXd& dl_dk, const GradOptions& opts) {
  if (layer == LayerKind::nominal_lmi)
    return grad_nominal_layer(dl_dk, ls.sys, *ls.nominal, ls.sol, opts);
  return grad_robust_layer({dl_dk, 0.0}, ls.sys, p.ellipsoid(), *ls.robust, ls.sol, opts);
}

}  // namespace

ImitationRun train_imitation(Scenario scenario, LayerKind layer, const ImitationConfig& cfg) {
  ExpertSpec expert = generate_expert(cfg.seed, cfg.n, cfg.m, cfg.sigma, cfg.expert);
  const DemoSet demos = generate_demos(expert, cfg.n_demos, cfg.horizon, cfg.seed);
  return train_imitation(expert, demos, scenario, layer, cfg);
}

ImitationRun train_imitation(const ExpertSpec& expert, const DemoSet& demos, Scenario scenario,
                             LayerKind layer, const ImitationConfig& cfg) {
  if (cfg.iterations < 0 || cfg.minibatch < 1) throw InputError("iterations >= 0 and minibatch >= 1 required");
  if (demos.count() < 1) throw InputError("empty DemoSet");
  const int horizon = demos.trajectories.front().horizon();
  const int n = expert.sys.n();
  const int batch = std::min(cfg.minibatch, demos.count());
  const LayerParams truth = LayerParams::from(expert.sys, expert.unc);
  const std::uint64_t val_seed = derive_seed(cfg.seed, kValidation);

  ImitationRun run{expert, TrainState::init(cfg.init ? *cfg.init : imitation_init(expert, scenario, cfg),
                                            scenario_mask(scenario, layer),
                                            scenario == Scenario::known_model_unknown_d &&
                                                cfg.expert.diag_uncertainty),
                   {}};
  TrainState& st = run.state;
  GradOptions gopts = cfg.grad;
  gopts.mask = st.mask;
  LayerParams last_feasible = st.params;
  std::vector<MatrixXd> last_gains;

  for (int it = 0; it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.iteration = it;
    rec.train_cost = kNaN;
    rec.model_loss = model_loss(st.params, truth, scenario);

    std::optional<LayerSolve> ls;
    try {
      ls = solve_for(layer, st.params, horizon, gopts);
    } catch (const std::exception& e) {
      rec.event = std::string("solve failed, rolled back: ") + e.what();
      st.params = last_feasible;
      st.momentum = LayerParams::unflatten(VectorXd::Zero(st.params.layout().size()),
                                           st.params.layout());
      rec.imitation_loss = rec.validation_cost = kNaN;
      rec.wall_time_s = seconds_since(t0);
      st.history.push_back(std::move(rec));
      ++st.iteration;
      continue;
    }
    last_feasible = st.params;
    last_gains = ls->gains;
    st.gain = ls->gains.front();

    // Minibatch and frozen learner noise.
    std::vector<int> idx(demos.count());
    std::iota(idx.begin(), idx.end(), 0);
    auto brng = make_engine(derive_seed(cfg.seed, kBatch, it));
    std::shuffle(idx.begin(), idx.end(), brng);
    idx.resize(batch);
    const Model own{st.params.a, st.params.b};
    std::vector<Trajectory> ref, mine;
    std::vector<std::vector<VectorXd>> noises;
    for (int i : idx) {
      noises.push_back(sample_noise(n, horizon, st.params.sigma,
                                    derive_seed(cfg.seed, kLearnerNoise,
                                                static_cast<std::uint64_t>(it) * demos.count() + i)));
      ref.push_back(demos.trajectories[i]);
      mine.push_back(simulate(own, ls->gains, demos.initial_states[i], noises.back()));
    }
    rec.imitation_loss = imitation_loss(ref, mine, cfg.states_only);

    if (st.mask.any()) {
      const double w = 2.0 / batch;
      ParamGradient grad = ParamGradient::zeros(n, expert.sys.m(), st.mask);
      MatrixXd dl_dk = MatrixXd::Zero(expert.sys.m(), n);
      for (int b = 0; b < batch; ++b) {
        TrajectoryGradient tg;
        for (std::size_t t = 0; t < mine[b].states.size(); ++t)
          tg.d_states.push_back(w * (mine[b].states[t] - ref[b].states[t]));
        for (std::size_t t = 0; t < mine[b].controls.size(); ++t)
          tg.d_controls.push_back(cfg.states_only ? VectorXd::Zero(expert.sys.m()).eval()
                                                  : (w * (mine[b].controls[t] - ref[b].controls[t])).eval());
        if (layer == LayerKind::finite_horizon) {
          const ProblemGradient pg = finite_horizon_grad(
              tg, st.params.a, st.params.b, st.params.q, st.params.r, horizon,
              {demos.initial_states[idx[b]], std::nullopt, noises[b]});
          grad.d_a_nom += pg.d_a;
          grad.d_b_nom += pg.d_b;
          grad.d_q += pg.d_q;
          grad.d_r += pg.d_r;
        } else {
          const RolloutGradient rg =
              rollout_gradient(mine[b], own, st.gain, tg.d_states, tg.d_controls);
          dl_dk += rg.d_k;
          grad.d_a_nom += rg.d_a;
          grad.d_b_nom += rg.d_b;
        }
      }
      if (layer != LayerKind::finite_horizon) {
        try {
          const ParamGradient lg = layer_gradient(layer, *ls, st.params, dl_dk, gopts);
          grad.d_a_nom += lg.d_a_nom;
          grad.d_b_nom += lg.d_b_nom;
          grad.d_q += lg.d_q;
          grad.d_r += lg.d_r;
          grad.d_d += lg.d_d;
          grad.d_sigma += lg.d_sigma;
          rec.gradient_path = lg.path;
          if (!lg.warnings.empty()) rec.event = lg.warnings.front();
        } catch (const std::exception& e) {
          rec.event = std::string("gradient failed, step skipped: ") + e.what();
          grad = ParamGradient::zeros(n, expert.sys.m(), st.mask);
        }
      }
      grad.apply_mask();
      if (!rmsprop_step(st, grad, cfg.optimizer)) rec.event = "non-finite gradient, step rejected";
    }

    rec.validation_cost = kNaN;
    if (cfg.validate_every > 0 && it % cfg.validate_every == 0) {
      std::vector<MatrixXd> vg = ls->gains;
      if (layer == LayerKind::finite_horizon)
        vg = layer_gains(layer, last_feasible, cfg.validation.horizon, gopts);
      rec.validation_cost = validation_cost(vg, expert, cfg.validation, val_seed).mean;
    }
    rec.wall_time_s = seconds_since(t0);
    st.history.push_back(std::move(rec));
    ++st.iteration;
  }

  // Final policy: current parameters if they solve, else the last feasible ones.
  std::vector<MatrixXd> final_gains;
  try {
    final_gains = layer_gains(layer, st.params, cfg.validation.horizon, gopts);
  } catch (const std::exception&) {
    st.params = last_feasible;
    final_gains = layer_gains(layer, st.params, cfg.validation.horizon, gopts);
  }
  st.gain = final_gains.front();
  run.final_validation = validation_cost(final_gains, expert, cfg.validation, val_seed);
  return run;
}

// ---------------------------------------------------------------------------

BatchCost adp_batch_cost(const MatrixXd& k, const ExpertSpec& truth, int horizon, int batch,
                         double cap, std::uint64_t seed, bool with_gradient) {
  if (horizon < 1 || batch < 1) throw InputError("horizon and batch must be >= 1");
  const int n = truth.sys.n();
  BatchCost out;
  out.d_k = MatrixXd::Zero(k.rows(), k.cols());
  const double w = 1.0 / (horizon * static_cast<double>(batch));
  for (int r = 0; r < batch; ++r) {
    auto rng = make_engine(seed, static_cast<std::uint64_t>(r));
    const Model mdl = truth.unc.sample_boundary(rng);
    const VectorXd x0 = sample_gaussian(n, 1.0, rng);
    std::vector<VectorXd> noise;
    for (int t = 0; t < horizon; ++t) noise.push_back(sample_gaussian(n, truth.sys.sigma(), rng));
    const Trajectory tr = simulate(mdl, {k}, x0, noise);
    double c = 0.0;
    for (int t = 0; t < horizon; ++t)
      c += tr.states[t].squaredNorm() + tr.controls[t].squaredNorm();
    c /= horizon;
    if (!std::isfinite(c) || c > cap) {
      out.cost += cap / batch;
      ++out.capped;
      continue;
    }
    out.cost += c / batch;
    if (!with_gradient) continue;
    std::vector<VectorXd> dx(horizon + 1), du(horizon);
    for (int t = 0; t < horizon; ++t) {
      dx[t] = 2.0 * w * tr.states[t];
      du[t] = 2.0 * w * tr.controls[t];
    }
    dx[horizon] = VectorXd::Zero(n);
    out.d_k += rollout_gradient(tr, mdl, k, dx, du).d_k;
  }
  return out;
}

AdpRun train_adp(AdpPolicy policy, const AdpConfig& cfg) {
  if (cfg.iterations < 0) throw InputError("iterations must be >= 0");
  AdpRun run{generate_expert(cfg.seed, cfg.n, cfg.m, cfg.sigma, cfg.system), {}, 0.0, false};
  const ExpertSpec& truth = run.truth;
  const int n = cfg.n, m = cfg.m;

  LayerParams init;
  if (cfg.init) {
    init = *cfg.init;
  } else {
    auto rng = make_engine(derive_seed(cfg.seed, kAdpInit));
    init.a = stable_gaussian(n, rng);
    init.b = gaussian(n, m, rng);
    init.q = MatrixXd::Identity(n, n);
    init.r = MatrixXd::Identity(m, m);
    init.d = MatrixXd::Identity(n + m, n + m);
    init.sigma = cfg.sigma;
  }

  ParamMask mask = policy == AdpPolicy::robust_lmi ? ParamMask::all() : ParamMask::nominal();
  run.state = TrainState::init(init, mask, cfg.system.diag_uncertainty);
  TrainState& st = run.state;
  GradOptions gopts = cfg.grad;
  gopts.mask = mask;
  const LayerKind layer =
      policy == AdpPolicy::robust_lmi ? LayerKind::robust_lmi : LayerKind::nominal_lmi;

  std::string init_event;
  VectorXd k_flat;
  AdamState adam;
  if (policy == AdpPolicy::linear) {
    auto krng = make_engine(derive_seed(cfg.seed, kLinearInit));
    st.gain = gaussian(m, n, krng);
  } else if (policy == AdpPolicy::robust_lmi) {
    // D = I can leave the robust program infeasible; shrink the set until it solves.
    for (int tries = 0;; ++tries) {
      try {
        layer_gains(layer, st.params, cfg.horizon, gopts);
        break;
      } catch (const std::exception&) {
        if (tries >= 30) throw;
        st.params.d *= 2.0;
        std::ostringstream msg;
        msg << "initial D scaled to " << st.params.d(0, 0) << " I for feasibility";
        init_event = msg.str();
      }
    }
  }
  LayerParams last_feasible = st.params;

  for (int it = 0; it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.iteration = it;
    rec.imitation_loss = rec.model_loss = rec.validation_cost = kNaN;
    if (it == 0) rec.event = init_event;
    const std::uint64_t bseed = derive_seed(cfg.seed, kAdpBatch, it);

    if (policy == AdpPolicy::linear) {
      const BatchCost bc = adp_batch_cost(st.gain, truth, cfg.horizon, cfg.batch, cfg.cap, bseed, true);
      rec.train_cost = bc.cost;
      rec.gradient_path = GradPath::implicit;
      k_flat = st.gain.reshaped();
      if (adam_step(k_flat, adam, bc.d_k.reshaped(), cfg.adam))
        st.gain = k_flat.reshaped(m, n);
      else
        rec.event = "non-finite gradient, step rejected";
      if (bc.capped > 0 && rec.event.empty())
        rec.event = std::to_string(bc.capped) + " rollouts hit the divergence cap";
    } else {
      std::optional<LayerSolve> ls;
      try {
        ls = solve_for(layer, st.params, cfg.horizon, gopts);
      } catch (const std::exception& e) {
        rec.event = std::string("solve failed, rolled back: ") + e.what();
        st.params = last_feasible;
        st.momentum = LayerParams::unflatten(VectorXd::Zero(st.params.layout().size()),
                                             st.params.layout());
        rec.train_cost = kNaN;
        rec.wall_time_s = seconds_since(t0);
        st.history.push_back(std::move(rec));
        ++st.iteration;
        continue;
      }
      last_feasible = st.params;
      st.gain = ls->gains.front();
      const BatchCost bc = adp_batch_cost(st.gain, truth, cfg.horizon, cfg.batch, cfg.cap, bseed, true);
      rec.train_cost = bc.cost;
      try {
        ParamGradient g = layer_gradient(layer, *ls, st.params, bc.d_k, gopts);
        rec.gradient_path = g.path;
        if (!g.warnings.empty()) rec.event = g.warnings.front();
        if (!rmsprop_step(st, g, cfg.optimizer)) rec.event = "non-finite gradient, step rejected";
      } catch (const std::exception& e) {
        rec.event = std::string("gradient failed, step skipped: ") + e.what();
      }
    }
    rec.wall_time_s = seconds_since(t0);
    st.history.push_back(std::move(rec));
    ++st.iteration;
  }

  if (policy != AdpPolicy::linear) {
    try {
      st.gain = layer_gains(layer, st.params, cfg.horizon, gopts).front();
    } catch (const std::exception&) {
      st.params = last_feasible;
      st.gain = layer_gains(layer, st.params, cfg.horizon, gopts).front();
    }
  }
  const BatchCost eval = adp_batch_cost(st.gain, truth, cfg.horizon, cfg.eval_rollouts, cfg.cap,
                                        derive_seed(cfg.seed, kAdpEval), false);
  run.final_cost = eval.cost;
  run.diverged = eval.capped > 0;
  return run;
}

double sign_test_p(int wins, int trials) {
  if (trials < 0 || wins < 0 || wins > trials) throw InputError("sign test needs 0 <= wins <= trials");
  double p = 0.0;
  for (int k = wins; k <= trials; ++k)
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) -
                  trials * std::log(2.0));
  return std::min(p, 1.0);
}

}  // namespace rlqr
