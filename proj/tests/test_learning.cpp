#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rlqr/errors.hpp"
#include "rlqr/learning.hpp"
#include "rlqr/riccati.hpp"

using namespace rlqr;

namespace {

MatrixXd gaussian(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

VectorXd vec1(double v) { return VectorXd::Constant(1, v); }

LayerParams scalar_params(double a) {
  LayerParams p;
  p.a = scalar(a);
  p.b = scalar(1.0);
  p.q = scalar(1.0);
  p.r = scalar(1.0);
  p.d = MatrixXd::Identity(2, 2);
  p.sigma = 0.1;
  return p;
}

ParamGradient grad_a(double g) {
  ParamGradient pg = ParamGradient::zeros(1, 1);
  pg.d_a_nom(0, 0) = g;
  return pg;
}

// Hand-built truth with a (numerically) pointwise uncertainty set.
ExpertSpec point_truth(double a, double b, double sigma) {
  LinearSystem sys(scalar(a), scalar(b), scalar(1.0), scalar(1.0), sigma);
  UncertaintyEllipsoid unc(1e16 * MatrixXd::Identity(2, 2), scalar(a), scalar(b));
  GainPolicy g = GainPolicy::for_model(scalar(0.0), sys.nominal_model());
  return {sys, unc, g, 0, 0};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

ImitationConfig small_config(std::uint64_t seed) {
  ImitationConfig cfg;
  cfg.seed = seed;
  cfg.n_demos = 32;
  cfg.validate_every = 0;
  cfg.validation.n_models = 20;
  cfg.validation.n_rollouts = 8;
  return cfg;
}

}  // namespace

TEST_CASE("rmsprop one scalar step matches the recurrence") {
  TrainState st = TrainState::init(scalar_params(0.5), {true, false, false, false, false, false});
  REQUIRE(rmsprop_step(st, grad_a(1.0)));
  const double s = 0.01;
  const double m = 0.01 / std::sqrt(s + 1e-8);
  CHECK(st.mean_square.a(0, 0) == doctest::Approx(s).epsilon(1e-15));
  CHECK(st.momentum.a(0, 0) == doctest::Approx(m).epsilon(1e-15));
  CHECK(m == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(st.params.a(0, 0) == doctest::Approx(0.5 - m).epsilon(1e-15));

  // second step by hand
  REQUIRE(rmsprop_step(st, grad_a(-2.0)));
  const double s2 = 0.99 * s + 0.01 * 4.0;
  const double m2 = 0.5 * m + 0.01 * -2.0 / std::sqrt(s2 + 1e-8);
  CHECK(st.params.a(0, 0) == doctest::Approx(0.5 - m - m2).epsilon(1e-14));
}

TEST_CASE("rmsprop zero gradient and constant gradient") {
  const LayerParams p0 = scalar_params(0.3);
  TrainState st = TrainState::init(p0, ParamMask::all());
  REQUIRE(rmsprop_step(st, ParamGradient::zeros(1, 1)));
  CHECK(st.params.flatten() == p0.flatten());

  TrainState mono = TrainState::init(p0, {true, false, false, false, false, false});
  double prev = mono.params.a(0, 0);
  for (int i = 0; i < 25; ++i) {
    REQUIRE(rmsprop_step(mono, grad_a(0.7)));
    CHECK(mono.params.a(0, 0) < prev);
    prev = mono.params.a(0, 0);
  }
  TrainState up = TrainState::init(p0, {true, false, false, false, false, false});
  for (int i = 0; i < 5; ++i) REQUIRE(rmsprop_step(up, grad_a(-3.0)));
  CHECK(up.params.a(0, 0) > p0.a(0, 0));
}

TEST_CASE("rmsprop projections and rejection") {
  LayerParams p = scalar_params(0.5);
  p.d << 2.0, 0.0, 0.0, 1e-3;
  TrainState st = TrainState::init(p, ParamMask::all(), true);
  ParamGradient g = ParamGradient::zeros(1, 1);
  g.d_d << 0.0, 5.0, 5.0, 100.0;
  g.d_sigma = 100.0;
  g.d_q(0, 0) = 1e3;
  for (int i = 0; i < 20; ++i) REQUIRE(rmsprop_step(st, g, {0.5, 0.5, 0.99, 1e-8, 1e-6, 1e-6}));
  CHECK(st.params.d(0, 1) == 0.0);
  CHECK(st.params.d(1, 0) == 0.0);
  CHECK(st.params.d(1, 1) == doctest::Approx(1e-6));
  CHECK(st.params.sigma == 0.0);
  CHECK(st.params.q(0, 0) == doctest::Approx(1e-6));

  // full D stays symmetric positive definite
  TrainState full = TrainState::init(scalar_params(0.5), ParamMask::all());
  ParamGradient gf = ParamGradient::zeros(1, 1);
  gf.d_d << 50.0, -20.0, -20.0, 50.0;
  for (int i = 0; i < 30; ++i) REQUIRE(rmsprop_step(full, gf));
  CHECK((full.params.d - full.params.d.transpose()).norm() == 0.0);
  CHECK(min_eigenvalue(full.params.d) >= 1e-6 * (1 - 1e-9));

  TrainState bad = TrainState::init(scalar_params(0.5), ParamMask::all());
  const VectorXd before = bad.params.flatten();
  CHECK_FALSE(rmsprop_step(bad, grad_a(std::nan(""))));
  CHECK(bad.params.flatten() == before);
  CHECK(bad.mean_square.flatten().isZero());

  // a frozen block may carry a non-finite entry without rejecting the step
  TrainState frozen = TrainState::init(scalar_params(0.5), {false, true, false, false, false, false});
  CHECK(rmsprop_step(frozen, grad_a(INFINITY)));
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  VectorXd theta(3);
  theta << 1.0, -2.0, 0.5;
  AdamState st;
  VectorXd g(3);
  g << 4.0, -0.01, 0.0;
  REQUIRE(adam_step(theta, st, g));
  CHECK(theta(0) == doctest::Approx(1.0 - 1e-4).epsilon(1e-9));
  CHECK(theta(1) == doctest::Approx(-2.0 + 1e-4).epsilon(1e-9));
  CHECK(theta(2) == 0.5);
  g(0) = NAN;
  CHECK_FALSE(adam_step(theta, st, g));
}

TEST_CASE("imitation loss hand example and summation oracle") {
  Trajectory demo{{vec1(1.0), vec1(0.0)}, {vec1(0.0)}};
  Trajectory learner{{vec1(1.0), vec1(0.5)}, {vec1(0.5)}};
  CHECK(imitation_loss({demo}, {learner}) == doctest::Approx(0.5));
  CHECK(imitation_loss({demo}, {learner}, true) == doctest::Approx(0.25));
  CHECK(imitation_loss({demo}, {demo}) == 0.0);

  std::mt19937_64 rng(11);
  std::vector<Trajectory> a, b;
  double oracle = 0.0;
  for (int i = 0; i < 16; ++i) {
    Trajectory ta, tb;
    for (int t = 0; t <= 7; ++t) {
      ta.states.push_back(gaussian(3, 1, rng));
      tb.states.push_back(gaussian(3, 1, rng));
      for (int j = 0; j < 3; ++j)
        oracle += (ta.states[t](j) - tb.states[t](j)) * (ta.states[t](j) - tb.states[t](j));
    }
    for (int t = 0; t < 7; ++t) {
      ta.controls.push_back(gaussian(2, 1, rng));
      tb.controls.push_back(gaussian(2, 1, rng));
      for (int j = 0; j < 2; ++j)
        oracle += (ta.controls[t](j) - tb.controls[t](j)) * (ta.controls[t](j) - tb.controls[t](j));
    }
    a.push_back(ta);
    b.push_back(tb);
  }
  CHECK(imitation_loss(a, b) == doctest::Approx(oracle / 16).epsilon(1e-13));

  Trajectory short_traj{{vec1(1.0)}, {}};
  CHECK_THROWS_AS(imitation_loss({demo}, {short_traj}), InputError);
  CHECK_THROWS_AS(imitation_loss({demo, demo}, {demo}), InputError);
}

TEST_CASE("imitation loss through a generator") {
  const ExpertSpec truth = point_truth(0.5, 1.0, 0.0);
  const DemoSet demos = generate_demos(truth, 4, 5, 3);
  const double same = imitation_loss(demos, [&](const VectorXd& x0, int) {
    return simulate(truth.sys.nominal_model(), {truth.expert_gain.k}, x0,
                    std::vector<VectorXd>(5, VectorXd::Zero(1)));
  });
  CHECK(same == 0.0);
}

TEST_CASE("model loss") {
  LayerParams est = scalar_params(0.5), truth = scalar_params(0.5);
  est.d(0, 0) = 2.0;
  truth.d(0, 0) = 3.0;
  CHECK(model_loss(est, truth, Scenario::known_model_unknown_d) == doctest::Approx(1.0));
  CHECK(model_loss(est, est, Scenario::known_model_unknown_d) == 0.0);

  std::mt19937_64 rng(2);
  LayerParams x, y;
  x.a = gaussian(3, 3, rng), x.b = gaussian(3, 3, rng);
  y.a = gaussian(3, 3, rng), y.b = gaussian(3, 3, rng);
  x.d = y.d = MatrixXd::Identity(6, 6);
  double oracle = 0.0;
  for (int i = 0; i < 9; ++i) {
    oracle += std::pow(x.a(i) - y.a(i), 2);
    oracle += std::pow(x.b(i) - y.b(i), 2);
  }
  CHECK(model_loss(x, y, Scenario::known_d_unknown_model) == doctest::Approx(std::sqrt(oracle)));
}

TEST_CASE("validation cost: zero case, cap and single-model oracle") {
  ValidationOptions vo;
  vo.x0_scale = 0.0;
  const ExpertSpec still = point_truth(0.0, 1.0, 0.0);
  const CostStats zero = validation_cost(still.expert_gain, still, vo, 1);
  CHECK(zero.mean == 0.0);
  CHECK(zero.stddev == 0.0);
  CHECK_FALSE(zero.capped);

  // Unstable closed loop scores the sentinel.
  const ExpertSpec unstable = point_truth(1.5, 1.0, 0.1);
  const CostStats capped = validation_cost(GainPolicy{scalar(0.0), 1.5}, unstable, {}, 1);
  CHECK(capped.capped);
  CHECK(capped.mean == 1e6);

  // With sigma = 0 every rollout cost is x0^2 g(c, k), so the ratio between
  // two policies under common random numbers is a closed form.
  const ExpertSpec truth = point_truth(0.5, 1.0, 0.0);
  ValidationOptions v;
  v.n_models = 10;
  auto g = [&](double k) {
    const double c = 0.5 + k;
    double sx = 0.0, su = 0.0;
    for (int t = 0; t <= v.horizon; ++t) sx += std::pow(c, 2 * t);
    for (int t = 0; t < v.horizon; ++t) su += k * k * std::pow(c, 2 * t);
    return (sx + su) / v.horizon;
  };
  const double c1 = validation_cost(std::vector<MatrixXd>{scalar(0.0)}, truth, v, 5).mean;
  const double c2 = validation_cost(std::vector<MatrixXd>{scalar(-0.25)}, truth, v, 5).mean;
  CHECK(c1 / c2 == doctest::Approx(g(0.0) / g(-0.25)).epsilon(1e-6));

  // worst model is the one with the largest cost
  ExpertSpec wide = point_truth(0.5, 1.0, 0.0);
  wide.unc = UncertaintyEllipsoid(MatrixXd::Identity(2, 2) * 25.0, scalar(0.5), scalar(1.0));
  const CostStats w = validation_cost(std::vector<MatrixXd>{scalar(0.0)}, wide, v, 5);
  const CostStats narrow = validation_cost(std::vector<MatrixXd>{scalar(0.0)}, truth, v, 5);
  CHECK(w.mean > narrow.mean);
  CHECK(w.worst_model >= 0);
  CHECK(w.worst_model < v.n_models);
}

TEST_CASE("rollout gradient matches finite differences of a simulated loss") {
  std::mt19937_64 rng(4);
  const int n = 3, m = 2, horizon = 6;
  Model model{0.4 * gaussian(n, n, rng), gaussian(n, m, rng)};
  const MatrixXd k = 0.2 * gaussian(m, n, rng);
  const VectorXd x0 = gaussian(n, 1, rng);
  std::vector<VectorXd> noise;
  for (int t = 0; t < horizon; ++t) noise.push_back(0.1 * gaussian(n, 1, rng));
  std::vector<VectorXd> c;
  for (int t = 0; t <= horizon; ++t) c.push_back(gaussian(n, 1, rng));

  // l = sum_t c_t' x_t + 0.5 sum_t |u_t|^2
  auto loss = [&](const Model& mdl, const MatrixXd& kk) {
    const Trajectory tr = simulate(mdl, {kk}, x0, noise);
    double l = 0.0;
    for (int t = 0; t <= horizon; ++t) l += c[t].dot(tr.states[t]);
    for (int t = 0; t < horizon; ++t) l += 0.5 * tr.controls[t].squaredNorm();
    return l;
  };
  const Trajectory tr = simulate(model, {k}, x0, noise);
  const RolloutGradient g = rollout_gradient(tr, model, k, c, tr.controls);

  const double h = 1e-6;
  for (int i = 0; i < k.size(); ++i) {
    MatrixXd kp = k, km = k;
    kp(i) += h, km(i) -= h;
    CHECK(g.d_k(i) == doctest::Approx((loss(model, kp) - loss(model, km)) / (2 * h)).epsilon(1e-6));
  }
  for (int i = 0; i < model.a.size(); ++i) {
    Model p = model, q = model;
    p.a(i) += h, q.a(i) -= h;
    CHECK(g.d_a(i) == doctest::Approx((loss(p, k) - loss(q, k)) / (2 * h)).epsilon(1e-6));
  }
  for (int i = 0; i < model.b.size(); ++i) {
    Model p = model, q = model;
    p.b(i) += h, q.b(i) -= h;
    CHECK(g.d_b(i) == doctest::Approx((loss(p, k) - loss(q, k)) / (2 * h)).epsilon(1e-6));
  }
  CHECK_THROWS_AS(rollout_gradient(tr, model, k, c, {}), InputError);
}

TEST_CASE("expert generation: repeatability and invariants") {
  const ExpertSpec e1 = generate_expert(3, 3, 3, 0.1);
  const ExpertSpec e2 = generate_expert(3, 3, 3, 0.1);
  CHECK(e1.sys.a_nom() == e2.sys.a_nom());
  CHECK(e1.sys.b_nom() == e2.sys.b_nom());
  CHECK(e1.unc.d() == e2.unc.d());
  CHECK(e1.expert_gain.k == e2.expert_gain.k);
  const ExpertSpec other = generate_expert(4, 3, 3, 0.1);
  CHECK(other.sys.a_nom() != e1.sys.a_nom());

  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const ExpertSpec e = generate_expert(seed, 3, 3, 0.1);
    CHECK(spectral_radius(e.sys.a_nom()) <= 0.9 + 1e-12);
    CHECK(e.sys.q() == MatrixXd::Identity(3, 3));
    CHECK(e.sys.r() == MatrixXd::Identity(3, 3));
    const MatrixXd& d = e.unc.d();
    CHECK(MatrixXd(d.diagonal().asDiagonal()) == d);
    CHECK(d.diagonal().minCoeff() >= 1.5);
    CHECK(d.diagonal().maxCoeff() <= 4.0);
    // independent boundary draw
    for (const Model& mdl : e.unc.sample_boundary(100, 1000 + seed))
      CHECK(spectral_radius(mdl.a + mdl.b * e.expert_gain.k) < 1.0);
  }

  ExpertOptions full;
  full.diag_uncertainty = false;
  const ExpertSpec ef = generate_expert(5, 2, 2, 0.1, full);
  const Eigen::SelfAdjointEigenSolver<MatrixXd> es(ef.unc.d());
  CHECK(es.eigenvalues().minCoeff() >= 1.5 - 1e-9);
  CHECK(es.eigenvalues().maxCoeff() <= 4.0 + 1e-9);
}

TEST_CASE("expert at tiny uncertainty is the LQR gain") {
  ExpertOptions eo;
  eo.d_min = eo.d_max = 1e8;
  const ExpertSpec e = generate_expert(9, 1, 1, 0.1, eo);
  const AreSolution are = solve_are(e.sys.a_nom(), e.sys.b_nom(), e.sys.q(), e.sys.r());
  CHECK((e.expert_gain.k - are.k).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("expert generation errors") {
  CHECK_THROWS_AS(generate_expert(0, 0, 1, 0.1), InputError);
  ExpertOptions bad;
  bad.d_min = 3.0;
  bad.d_max = 2.0;
  CHECK_THROWS_AS(generate_expert(0, 2, 2, 0.1, bad), InputError);
  ExpertOptions huge_set;
  huge_set.d_min = huge_set.d_max = 1e-4;
  huge_set.max_rejections = 5;
  huge_set.stability_samples = 10;
  try {
    generate_expert(0, 3, 3, 0.1, huge_set);
    FAIL("expected SolverError");
  } catch (const SolverError& e) {
    CHECK(std::string(e.what()).find("larger D") != std::string::npos);
  }
}

TEST_CASE("demonstrations") {
  const ExpertSpec e = generate_expert(1, 3, 3, 0.1);
  const DemoSet d = generate_demos(e, 6, 10, 77);
  CHECK(d.count() == 6);
  CHECK(d.initial_states.size() == 6);
  for (int i = 0; i < d.count(); ++i) {
    CHECK(d.trajectories[i].horizon() == 10);
    CHECK(d.trajectories[i].states[0] == d.initial_states[i]);
    // controls follow the expert gain
    CHECK((d.trajectories[i].controls[3] - e.expert_gain.k * d.trajectories[i].states[3]).norm() < 1e-12);
  }
  const DemoSet again = generate_demos(e, 6, 10, 77);
  CHECK(again.trajectories[5].states[10] == d.trajectories[5].states[10]);
  CHECK(generate_demos(e, 6, 10, 78).trajectories[0].states[3] != d.trajectories[0].states[3]);
  CHECK_THROWS_AS(generate_demos(e, 0, 10, 1), InputError);
}

TEST_CASE("truth-initialized imitation stays at the noise floor") {
  ImitationConfig cfg = small_config(2);
  cfg.iterations = 10;
  const ExpertSpec e = generate_expert(cfg.seed, 3, 3, 0.1);
  const DemoSet demos = generate_demos(e, cfg.n_demos, cfg.horizon, cfg.seed);
  cfg.init = LayerParams::from(e.sys, e.unc);

  // Floor: the expert against its own demos with independent noise.
  double floor = 0.0;
  const int reps = 40;
  for (int r = 0; r < reps; ++r) {
    std::vector<Trajectory> ref, mine;
    for (int i = 0; i < cfg.minibatch; ++i) {
      const int j = (r * cfg.minibatch + i) % demos.count();
      ref.push_back(demos.trajectories[j]);
      mine.push_back(simulate(e.sys.nominal_model(), {e.expert_gain.k}, demos.initial_states[j],
                              sample_noise(3, cfg.horizon, 0.1, 5000 + r * 100 + i)));
    }
    floor += imitation_loss(ref, mine) / reps;
  }

  for (Scenario sc : {Scenario::known_model_unknown_d, Scenario::known_d_unknown_model}) {
    const ImitationRun run = train_imitation(e, demos, sc, LayerKind::robust_lmi, cfg);
    REQUIRE(run.state.history.size() == 10);
    for (const auto& rec : run.state.history) {
      CHECK(rec.imitation_loss < 2.0 * floor);
      CHECK(rec.imitation_loss > 0.3 * floor);
    }
    CHECK(run.state.history.front().model_loss == doctest::Approx(0.0));
  }
}

TEST_CASE("training is deterministic and respects the scenario mask") {
  ImitationConfig cfg = small_config(4);
  cfg.iterations = 4;
  cfg.validate_every = 2;
  const ImitationRun a = train_imitation(Scenario::known_model_unknown_d, LayerKind::robust_lmi, cfg);
  const ImitationRun b = train_imitation(Scenario::known_model_unknown_d, LayerKind::robust_lmi, cfg);
  REQUIRE(a.state.history.size() == b.state.history.size());
  for (std::size_t i = 0; i < a.state.history.size(); ++i) {
    CHECK(a.state.history[i].imitation_loss == b.state.history[i].imitation_loss);
    CHECK(a.state.history[i].model_loss == b.state.history[i].model_loss);
    const double va = a.state.history[i].validation_cost, vb = b.state.history[i].validation_cost;
    CHECK(((std::isnan(va) && std::isnan(vb)) || va == vb));
  }
  CHECK(a.state.params.flatten() == b.state.params.flatten());
  CHECK(a.final_validation.mean == b.final_validation.mean);
  CHECK(a.state.iteration == 4);

  // Scenario 1: only D moves.
  const LayerParams init1 = imitation_init(a.expert, Scenario::known_model_unknown_d, cfg);
  CHECK(a.state.params.a == init1.a);
  CHECK(a.state.params.b == init1.b);
  CHECK(a.state.params.q == init1.q);
  CHECK(a.state.params.r == init1.r);
  CHECK(a.state.params.sigma == init1.sigma);
  CHECK(a.state.params.d != init1.d);
  CHECK(MatrixXd(a.state.params.d.diagonal().asDiagonal()) == a.state.params.d);

  // Scenario 2: only A, B move.
  const ImitationRun s2 = train_imitation(Scenario::known_d_unknown_model, LayerKind::nominal_lmi, cfg);
  const LayerParams init2 = imitation_init(s2.expert, Scenario::known_d_unknown_model, cfg);
  CHECK(s2.state.params.q == init2.q);
  CHECK(s2.state.params.r == init2.r);
  CHECK(s2.state.params.d == init2.d);
  CHECK(s2.state.params.sigma == init2.sigma);
  CHECK(s2.state.params.a != init2.a);
  CHECK(s2.state.params.b != init2.b);

  // Layers without trainable blocks in Scenario 1 keep their parameters.
  const ImitationRun nom = train_imitation(Scenario::known_model_unknown_d, LayerKind::nominal_lmi, cfg);
  CHECK(nom.state.params.flatten() == init1.flatten());
}

TEST_CASE("smoothed imitation loss decreases from a random model") {
  ImitationConfig cfg = small_config(6);
  cfg.iterations = 60;
  for (LayerKind layer : {LayerKind::nominal_lmi, LayerKind::finite_horizon}) {
    const ImitationRun run = train_imitation(Scenario::known_d_unknown_model, layer, cfg);
    std::vector<double> first, last;
    for (int i = 0; i < 20; ++i) {
      first.push_back(run.state.history[i].imitation_loss);
      last.push_back(run.state.history[40 + i].imitation_loss);
    }
    CHECK(median(last) < median(first));
  }
}

TEST_CASE("solver failure rolls back to the last feasible parameters") {
  ImitationConfig cfg = small_config(1);
  cfg.iterations = 6;
  cfg.optimizer.lr = 50.0;  // drives D to its floor, where the robust layer is infeasible
  const ImitationRun run = train_imitation(Scenario::known_model_unknown_d, LayerKind::robust_lmi, cfg);
  int rollbacks = 0;
  for (const auto& rec : run.state.history)
    if (rec.event.find("rolled back") != std::string::npos) {
      ++rollbacks;
      CHECK(std::isnan(rec.imitation_loss));
    }
  CHECK(rollbacks > 0);
  CHECK(run.state.history.size() == 6);
  CHECK(std::isfinite(run.final_validation.mean));
  CHECK_NOTHROW(layer_gains(LayerKind::robust_lmi, run.state.params, 20));
}

TEST_CASE("layer gains") {
  const ExpertSpec e = generate_expert(0, 3, 3, 0.1);
  const LayerParams p = LayerParams::from(e.sys, e.unc);
  const auto robust = layer_gains(LayerKind::robust_lmi, p, 20);
  REQUIRE(robust.size() == 1);
  CHECK((robust[0] - e.expert_gain.k).norm() < 1e-6);
  const auto finite = layer_gains(LayerKind::finite_horizon, p, 50);
  CHECK(finite.size() == 50);
  const auto nominal = layer_gains(LayerKind::nominal_lmi, p, 20);
  const AreSolution are = solve_are(p.a, p.b, p.q, p.r);
  CHECK((nominal[0] - are.k).norm() < 1e-5);
  // the first step of a long plan is the stationary gain
  CHECK((finite[0] - are.k).norm() < 1e-5);
}

TEST_CASE("adp batch cost, cap and gradient") {
  const ExpertSpec e = generate_expert(2, 3, 3, 0.1);
  const MatrixXd k = e.expert_gain.k;
  const BatchCost bc = adp_batch_cost(k, e, 10, 8, 1e6, 3, true);
  CHECK(bc.capped == 0);
  CHECK(bc.cost > 0.0);
  CHECK(adp_batch_cost(k, e, 10, 8, 1e6, 3, false).cost == bc.cost);

  const double h = 1e-6;
  for (int i = 0; i < k.size(); ++i) {
    MatrixXd kp = k, km = k;
    kp(i) += h, km(i) -= h;
    const double fd = (adp_batch_cost(kp, e, 10, 8, 1e6, 3, false).cost -
                       adp_batch_cost(km, e, 10, 8, 1e6, 3, false).cost) / (2 * h);
    CHECK(bc.d_k(i) == doctest::Approx(fd).epsilon(1e-5));
  }

  const BatchCost blown = adp_batch_cost(MatrixXd::Constant(3, 3, 50.0), e, 20, 4, 1e6, 3, true);
  CHECK(blown.capped == 4);
  CHECK(blown.cost == doctest::Approx(1e6));
  CHECK(blown.d_k.isZero());
}

TEST_CASE("adp: truth-initialized robust layer starts near the robust optimum") {
  AdpConfig cfg;
  cfg.seed = 3;
  cfg.iterations = 2;
  const ExpertSpec e = generate_expert(cfg.seed, 3, 3, cfg.sigma, cfg.system);
  cfg.init = LayerParams::from(e.sys, e.unc);
  const AdpRun run = train_adp(AdpPolicy::robust_lmi, cfg);
  const double optimum = adp_batch_cost(e.expert_gain.k, e, cfg.horizon, 512, cfg.cap, 1, false).cost;
  CHECK(run.state.history.front().train_cost == doctest::Approx(optimum).epsilon(0.3));
  CHECK_FALSE(run.diverged);
}

TEST_CASE("adp: random linear gain hits the divergence sentinel") {
  AdpConfig cfg;
  cfg.iterations = 3;
  int diverged = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cfg.seed = seed;
    const AdpRun run = train_adp(AdpPolicy::linear, cfg);
    diverged += run.diverged;
    CHECK(run.state.history.size() == 3);
  }
  CHECK(diverged >= 1);
}

TEST_CASE("sign test") {
  CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024));
  CHECK(sign_test_p(9, 10) == doctest::Approx(11.0 / 1024));
  CHECK(sign_test_p(8, 10) == doctest::Approx(56.0 / 1024));
  CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
  CHECK(sign_test_p(9, 10) < 0.05);
  CHECK(sign_test_p(8, 10) > 0.05);
  CHECK_THROWS_AS(sign_test_p(11, 10), InputError);
}

TEST_CASE("name parsing") {
  CHECK(parse_layer("robust") == LayerKind::robust_lmi);
  CHECK(parse_layer("finite") == LayerKind::finite_horizon);
  CHECK(to_string(parse_layer("nominal")) == "nominal");
  CHECK(parse_adp_policy("linear") == AdpPolicy::linear);
  CHECK(parse_scenario(2) == Scenario::known_d_unknown_model);
  CHECK_THROWS_AS(parse_layer("mpc"), InputError);
  CHECK_THROWS_AS(parse_scenario(3), InputError);
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
}
