#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "rlqr/errors.hpp"
#include "rlqr/lmi_layers.hpp"

using namespace rlqr;

namespace {

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

MatrixXd gaussian(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g;
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m(i) = scale * g(rng);
  return m;
}

MatrixXd random_spd(int n, std::mt19937_64& rng, double shift = 0.5) {
  const MatrixXd g = gaussian(n, n, rng);
  return g * g.transpose() / n + shift * MatrixXd::Identity(n, n);
}

LinearSystem random_stable(int n, int m, std::mt19937_64& rng, double sigma = 0.1) {
  MatrixXd a = gaussian(n, n, rng);
  a *= 0.9 / spectral_radius(a);
  const MatrixXd b = gaussian(n, m, rng);
  const MatrixXd q = random_spd(n, rng);
  const MatrixXd r = random_spd(m, rng);
  return LinearSystem(a, b, q, r, sigma);
}

sdp::SolveOptions tight() {
  sdp::SolveOptions o;
  o.tol = 1e-10;
  return o;
}

// min over k of the max over boundary models of the scalar stationary cost
// (q + r k^2) sigma^2 / (1 - (a + b k)^2), by brute-force grids.
struct GridResult {
  double cost, k;
};
GridResult scalar_minmax(double a0, double b0, double q, double r, double da,
                         double db, double sigma) {
  const int n_phi = 6284;  // ~1e-3 rad
  std::vector<double> as(n_phi), bs(n_phi);
  for (int i = 0; i < n_phi; ++i) {
    const double phi = 2.0 * M_PI * i / n_phi;
    as[i] = a0 + std::cos(phi) / std::sqrt(da);
    bs[i] = b0 + std::sin(phi) / std::sqrt(db);
  }
  GridResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (int j = 0; j <= 2000; ++j) {
    const double k = -2.0 + 1e-3 * j;
    double worst = 0.0;
    for (int i = 0; i < n_phi && std::isfinite(worst); ++i) {
      const double cl = as[i] + bs[i] * k;
      worst = std::abs(cl) >= 1.0
                  ? std::numeric_limits<double>::infinity()
                  : std::max(worst, (q + r * k * k) * sigma * sigma / (1 - cl * cl));
    }
    if (worst < best.cost) best = {worst, k};
  }
  return best;
}

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("parameter layout round trip") {
  std::mt19937_64 rng(1);
  LayerParams p{gaussian(3, 3, rng), gaussian(3, 2, rng), gaussian(3, 3, rng),
                gaussian(2, 2, rng), gaussian(5, 5, rng), 0.3};
  const ParamLayout lay = p.layout();
  CHECK(lay.size() == 9 + 6 + 9 + 4 + 25 + 1);
  const VectorXd theta = p.flatten();
  CHECK(theta(lay.b_offset() + 1) == p.b(1, 0));
  const LayerParams back = LayerParams::unflatten(theta, lay);
  CHECK((back.a - p.a).norm() == 0.0);
  CHECK((back.d - p.d).norm() == 0.0);
  CHECK(back.sigma == 0.3);
  CHECK_THROWS_AS(LayerParams::unflatten(VectorXd::Zero(3), lay), InputError);
}

TEST_CASE("nominal LMI examples") {
  SUBCASE("A = 0") {
    LinearSystem sys(MatrixXd::Zero(2, 2), MatrixXd::Identity(2, 2),
                     MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 0.0);
    const auto enc = build_nominal_lmi(sys);
    const auto sol = solve_layer(enc.problem, tight());
    const AreSolution are = recover_p(enc, sol, sys);
    CHECK((are.p - MatrixXd::Identity(2, 2)).norm() < 1e-8);
    CHECK(are.k.norm() < 1e-8);
    CHECK(are.residual < 1e-9);
  }
  SUBCASE("scalar golden ratio") {
    LinearSystem sys(scalar(1), scalar(1), scalar(1), scalar(1), 0.0);
    const auto enc = build_nominal_lmi(sys);
    const auto are = recover_p(enc, solve_layer(enc.problem, tight()), sys);
    CHECK(are.p(0, 0) == doctest::Approx((1 + std::sqrt(5.0)) / 2).epsilon(1e-9));
    CHECK(are.residual < 1e-8);
  }
  SUBCASE("matches the ARE on random systems") {
    std::mt19937_64 rng(2);
    for (int n = 2; n <= 4; ++n)
      for (int m = 2; m <= 4; ++m)
        for (int trial = 0; trial < 3; ++trial) {
          const LinearSystem sys = random_stable(n, m, rng);
          const auto enc = build_nominal_lmi(sys, false);
          const auto are_sdp = recover_p(enc, solve_layer(enc.problem), sys);
          const auto are = solve_are(sys.a_nom(), sys.b_nom(), sys.q(), sys.r());
          CHECK((are_sdp.p - are.p).norm() / are.p.norm() < 1e-5);
          CHECK(spectral_radius(sys.a_nom() + sys.b_nom() * are_sdp.k) < 1.0);
        }
  }
  SUBCASE("non-stabilizable system does not solve") {
    const MatrixXd a = (MatrixXd(2, 2) << 1.5, 0, 0, 0.5).finished();
    const MatrixXd b = (MatrixXd(2, 1) << 0, 1).finished();
    LinearSystem sys(a, b, MatrixXd::Identity(2, 2), scalar(1), 0.0);
    const auto sol = sdp::solve(build_nominal_lmi(sys, false).problem);
    CHECK_FALSE(sol.optimal());
    CHECK(sol.status == sdp::SdpStatus::unbounded);
  }
}

TEST_CASE("gain recovery") {
  const Model nominal{MatrixXd::Identity(2, 2), MatrixXd::Ones(2, 3)};
  MatrixXd xi = MatrixXd::Identity(5, 5);
  CHECK(gain_from_xi(xi, 2, nominal).k.norm() == 0.0);
  std::mt19937_64 rng(3);
  const MatrixXd mk = gaussian(3, 2, rng);
  xi.topLeftCorner(2, 2) = 2 * MatrixXd::Identity(2, 2);
  xi.topRightCorner(2, 3) = 2 * mk.transpose();
  xi.bottomLeftCorner(3, 2) = 2 * mk;
  const GainPolicy g = gain_from_xi(xi, 2, nominal);
  CHECK((g.k - mk).norm() < 1e-14);
  CHECK(g.spectral_radius == doctest::Approx(spectral_radius(nominal.a + nominal.b * mk)));
  xi.topLeftCorner(2, 2) = Eigen::Vector2d(1.0, 1e-12).asDiagonal();
  CHECK_THROWS_AS(gain_from_xi(xi, 2, nominal), NumericalError);
}

TEST_CASE("robust SDP: vanishing uncertainty recovers LQR") {
  // Gaussian (A, B) with rho(A) <= 0.9 and Q = R = I, as for generated experts.
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    MatrixXd a = gaussian(3, 3, rng);
    a *= std::min(1.0, 0.9 / spectral_radius(a));
    const MatrixXd b = gaussian(3, 3, rng);
    const LinearSystem sys(a, b, MatrixXd::Identity(3, 3),
                           MatrixXd::Identity(3, 3), 0.1);
    const UncertaintyEllipsoid unc(1e6 * MatrixXd::Identity(6, 6), sys.a_nom(), sys.b_nom());
    const auto enc = build_robust_sdp(sys, unc, {1e-9, true, false});
    const auto sol = solve_layer(enc.problem, tight());
    const auto k = recover_gain(enc, sol, sys.nominal_model());
    const auto are = solve_are(sys.a_nom(), sys.b_nom(), sys.q(), sys.r());
    CHECK(max_abs(k.k - are.k) < 1e-3);
    // The gap shrinks like D^{-1/2}.
    const UncertaintyEllipsoid tighter(1e8 * MatrixXd::Identity(6, 6), sys.a_nom(), sys.b_nom());
    const auto enc8 = build_robust_sdp(sys, tighter, {1e-9, true, false});
    const auto k8 = recover_gain(enc8, solve_layer(enc8.problem, tight()), sys.nominal_model());
    CHECK(max_abs(k8.k - are.k) < 0.15 * max_abs(k.k - are.k));
  }
}

TEST_CASE("robust SDP: scalar min-max oracle") {
  const double sigma = 1.0;
  for (double d : {30.0, 60.0}) {
    LinearSystem sys(scalar(0.5), scalar(1), scalar(1), scalar(1), sigma);
    const MatrixXd dm = Eigen::Vector2d(d, 2 * d).asDiagonal();
    const UncertaintyEllipsoid unc(dm, sys.a_nom(), sys.b_nom());
    const auto enc = build_robust_sdp(sys, unc);
    const auto sol = solve_layer(enc.problem, tight());
    const double cost = worst_case_cost(enc, sol, sys);
    const GridResult grid = scalar_minmax(0.5, 1, 1, 1, d, 2 * d, sigma);
    CHECK(std::abs(cost - grid.cost) / grid.cost < 0.02);
    CHECK(cost == doctest::Approx(sol.primal_objective).epsilon(1e-9));
    const auto k = recover_gain(enc, sol, sys.nominal_model());
    CHECK(std::abs(k.k(0, 0) - grid.k) < 0.02);
  }
}

TEST_CASE("robust SDP: zero noise") {
  LinearSystem sys(scalar(0.5), scalar(1), scalar(1), scalar(1), 0.0);
  const UncertaintyEllipsoid unc(10 * MatrixXd::Identity(2, 2), sys.a_nom(), sys.b_nom());
  double previous = std::numeric_limits<double>::infinity();
  for (double eps : {1e-3, 1e-5, 1e-7}) {
    const auto enc = build_robust_sdp(sys, unc, {eps, true, false});
    const double cost = worst_case_cost(enc, solve_layer(enc.problem, tight()), sys);
    CHECK(cost >= 0.0);
    CHECK(cost < previous);
    CHECK(cost < 100 * eps);
    previous = cost;
  }
}

TEST_CASE("robust SDP: homogeneity, monotonicity and robustness") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const LinearSystem base = random_stable(3, 3, rng, 1.0);
    const MatrixXd d = (50.0 + 50.0 * trial) * MatrixXd::Identity(6, 6);
    auto solve_with = [&](const LinearSystem& sys, const MatrixXd& dd) {
      const UncertaintyEllipsoid unc(dd, sys.a_nom(), sys.b_nom());
      const auto enc = build_robust_sdp(sys, unc, {1e-9, true, false});
      const auto sol = solve_layer(enc.problem, tight());
      return std::make_tuple(worst_case_cost(enc, sol, sys),
                             recover_gain(enc, sol, sys.nominal_model()).k,
                             enc.xi(sol.primal));
    };
    const auto [c1, k1, xi1] = solve_with(base, d);

    const LinearSystem scaled_sigma(base.a_nom(), base.b_nom(), base.q(), base.r(), 0.3);
    const auto [c2, k2, xi2] = solve_with(scaled_sigma, d);
    CHECK(std::abs(c2 / c1 - 0.09) / 0.09 < 1e-6);
    CHECK(max_abs(k2 - k1) < 1e-6);

    const LinearSystem scaled_qr(base.a_nom(), base.b_nom(), 2.5 * base.q(), 2.5 * base.r(), 1.0);
    const auto [c3, k3, xi3] = solve_with(scaled_qr, d);
    CHECK(std::abs(c3 / c1 - 2.5) / 2.5 < 1e-8);
    CHECK(max_abs(k3 - k1) < 1e-8);
    CHECK(max_abs(xi3 - xi1) < 1e-8 * std::max(1.0, max_abs(xi1)));

    // A smaller D is a larger uncertainty set.
    const auto [c4, k4, xi4] = solve_with(base, 0.8 * d);
    CHECK(c4 >= c1 - 1e-8);

    // Every boundary model satisfies W >= X Xi X' + sigma^2 I and is
    // stabilized by the robust gain.
    const UncertaintyEllipsoid unc(d, base.a_nom(), base.b_nom());
    const MatrixXd w = xi1.topLeftCorner(3, 3);
    for (const Model& mdl : unc.sample_boundary(100, 17)) {
      MatrixXd x(3, 6);
      x << mdl.a, mdl.b;
      CHECK(min_eigenvalue(w - x * xi1 * x.transpose() - MatrixXd::Identity(3, 3)) > -1e-6);
      CHECK(spectral_radius(mdl.a + mdl.b * k1) < 1.0);
    }
  }
}

TEST_CASE("robust SDP: auxiliary and direct forms agree") {
  std::mt19937_64 rng(6);
  const LinearSystem sys = random_stable(3, 2, rng, 0.5);
  const UncertaintyEllipsoid unc(80 * MatrixXd::Identity(5, 5), sys.a_nom(), sys.b_nom());
  const auto aux = build_robust_sdp(sys, unc, {1e-9, true, false});
  const auto direct = build_robust_sdp(sys, unc, {1e-9, false, false});
  const auto s1 = solve_layer(aux.problem, tight());
  const auto s2 = solve_layer(direct.problem, tight());
  CHECK(s1.primal_objective == doctest::Approx(s2.primal_objective).epsilon(1e-7));
  CHECK(max_abs(recover_gain(aux, s1, sys.nominal_model()).k -
                recover_gain(direct, s2, sys.nominal_model()).k) < 1e-6);
}

TEST_CASE("parameter Jacobian matches finite differences of the builders") {
  std::mt19937_64 rng(7);
  const LinearSystem sys = random_stable(2, 1, rng, 0.4);
  MatrixXd d = random_spd(3, rng, 5.0);
  const LayerParams lp = LayerParams::from(sys, UncertaintyEllipsoid(d, sys.a_nom(), sys.b_nom()));
  const VectorXd theta = lp.flatten();
  const ParamLayout lay = lp.layout();

  auto flat = [](const sdp::SdpProblem& p) {
    std::vector<double> out(p.c.data(), p.c.data() + p.c.size());
    out.insert(out.end(), p.eq_a.data(), p.eq_a.data() + p.eq_a.size());
    out.insert(out.end(), p.eq_b.data(), p.eq_b.data() + p.eq_b.size());
    for (const auto& b : p.psd_blocks) {
      out.insert(out.end(), b.offset.data(), b.offset.data() + b.offset.size());
      out.insert(out.end(), b.lin.data(), b.lin.data() + b.lin.size());
    }
    return Eigen::Map<VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())).eval();
  };
  auto flat_delta = [&](const sdp::ProblemDelta& dl) {
    sdp::SdpProblem p;
    p.c = dl.c;
    p.eq_a = dl.eq_a;
    p.eq_b = dl.eq_b;
    p.psd_blocks = dl.psd_blocks;
    return flat(p);
  };
  for (bool robust : {false, true}) {
    auto build = [&](const VectorXd& th) {
      const LayerParams p = LayerParams::unflatten(th, lay);
      // Perturbed Q, R, D need not be exactly symmetric; the builders use
      // their symmetric parts, so symmetrize before validation.
      const LinearSystem s(p.a, p.b, sym(p.q), sym(p.r), p.sigma);
      if (!robust) return build_nominal_lmi(s, true).problem;
      return build_robust_sdp(s, UncertaintyEllipsoid(sym(p.d), p.a, p.b)).problem;
    };
    const sdp::SdpProblem prob = build(theta);
    REQUIRE(static_cast<int>(prob.param_jacobian.size()) == lay.size());
    for (int j = 0; j < lay.size(); ++j) {
      const double h = 1e-6;
      const VectorXd fd = (flat(build(theta + h * VectorXd::Unit(lay.size(), j))) -
                           flat(build(theta - h * VectorXd::Unit(lay.size(), j)))) /
                          (2 * h);
      const VectorXd an = flat_delta(prob.param_jacobian[j]);
      CHECK((fd - an).cwiseAbs().maxCoeff() < 1e-7 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("builder input errors") {
  LinearSystem sys(scalar(0.5), scalar(1), scalar(1), scalar(1), 0.1);
  const UncertaintyEllipsoid other(MatrixXd::Identity(2, 2), scalar(0.4), scalar(1));
  CHECK_THROWS_AS(build_robust_sdp(sys, other), InputError);
  const UncertaintyEllipsoid unc(MatrixXd::Identity(2, 2), scalar(0.5), scalar(1));
  CHECK_THROWS_AS(build_robust_sdp(sys, unc, {-1.0, true, true}), InputError);
}
