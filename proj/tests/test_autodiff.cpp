#include <doctest.h>

#include <cmath>
#include <random>

#include "rlqr/autodiff.hpp"
#include "rlqr/errors.hpp"

using namespace rlqr;

namespace {

MatrixXd gaussian(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

MatrixXd random_spd(int n, std::mt19937_64& rng, double shift) {
  const MatrixXd g = gaussian(n, n, rng);
  return g * g.transpose() / n + shift * MatrixXd::Identity(n, n);
}

LinearSystem random_system(int n, int m, std::mt19937_64& rng, double sigma) {
  MatrixXd a = gaussian(n, n, rng);
  a *= std::min(1.0, 0.9 / spectral_radius(a));
  const MatrixXd b = gaussian(n, m, rng);
  const MatrixXd q = random_spd(n, rng, 0.5);
  const MatrixXd r = random_spd(m, rng, 0.5);
  return LinearSystem(a, b, q, r, sigma);
}

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

// Per-block relative error; blocks whose reference is tiny next to the whole
// gradient are compared against the whole gradient's scale instead.
double block_error(const MatrixXd& got, const MatrixXd& ref, double total) {
  return (got - ref).norm() / std::max(ref.norm(), 1e-6 * std::max(1.0, total));
}

double max_block_error(const ParamGradient& got, const ParamGradient& ref) {
  const double total = ref.flatten().norm();
  return std::max({block_error(got.d_a_nom, ref.d_a_nom, total),
                   block_error(got.d_b_nom, ref.d_b_nom, total),
                   block_error(got.d_q, ref.d_q, total), block_error(got.d_r, ref.d_r, total),
                   block_error(got.d_d, ref.d_d, total),
                   block_error(scalar(got.d_sigma), scalar(ref.d_sigma), total)});
}

struct RobustCase {
  LinearSystem sys;
  UncertaintyEllipsoid unc;
  RobustEncoding enc;
  sdp::SdpSolution sol;
};

RobustCase robust_case(std::uint64_t seed, double sigma = 0.5) {
  std::mt19937_64 rng(seed);
  LinearSystem sys = random_system(3, 3, rng, sigma);
  const MatrixXd d = 60.0 * random_spd(6, rng, 1.0);
  UncertaintyEllipsoid unc(d, sys.a_nom(), sys.b_nom());
  RobustEncoding enc = build_robust_sdp(sys, unc);
  sdp::SdpSolution sol = solve_layer(enc.problem);
  return {std::move(sys), std::move(unc), std::move(enc), std::move(sol)};
}

// Independent oracle: the loss evaluated through full re-solves, with K and
// the cost read straight off Xi.
double robust_loss(const LayerParams& p, const LayerLossGrad& loss) {
  const int n = static_cast<int>(p.a.rows());
  const LinearSystem s(p.a, p.b, p.q, p.r, p.sigma);
  const auto enc = build_robust_sdp(s, UncertaintyEllipsoid(p.d, p.a, p.b), {1e-9, true, false});
  const MatrixXd xi = enc.xi(solve_layer(enc.problem).primal);
  const MatrixXd w = xi.topLeftCorner(n, n);
  const MatrixXd k = (w.inverse() * xi.topRightCorner(n, xi.cols() - n)).transpose();
  MatrixXd qr = MatrixXd::Zero(xi.rows(), xi.cols());
  qr.topLeftCorner(n, n) = p.q;
  qr.bottomRightCorner(xi.rows() - n, xi.rows() - n) = p.r;
  return loss.dl_dcost * (qr * xi).trace() + (loss.dl_dk.array() * k.array()).sum();
}

ParamGradient robust_fd_oracle(const RobustCase& c, const LayerLossGrad& loss) {
  return fd_oracle([&](const LayerParams& p) { return robust_loss(p, loss); },
                   LayerParams::from(c.sys, c.unc), ParamMask::all(), 1e-5, 1e-7, 4);
}

// Scalar ARE closed form: b^2 p^2 + (r - q b^2 - a^2 r) p - q r = 0.
double scalar_gain(double a, double b, double q, double r) {
  const double c1 = r - q * b * b - a * a * r;
  const double p = (-c1 + std::sqrt(c1 * c1 + 4 * b * b * q * r)) / (2 * b * b);
  return -a * b * p / (r + b * b * p);
}

}  // namespace

TEST_CASE("grad_through_gain") {
  SUBCASE("zero upstream gradient") {
    const auto g = grad_through_gain(MatrixXd::Zero(2, 3), MatrixXd::Identity(3, 3),
                                     MatrixXd::Ones(3, 2));
    CHECK(g.d_w.norm() == 0.0);
    CHECK(g.d_z.norm() == 0.0);
  }
  SUBCASE("scalar k = z / w") {
    const auto g = grad_through_gain(scalar(1), scalar(2), scalar(1));
    CHECK(g.d_z(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(g.d_w(0, 0) == doctest::Approx(-0.25).epsilon(1e-15));
  }
  SUBCASE("random 3x3 against finite differences") {
    std::mt19937_64 rng(11);
    const MatrixXd w = random_spd(3, rng, 1.0);
    const MatrixXd z = gaussian(3, 2, rng);
    const MatrixXd gk = gaussian(2, 3, rng);
    auto loss = [&](const MatrixXd& ww, const MatrixXd& zz) {
      return (gk.array() * (zz.transpose() * ww.inverse()).array()).sum();
    };
    const auto g = grad_through_gain(gk, w, z);
    const double h = 1e-6;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 2; ++j) {
        MatrixXd zp = z, zm = z;
        zp(i, j) += h;
        zm(i, j) -= h;
        CHECK(std::abs((loss(w, zp) - loss(w, zm)) / (2 * h) - g.d_z(i, j)) < 1e-6);
      }
      for (int j = 0; j <= i; ++j) {
        MatrixXd e = MatrixXd::Zero(3, 3);
        e(i, j) = e(j, i) = h;
        double fd = (loss(w + e, z) - loss(w - e, z)) / (2 * h);
        if (i != j) fd *= 0.5;
        CHECK(std::abs(fd - g.d_w(i, j)) < 1e-6);
      }
    }
    CHECK((g.d_w - g.d_w.transpose()).norm() == 0.0);
  }
  SUBCASE("singular W") {
    CHECK_THROWS_AS(grad_through_gain(scalar(1), scalar(1e-12), scalar(1)), NumericalError);
  }
}

TEST_CASE("fd_oracle basics") {
  std::mt19937_64 rng(12);
  const LinearSystem sys = random_system(2, 1, rng, 0.7);
  const LayerParams p = LayerParams::from(sys);
  SUBCASE("trace(Q)") {
    const auto g = fd_oracle([](const LayerParams& t) { return t.q.trace(); }, p);
    CHECK((g.d_q - MatrixXd::Identity(2, 2)).norm() < 1e-9);
    CHECK(g.d_a_nom.norm() == 0.0);
    CHECK(g.path == GradPath::finite_diff);
  }
  SUBCASE("sigma squared") {
    const auto g = fd_oracle([](const LayerParams& t) { return t.sigma * t.sigma; }, p);
    CHECK(g.d_sigma == doctest::Approx(1.4).epsilon(1e-9));
  }
  SUBCASE("unevaluable coordinates are skipped") {
    auto loss = [](const LayerParams& t) -> std::optional<double> {
      if (t.sigma < 0.7) return std::nullopt;
      return t.q.trace() + t.sigma;
    };
    const auto g = fd_oracle(loss, p);
    CHECK(g.d_sigma == 0.0);
    CHECK(g.warnings.size() == 1);
    CHECK((g.d_q - MatrixXd::Identity(2, 2)).norm() < 1e-9);
  }
  SUBCASE("mask") {
    ParamMask mask = ParamMask::all();
    mask.q = false;
    const auto g = fd_oracle([](const LayerParams& t) { return t.q.trace() + t.a.sum(); }, p,
                             mask);
    CHECK(g.d_q.norm() == 0.0);
    CHECK((g.d_a_nom - MatrixXd::Ones(2, 2)).norm() < 1e-9);
  }
  SUBCASE("threads give identical results") {
    auto loss = [](const LayerParams& t) { return t.q.squaredNorm() + t.a.norm() * t.sigma; };
    const auto g1 = fd_oracle(loss, p, {}, 1e-5, 1e-7, 1);
    const auto g4 = fd_oracle(loss, p, {}, 1e-5, 1e-7, 4);
    CHECK((g1.flatten() - g4.flatten()).norm() == 0.0);
  }
}

TEST_CASE("robust layer gradient") {
  SUBCASE("zero loss gradient") {
    const RobustCase c = robust_case(20);
    const auto g = grad_robust_layer({MatrixXd::Zero(3, 3), 0.0}, c.sys, c.unc, c.enc, c.sol);
    CHECK(g.flatten().norm() == 0.0);
  }
  SUBCASE("sigma gradient of the worst-case cost") {
    const RobustCase c = robust_case(21, 0.1);
    const auto g = grad_robust_layer({MatrixXd::Zero(3, 3), 1.0}, c.sys, c.unc, c.enc, c.sol);
    CHECK(g.path == GradPath::implicit);
    CHECK(g.d_sigma > 0.0);
    // cost(sigma) = sigma^2 cost(1) up to the epsilon floor.
    const double cost = worst_case_cost(c.enc, c.sol, c.sys);
    CHECK(g.d_sigma == doctest::Approx(2 * cost / 0.1).epsilon(1e-5));
  }
  SUBCASE("full gradient against finite differences") {
    for (std::uint64_t seed : {22, 23, 24}) {
      const RobustCase c = robust_case(seed);
      std::mt19937_64 rng(seed + 100);
      const LayerLossGrad loss{gaussian(3, 3, rng), 0.3};
      const auto g = grad_robust_layer(loss, c.sys, c.unc, c.enc, c.sol);
      REQUIRE(g.path == GradPath::implicit);
      const auto fd = robust_fd_oracle(c, loss);
      CHECK(fd.warnings.empty());
      CHECK(max_block_error(g, fd) < 1e-3);
      CHECK((g.d_q - g.d_q.transpose()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((g.d_r - g.d_r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((g.d_d - g.d_d.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("adjoint matches forward directional derivatives") {
    const RobustCase c = robust_case(25);
    std::mt19937_64 rng(125);
    const MatrixXd gk = gaussian(3, 3, rng);
    const auto g = grad_robust_layer({gk, 0.0}, c.sys, c.unc, c.enc, c.sol);
    const sdp::KktLinearization lin(c.enc.problem, c.sol);
    const MatrixXd w = c.enc.w(c.sol.primal), z = c.enc.z(c.sol.primal);
    for (int trial = 0; trial < 5; ++trial) {
      const VectorXd v = gaussian(g.layout().size(), 1, rng);
      const VectorXd dx = lin.forward(v);
      const MatrixXd dxi = c.enc.xi(dx);
      const MatrixXd dw = dxi.topLeftCorner(3, 3), dz = dxi.topRightCorner(3, 3);
      const MatrixXd wi = w.inverse();
      const MatrixXd dk = dz.transpose() * wi - z.transpose() * wi * dw * wi;
      const double directional = (gk.array() * dk.array()).sum();
      CHECK(std::abs(g.flatten().dot(v) - directional) <
            1e-8 * std::max(1.0, std::abs(directional)));
    }
  }
  SUBCASE("gain is sigma-invariant") {
    const RobustCase c = robust_case(26, 0.4);
    std::mt19937_64 rng(126);
    const auto g = grad_robust_layer({gaussian(3, 3, rng), 0.0}, c.sys, c.unc, c.enc, c.sol);
    CHECK(std::abs(g.d_sigma) < 1e-5);
  }
  SUBCASE("mask zeroes frozen blocks") {
    const RobustCase c = robust_case(27);
    GradOptions opts;
    opts.mask = ParamMask::none();
    opts.mask.d = true;
    std::mt19937_64 rng(127);
    const auto g = grad_robust_layer({gaussian(3, 3, rng), 1.0}, c.sys, c.unc, c.enc, c.sol, opts);
    CHECK(g.d_a_nom.norm() == 0.0);
    CHECK(g.d_b_nom.norm() == 0.0);
    CHECK(g.d_q.norm() == 0.0);
    CHECK(g.d_r.norm() == 0.0);
    CHECK(g.d_sigma == 0.0);
    CHECK(g.d_d.norm() > 0.0);
  }
  SUBCASE("finite-difference fallback agrees with the implicit path") {
    const RobustCase c = robust_case(28);
    std::mt19937_64 rng(128);
    const LayerLossGrad loss{gaussian(3, 3, rng), 0.5};
    const auto implicit = grad_robust_layer(loss, c.sys, c.unc, c.enc, c.sol);
    GradOptions opts;
    opts.force_finite_diff = true;
    opts.threads = 4;
    const auto fd = grad_robust_layer(loss, c.sys, c.unc, c.enc, c.sol, opts);
    CHECK(fd.path == GradPath::finite_diff);
    CHECK(max_block_error(implicit, fd) < 1e-3);
  }
  SUBCASE("degenerate instance falls back") {
    // sigma = 0 without the floor: the optimum is Xi = 0 and strict
    // complementarity fails.
    std::mt19937_64 rng(29);
    const LinearSystem sys = random_system(2, 1, rng, 0.0);
    const UncertaintyEllipsoid unc(50 * MatrixXd::Identity(3, 3), sys.a_nom(), sys.b_nom());
    const RobustOptions ro{0.0, true, true};
    const auto enc = build_robust_sdp(sys, unc, ro);
    const auto sol = solve_layer(enc.problem);
    GradOptions opts;
    opts.robust = ro;
    const auto g = grad_robust_layer({MatrixXd::Zero(1, 2), 1.0}, sys, unc, enc, sol, opts);
    CHECK(g.path == GradPath::finite_diff);
    REQUIRE_FALSE(g.warnings.empty());
    CHECK(g.warnings.front().find("fallback") != std::string::npos);
    CHECK(g.flatten().cwiseAbs().maxCoeff() < 1e-6);
    opts.allow_fallback = false;
    CHECK_THROWS_AS(grad_robust_layer({MatrixXd::Zero(1, 2), 1.0}, sys, unc, enc, sol, opts),
                    DegeneracyError);
  }
}

TEST_CASE("nominal layer gradient") {
  SUBCASE("scalar golden ratio, l = k") {
    LinearSystem sys(scalar(1), scalar(1), scalar(1), scalar(1), 0.0);
    const auto enc = build_nominal_lmi(sys);
    const auto sol = solve_layer(enc.problem);
    const auto g = grad_nominal_layer(scalar(1), sys, enc, sol);
    const double h = 1e-6;
    const double dq = (scalar_gain(1, 1, 1 + h, 1) - scalar_gain(1, 1, 1 - h, 1)) / (2 * h);
    const double dr = (scalar_gain(1, 1, 1, 1 + h) - scalar_gain(1, 1, 1, 1 - h)) / (2 * h);
    const double da = (scalar_gain(1 + h, 1, 1, 1) - scalar_gain(1 - h, 1, 1, 1)) / (2 * h);
    const double db = (scalar_gain(1, 1 + h, 1, 1) - scalar_gain(1, 1 - h, 1, 1)) / (2 * h);
    CHECK(std::abs(g.d_q(0, 0) - dq) < 1e-5);
    CHECK(std::abs(g.d_r(0, 0) - dr) < 1e-5);
    CHECK(std::abs(g.d_a_nom(0, 0) - da) < 1e-5);
    CHECK(std::abs(g.d_b_nom(0, 0) - db) < 1e-5);
    CHECK(g.d_d.norm() == 0.0);
    CHECK(g.d_sigma == 0.0);
  }
  SUBCASE("random 3x3 against finite differences of the ARE") {
    for (std::uint64_t seed : {30, 31, 32}) {
      std::mt19937_64 rng(seed);
      const LinearSystem sys = random_system(3, 3, rng, 0.2);
      const MatrixXd gk = gaussian(3, 3, rng);
      const auto enc = build_nominal_lmi(sys);
      const auto g = grad_nominal_layer(gk, sys, enc, solve_layer(enc.problem));
      REQUIRE(g.path == GradPath::implicit);
      auto loss = [&](const LayerParams& p) -> std::optional<double> {
        const auto are = solve_are(p.a, p.b, p.q, p.r);
        return (gk.array() * are.k.array()).sum();
      };
      const auto fd = fd_oracle(loss, LayerParams::from(sys), ParamMask::nominal());
      CHECK(max_block_error(g, fd) < 1e-3);
      CHECK((g.d_q - g.d_q.transpose()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((g.d_r - g.d_r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("frozen Q and R") {
    std::mt19937_64 rng(33);
    const LinearSystem sys = random_system(2, 2, rng, 0.2);
    const auto enc = build_nominal_lmi(sys);
    GradOptions opts;
    opts.mask = ParamMask::nominal();
    opts.mask.q = opts.mask.r = false;
    const auto g =
        grad_nominal_layer(gaussian(2, 2, rng), sys, enc, solve_layer(enc.problem), opts);
    CHECK(g.d_q.norm() == 0.0);
    CHECK(g.d_r.norm() == 0.0);
    CHECK(g.d_a_nom.norm() > 0.0);
  }
}
