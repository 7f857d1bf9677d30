#include "rlqr/lin_sys.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rlqr/errors.hpp"

namespace rlqr {

namespace {

constexpr double kSpdTolerance = 1e-10;

void require(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

void require_spd(const MatrixXd& m, const std::string& name) {
  require(m.rows() == m.cols(), name + " must be square");
  require(m.allFinite(), name + " has non-finite entries");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * scale,
          name + " must be symmetric");
  require(min_eigenvalue(m) > kSpdTolerance,
          name + " must be positive definite");
}

}  // namespace

MatrixXd sym(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

double min_eigenvalue(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

LinearSystem::LinearSystem(MatrixXd a_nom, MatrixXd b_nom, MatrixXd q,
                           MatrixXd r, double sigma)
    : a_nom_(std::move(a_nom)),
      b_nom_(std::move(b_nom)),
      q_(std::move(q)),
      r_(std::move(r)),
      sigma_(sigma) {
  const auto n = a_nom_.rows();
  require(n >= 1 && a_nom_.cols() == n, "A must be square and non-empty");
  require(b_nom_.rows() == n && b_nom_.cols() >= 1, "B must be n x m, m >= 1");
  require(q_.rows() == n, "Q must be n x n");
  require(r_.rows() == b_nom_.cols(), "R must be m x m");
  require(a_nom_.allFinite() && b_nom_.allFinite(), "A, B must be finite");
  require_spd(q_, "Q");
  require_spd(r_, "R");
  require(std::isfinite(sigma_) && sigma_ >= 0.0, "sigma must be >= 0");
}

UncertaintyEllipsoid::UncertaintyEllipsoid(MatrixXd d, MatrixXd center)
    : d_(std::move(d)), center_(std::move(center)) {
  require(center_.cols() >= 1 && center_.rows() > center_.cols(),
          "center must be (n+m) x n with m >= 1");
  require(d_.rows() == center_.rows(), "D must be (n+m) x (n+m)");
  require_spd(d_, "D");
}

UncertaintyEllipsoid::UncertaintyEllipsoid(MatrixXd d, const MatrixXd& a_nom,
                                           const MatrixXd& b_nom)
    : UncertaintyEllipsoid(std::move(d), [&] {
        require(a_nom.rows() == b_nom.rows(), "A and B row counts differ");
        MatrixXd x(a_nom.rows(), a_nom.cols() + b_nom.cols());
        x << a_nom, b_nom;
        return MatrixXd(x.transpose());
      }()) {}

double UncertaintyEllipsoid::level(const Model& model) const {
  require(model.a.rows() == n() && model.a.cols() == n() &&
              model.b.rows() == n() && model.b.cols() == m(),
          "model dimensions do not match the ellipsoid");
  MatrixXd xt(n() + m(), n());
  xt << model.a.transpose(), model.b.transpose();
  const MatrixXd delta = xt - center_;
  const MatrixXd lvl = delta.transpose() * d_ * delta;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(lvl), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

bool UncertaintyEllipsoid::contains(const Model& model, double tol) const {
  return level(model) <= 1.0 + tol;
}

Model UncertaintyEllipsoid::sample_boundary(std::mt19937_64& rng) const {
  const int p = n() + m();
  std::normal_distribution<double> gauss(0.0, 1.0);
  MatrixXd g(p, n());
  for (int j = 0; j < n(); ++j)
    for (int i = 0; i < p; ++i) g(i, j) = gauss(rng);

  // Delta = D^{-1/2} G (G'G)^{-1/2}, so Delta' D Delta = I.
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(d_);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es_g(g.transpose() * g);
  const MatrixXd delta = es.operatorInverseSqrt() * g * es_g.operatorInverseSqrt();

  const MatrixXd x = (center_ + delta).transpose();
  return {x.leftCols(n()), x.rightCols(m())};
}

std::vector<Model> UncertaintyEllipsoid::sample_boundary(
    int count, std::uint64_t seed) const {
  auto rng = make_engine(seed, 0x5eed'b0dULL);
  std::vector<Model> models;
  models.reserve(count);
  for (int i = 0; i < count; ++i) models.push_back(sample_boundary(rng));
  return models;
}

GainPolicy GainPolicy::for_model(MatrixXd k, const Model& model) {
  require(k.rows() == model.b.cols() && k.cols() == model.a.rows(),
          "gain must be m x n");
  const double rho = rlqr::spectral_radius(model.a + model.b * k);
  return {std::move(k), rho};
}

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

VectorXd sample_gaussian(int n, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = scale * gauss(rng);
  return v;
}

std::vector<VectorXd> sample_noise(int n, int horizon, double sigma,
                                   std::uint64_t seed) {
  auto rng = make_engine(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<VectorXd> noise;
  noise.reserve(horizon);
  for (int t = 0; t < horizon; ++t) {
    VectorXd w(n);
    for (int i = 0; i < n; ++i) w(i) = sigma * gauss(rng);
    noise.push_back(std::move(w));
  }
  return noise;
}

Trajectory simulate(const Model& model, const std::vector<MatrixXd>& gains,
                    const VectorXd& x0, const std::vector<VectorXd>& noise) {
  const auto n = model.a.rows();
  const int horizon = static_cast<int>(noise.size());
  require(model.a.cols() == n && model.b.rows() == n, "model dimensions");
  require(x0.size() == n, "x0 must have n entries");
  require(!gains.empty(), "at least one gain is required");
  require(gains.size() == 1 || static_cast<int>(gains.size()) >= horizon,
          "time-varying gains must cover the horizon");
  for (const auto& k : gains)
    require(k.rows() == model.b.cols() && k.cols() == n, "gain must be m x n");

  Trajectory traj;
  traj.states.reserve(horizon + 1);
  traj.controls.reserve(horizon);
  traj.states.push_back(x0);
  for (int t = 0; t < horizon; ++t) {
    const MatrixXd& k = gains.size() == 1 ? gains.front() : gains[t];
    const VectorXd& x = traj.states.back();
    VectorXd u = k * x;
    require(noise[t].size() == n, "noise vectors must have n entries");
    traj.states.push_back(model.a * x + model.b * u + noise[t]);
    traj.controls.push_back(std::move(u));
  }
  return traj;
}

Trajectory rollout(const LinearSystem& sys, const Model& model,
                   const GainPolicy& policy, const VectorXd& x0, int horizon,
                   std::uint64_t rng_seed) {
  require(horizon >= 1, "horizon must be >= 1");
  require(model.a.rows() == sys.n() && model.b.cols() == sys.m(),
          "model does not match the system dimensions");
  return simulate(model, {policy.k}, x0,
                  sample_noise(sys.n(), horizon, sys.sigma(), rng_seed));
}

double quadratic_cost(const Trajectory& traj, const MatrixXd& q,
                      const MatrixXd& r, bool average) {
  double total = 0.0;
  for (const auto& x : traj.states) {
    require(x.size() == q.rows(), "Q does not match the state dimension");
    total += x.dot(q * x);
  }
  for (const auto& u : traj.controls) {
    require(u.size() == r.rows(), "R does not match the control dimension");
    total += u.dot(r * u);
  }
  if (average && traj.horizon() > 0) total /= traj.horizon();
  return total;
}

double spectral_radius(const MatrixXd& mat) {
  require(mat.rows() == mat.cols(), "spectral_radius needs a square matrix");
  if (mat.size() == 0) return 0.0;
  Eigen::EigenSolver<MatrixXd> es(mat, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace rlqr
