#include "rlqr/riccati.hpp"

#include <cmath>
#include <string>

#include <unsupported/Eigen/AutoDiff>

#include "rlqr/errors.hpp"

namespace rlqr {

namespace {

using AutoDiffXd = Eigen::AutoDiffScalar<VectorXd>;

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

void check_problem(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q,
                   const MatrixXd& r) {
  const auto n = a.rows();
  if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n ||
      r.rows() != b.cols() || r.cols() != b.cols())
    throw InputError("inconsistent LQR problem dimensions");
}

// One Riccati step P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA, returning the
// gain K = -(R + B'PB)^{-1} B'PA used in it.
template <typename T>
MatX<T> riccati_step(const MatX<T>& p, const MatX<T>& a, const MatX<T>& b,
                     const MatX<T>& q, const MatX<T>& r, MatX<T>* gain) {
  const MatX<T> pb = p * b;
  const MatX<T> gram = r + b.transpose() * pb;
  const MatX<T> k = -gram.partialPivLu().solve(pb.transpose() * a);
  MatX<T> next = q + a.transpose() * p * a + a.transpose() * pb * k;
  next = (0.5 * (next + next.transpose())).eval();
  if (gain) *gain = k;
  return next;
}

template <typename T>
std::vector<MatX<T>> backward_gains(const MatX<T>& a, const MatX<T>& b,
                                    const MatX<T>& q, const MatX<T>& r,
                                    int horizon,
                                    std::vector<MatX<T>>* values = nullptr) {
  std::vector<MatX<T>> gains(horizon);
  MatX<T> p = q;
  if (values) {
    values->assign(horizon + 1, MatX<T>());
    (*values)[horizon] = p;
  }
  for (int t = horizon - 1; t >= 0; --t) {
    p = riccati_step(p, a, b, q, r, &gains[t]);
    if (values) (*values)[t] = p;
  }
  return gains;
}

}  // namespace

MatrixXd are_defect(const MatrixXd& p, const MatrixXd& a, const MatrixXd& b,
                    const MatrixXd& q, const MatrixXd& r) {
  return p - riccati_step<double>(p, a, b, q, r, nullptr);
}

AreSolution solve_are(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q,
                      const MatrixXd& r, const AreOptions& opts) {
  check_problem(a, b, q, r);
  const MatrixXd qs = sym(q);
  const MatrixXd rs = sym(r);

  MatrixXd p = qs;
  double residual = are_defect(p, a, b, qs, rs).norm();
  double previous = residual;
  int growth = 0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    p = riccati_step<double>(p, a, b, qs, rs, nullptr);
    residual = are_defect(p, a, b, qs, rs).norm();
    if (!std::isfinite(residual))
      throw SolverError("ARE iteration produced non-finite values", previous);
    if (residual <= opts.tol * std::max(1.0, p.norm())) {
      AreSolution sol;
      sol.k = lqr_gain(p, a, b, rs).k;
      sol.p = std::move(p);
      sol.residual = residual;
      sol.iterations = it;
      return sol;
    }
    growth = residual > previous ? growth + 1 : 0;
    if (growth >= opts.divergence_window)
      throw SolverError("ARE iteration diverges; (A, B) is likely not "
                        "stabilizable",
                        residual);
    previous = residual;
  }
  throw SolverError("ARE iteration did not converge within " +
                        std::to_string(opts.max_iter) + " iterations",
                    residual);
}

GainPolicy lqr_gain(const MatrixXd& p, const MatrixXd& a, const MatrixXd& b,
                    const MatrixXd& r) {
  if (p.rows() != a.rows() || b.rows() != a.rows() || r.rows() != b.cols())
    throw InputError("lqr_gain: inconsistent dimensions");
  const MatrixXd gram = r + b.transpose() * p * b;
  Eigen::FullPivLU<MatrixXd> lu(gram);
  if (!lu.isInvertible() ||
      std::abs(lu.determinant()) <
          1e-14 * std::pow(std::max(1.0, gram.norm()), gram.rows()))
    throw NumericalError("lqr_gain: B'PB + R is singular");
  MatrixXd k = -lu.solve(b.transpose() * p * a);
  return GainPolicy::for_model(std::move(k), {a, b});
}

FiniteHorizonSolution solve_finite_horizon(const MatrixXd& a,
                                           const MatrixXd& b,
                                           const MatrixXd& q,
                                           const MatrixXd& r, int horizon) {
  check_problem(a, b, q, r);
  if (horizon < 1) throw InputError("horizon must be >= 1");
  FiniteHorizonSolution sol;
  sol.horizon = horizon;
  sol.gains = backward_gains<double>(a, b, sym(q), sym(r), horizon,
                                     &sol.value_mats);
  for (const auto& k : sol.gains)
    if (!k.allFinite())
      throw SolverError("finite-horizon recursion produced non-finite gains");
  return sol;
}

Trajectory execute_plan(const FiniteHorizonSolution& plan, const MatrixXd& a,
                        const MatrixXd& b, const PlanRollout& rollout) {
  const Model model = rollout.environment ? *rollout.environment : Model{a, b};
  std::vector<VectorXd> noise = rollout.noise;
  if (noise.empty()) noise.assign(plan.horizon, VectorXd::Zero(a.rows()));
  if (static_cast<int>(noise.size()) != plan.horizon)
    throw InputError("plan noise must cover the horizon");
  return simulate(model, plan.gains, rollout.x0, noise);
}

ProblemGradient finite_horizon_grad(const TrajectoryGradient& dl_dtau,
                                    const MatrixXd& a, const MatrixXd& b,
                                    const MatrixXd& q, const MatrixXd& r,
                                    int horizon, const PlanRollout& rollout) {
  check_problem(a, b, q, r);
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(b.cols());
  if (horizon < 1) throw InputError("horizon must be >= 1");
  if (static_cast<int>(dl_dtau.d_states.size()) != horizon + 1 ||
      static_cast<int>(dl_dtau.d_controls.size()) != horizon)
    throw InputError("trajectory gradient does not match the horizon");
  if (rollout.x0.size() != n) throw InputError("x0 must have n entries");

  // Parameter layout: vec(A), vec(B), vec(Q), vec(R), column-major.
  const int n_params = n * n + n * m + n * n + m * m;
  int offset = 0;
  auto seed = [&](const MatrixXd& src) {
    MatX<AutoDiffXd> out(src.rows(), src.cols());
    for (int j = 0; j < src.cols(); ++j)
      for (int i = 0; i < src.rows(); ++i)
        out(i, j) = AutoDiffXd(src(i, j), n_params, offset++);
    return out;
  };
  const MatX<AutoDiffXd> ad_a = seed(a);
  const MatX<AutoDiffXd> ad_b = seed(b);
  const MatX<AutoDiffXd> ad_q_raw = seed(q);
  const MatX<AutoDiffXd> ad_r_raw = seed(r);
  const MatX<AutoDiffXd> ad_q = 0.5 * (ad_q_raw + ad_q_raw.transpose());
  const MatX<AutoDiffXd> ad_r = 0.5 * (ad_r_raw + ad_r_raw.transpose());

  const auto gains = backward_gains<AutoDiffXd>(ad_a, ad_b, ad_q, ad_r, horizon);

  MatX<AutoDiffXd> env_a, env_b;
  if (rollout.environment) {
    env_a = rollout.environment->a.cast<AutoDiffXd>();
    env_b = rollout.environment->b.cast<AutoDiffXd>();
  } else {
    env_a = ad_a;
    env_b = ad_b;
  }

  VectorXd grad = VectorXd::Zero(n_params);
  auto accumulate = [&](const VecX<AutoDiffXd>& v, const VectorXd& weight) {
    for (int i = 0; i < v.size(); ++i)
      if (weight(i) != 0.0 && v(i).derivatives().size() == n_params)
        grad += weight(i) * v(i).derivatives();
  };

  VecX<AutoDiffXd> x = rollout.x0.cast<AutoDiffXd>();
  accumulate(x, dl_dtau.d_states[0]);
  for (int t = 0; t < horizon; ++t) {
    const VecX<AutoDiffXd> u = gains[t] * x;
    accumulate(u, dl_dtau.d_controls[t]);
    VecX<AutoDiffXd> next = env_a * x + env_b * u;
    if (!rollout.noise.empty()) next += rollout.noise.at(t).cast<AutoDiffXd>();
    x = next;
    accumulate(x, dl_dtau.d_states[t + 1]);
  }

  ProblemGradient out;
  offset = 0;
  auto take = [&](int rows, int cols) {
    MatrixXd blk(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) blk(i, j) = grad(offset++);
    return blk;
  };
  out.d_a = take(n, n);
  out.d_b = take(n, m);
  out.d_q = take(n, n);
  out.d_r = take(m, m);
  return out;
}

}  // namespace rlqr
