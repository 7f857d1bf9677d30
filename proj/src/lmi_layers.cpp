#include "rlqr/lmi_layers.hpp"

#include <cmath>
#include <sstream>

#include <unsupported/Eigen/AutoDiff>

#include "rlqr/errors.hpp"

namespace rlqr {

using sdp::svec_dim;

namespace {

using AutoDiffXd = Eigen::AutoDiffScalar<VectorXd>;
template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

double value_of(double v) { return v; }
double value_of(const AutoDiffXd& v) { return v.value(); }

// d(v)/d(theta); empty derivative vectors mean a parameter-free entry.
void add_derivative(const AutoDiffXd& v, int n_params, VectorXd* out) {
  if (v.derivatives().size() == n_params) *out += v.derivatives();
}

template <typename T>
VecX<T> svec_t(const MatX<T>& s) {
  const int k = static_cast<int>(s.rows());
  VecX<T> v(svec_dim(k));
  const double r2 = std::sqrt(0.5);
  int p = 0;
  for (int j = 0; j < k; ++j) {
    v(p++) = s(j, j);
    for (int i = j + 1; i < k; ++i) v(p++) = r2 * (s(i, j) + s(j, i));
  }
  return v;
}

template <typename T>
MatX<T> smat_t(const VecX<T>& v, int k) {
  MatX<T> s(k, k);
  const double r2 = std::sqrt(0.5);
  int p = 0;
  for (int j = 0; j < k; ++j) {
    s(j, j) = v(p++);
    for (int i = j + 1; i < k; ++i) {
      s(i, j) = r2 * v(p++);
      s(j, i) = s(i, j);
    }
  }
  return s;
}

template <typename T>
MatX<T> sym_t(const MatX<T>& m) {
  return T(0.5) * (m + m.transpose());
}

template <typename T>
struct Params {
  MatX<T> a, b, q, r, d;
  T sigma;
};

// Evaluation of an affine program at one decision vector.
template <typename T>
struct AffineEval {
  T objective;
  VecX<T> eq;  // eq_a x - eq_b
  std::vector<MatX<T>> blocks;
};

Params<double> plain_params(const LayerParams& p) {
  return {p.a, p.b, p.q, p.r, p.d, p.sigma};
}

Params<AutoDiffXd> seeded_params(const LayerParams& p) {
  const int n_params = p.layout().size();
  int offset = 0;
  auto seed = [&](const MatrixXd& src) {
    MatX<AutoDiffXd> out(src.rows(), src.cols());
    for (int j = 0; j < src.cols(); ++j)
      for (int i = 0; i < src.rows(); ++i)
        out(i, j) = AutoDiffXd(src(i, j), n_params, offset++);
    return out;
  };
  Params<AutoDiffXd> out;
  out.a = seed(p.a);
  out.b = seed(p.b);
  out.q = seed(p.q);
  out.r = seed(p.r);
  out.d = seed(p.d);
  out.sigma = AutoDiffXd(p.sigma, n_params, offset++);
  return out;
}

// Recovers the coefficients of an affine program by evaluating it at x = 0
// and at every unit vector; with AutoDiff scalars the parameter Jacobian of
// every coefficient comes along.
template <typename T, typename Fn>
sdp::SdpProblem compile(int var_dim, int n_params, Fn&& fn) {
  const VectorXd zero = VectorXd::Zero(var_dim);
  const AffineEval<T> base = fn(zero);
  const int n_eq = static_cast<int>(base.eq.size());
  const int n_blk = static_cast<int>(base.blocks.size());
  constexpr bool kJac = std::is_same_v<T, AutoDiffXd>;

  sdp::SdpProblem prob;
  prob.var_dim = var_dim;
  prob.c = VectorXd::Zero(var_dim);
  prob.eq_a = MatrixXd::Zero(n_eq, var_dim);
  prob.eq_b = VectorXd::Zero(n_eq);
  std::vector<VecX<T>> base_svec;
  for (const auto& blk : base.blocks) {
    sdp::PsdBlock pb;
    pb.size = static_cast<int>(blk.rows());
    base_svec.push_back(svec_t<T>(blk));
    pb.offset = base_svec.back().unaryExpr([](const T& v) { return value_of(v); });
    pb.lin = MatrixXd::Zero(svec_dim(pb.size), var_dim);
    prob.psd_blocks.push_back(std::move(pb));
  }
  for (int r = 0; r < n_eq; ++r) prob.eq_b(r) = -value_of(base.eq(r));

  if (kJac) {
    prob.param_jacobian.resize(n_params);
    for (auto& d : prob.param_jacobian) {
      d.c = VectorXd::Zero(var_dim);
      d.eq_a = MatrixXd::Zero(n_eq, var_dim);
      d.eq_b = VectorXd::Zero(n_eq);
      for (int k = 0; k < n_blk; ++k) {
        sdp::PsdBlock pb;
        pb.size = prob.psd_blocks[k].size;
        pb.offset = VectorXd::Zero(svec_dim(pb.size));
        pb.lin = MatrixXd::Zero(svec_dim(pb.size), var_dim);
        d.psd_blocks.push_back(std::move(pb));
      }
    }
  }
  // Scatters d(v)/d(theta) into one coefficient of every ProblemDelta.
  VectorXd grad(n_params);
  auto scatter = [&](const T& v, auto&& setter) {
    if constexpr (kJac) {
      grad.setZero();
      add_derivative(v, n_params, &grad);
      for (int j = 0; j < n_params; ++j)
        if (grad(j) != 0.0) setter(prob.param_jacobian[j], grad(j));
    }
  };
  for (int r = 0; r < n_eq; ++r)
    scatter(T(-base.eq(r)), [&](sdp::ProblemDelta& d, double g) { d.eq_b(r) = g; });
  for (int k = 0; k < n_blk; ++k)
    for (int p = 0; p < base_svec[k].size(); ++p)
      scatter(base_svec[k](p), [&](sdp::ProblemDelta& d, double g) {
        d.psd_blocks[k].offset(p) = g;
      });

  VectorXd e = VectorXd::Zero(var_dim);
  for (int i = 0; i < var_dim; ++i) {
    e(i) = 1.0;
    const AffineEval<T> ev = fn(e);
    e(i) = 0.0;
    const T dc = ev.objective - base.objective;
    prob.c(i) = value_of(dc);
    scatter(dc, [&](sdp::ProblemDelta& d, double g) { d.c(i) = g; });
    for (int r = 0; r < n_eq; ++r) {
      const T da = ev.eq(r) - base.eq(r);
      prob.eq_a(r, i) = value_of(da);
      scatter(da, [&](sdp::ProblemDelta& d, double g) { d.eq_a(r, i) = g; });
    }
    for (int k = 0; k < n_blk; ++k) {
      const VecX<T> col = svec_t<T>(ev.blocks[k]) - base_svec[k];
      for (int p = 0; p < col.size(); ++p) {
        prob.psd_blocks[k].lin(p, i) = value_of(col(p));
        scatter(col(p), [&](sdp::ProblemDelta& d, double g) {
          d.psd_blocks[k].lin(p, i) = g;
        });
      }
    }
  }
  return prob;
}

template <typename T>
AffineEval<T> nominal_eval(const Params<T>& p, int n, int m, const VectorXd& x) {
  const int np = svec_dim(n);
  const MatX<T> pm = smat_t<T>(x.head(np).cast<T>(), n);
  const MatX<T> s1 = Eigen::Map<const MatrixXd>(x.data() + np, n, m).cast<T>();
  const MatX<T> s2 = Eigen::Map<const MatrixXd>(x.data() + np + n * m, n, n).cast<T>();
  const MatX<T> q = sym_t<T>(p.q);
  const MatX<T> r = sym_t<T>(p.r);

  AffineEval<T> ev;
  ev.objective = -pm.trace();
  ev.eq.resize(n * m + n * n);
  const MatX<T> e1 = s1 - pm * p.b;
  const MatX<T> e2 = s2 - pm * p.a;
  for (int i = 0; i < n * m; ++i) ev.eq(i) = e1(i);
  for (int i = 0; i < n * n; ++i) ev.eq(n * m + i) = e2(i);

  MatX<T> blk(m + n, m + n);
  blk.topLeftCorner(m, m) = r + sym_t<T>(p.b.transpose() * s1);
  blk.topRightCorner(m, n) = p.b.transpose() * s2;
  blk.bottomLeftCorner(n, m) = blk.topRightCorner(m, n).transpose();
  blk.bottomRightCorner(n, n) = q - pm + sym_t<T>(p.a.transpose() * s2);
  ev.blocks = {blk, pm};
  return ev;
}

template <typename T>
AffineEval<T> robust_eval(const Params<T>& p, int n, int m, const RobustOptions& opts,
                          const VectorXd& x) {
  const int k = n + m;
  const int nxi = svec_dim(k);
  const MatX<T> xi = smat_t<T>(x.head(nxi).cast<T>(), k);
  const T lambda = T(x(nxi));
  MatX<T> xbar(n, k);
  xbar << p.a, p.b;
  const MatX<T> q = sym_t<T>(p.q);
  const MatX<T> r = sym_t<T>(p.r);
  const MatX<T> d = sym_t<T>(p.d);

  MatX<T> cost = MatX<T>::Zero(k, k);
  cost.topLeftCorner(n, n) = q;
  cost.bottomRightCorner(m, m) = r;

  AffineEval<T> ev;
  ev.objective = (cost * xi).trace();

  MatX<T> s;
  if (opts.use_aux) {
    s = Eigen::Map<const MatrixXd>(x.data() + nxi + 1, k, n).cast<T>();
    const MatX<T> res = s - xi * xbar.transpose();
    ev.eq.resize(k * n);
    for (int i = 0; i < k * n; ++i) ev.eq(i) = res(i);
  } else {
    s = xi * xbar.transpose();
    ev.eq.resize(0);
  }

  const MatX<T> eye_n = MatX<T>::Identity(n, n);
  MatX<T> blk = MatX<T>::Zero(2 * n + k, 2 * n + k);
  blk.topLeftCorner(n, n) = eye_n;
  blk.block(0, n, n, n) = p.sigma * eye_n;
  blk.block(n, 0, n, n) = p.sigma * eye_n;
  blk.block(n, n, n, n) =
      xi.topLeftCorner(n, n) - sym_t<T>(xbar * s) - lambda * eye_n;
  blk.block(n, 2 * n, n, k) = s.transpose();
  blk.block(2 * n, n, k, n) = s;
  blk.block(2 * n, 2 * n, k, k) = lambda * d - xi;

  const MatX<T> floor = xi - T(opts.epsilon) * MatX<T>::Identity(k, k);
  ev.blocks = {blk, floor};
  return ev;
}

void check_center(const LinearSystem& sys, const UncertaintyEllipsoid& unc) {
  if (unc.n() != sys.n() || unc.m() != sys.m())
    throw InputError("ellipsoid dimensions do not match the system");
  MatrixXd xt(sys.n() + sys.m(), sys.n());
  xt << sys.a_nom().transpose(), sys.b_nom().transpose();
  if ((xt - unc.center()).cwiseAbs().maxCoeff() >
      1e-12 * std::max(1.0, xt.cwiseAbs().maxCoeff()))
    throw InputError("ellipsoid center must equal the nominal [A, B]'");
}

}  // namespace

VectorXd LayerParams::flatten() const {
  const ParamLayout lay = layout();
  VectorXd theta(lay.size());
  theta.segment(lay.a_offset(), a.size()) = a.reshaped();
  theta.segment(lay.b_offset(), b.size()) = b.reshaped();
  theta.segment(lay.q_offset(), q.size()) = q.reshaped();
  theta.segment(lay.r_offset(), r.size()) = r.reshaped();
  theta.segment(lay.d_offset(), d.size()) = d.reshaped();
  theta(lay.sigma_offset()) = sigma;
  return theta;
}

LayerParams LayerParams::unflatten(const VectorXd& theta, const ParamLayout& lay) {
  if (theta.size() != lay.size()) throw InputError("theta has the wrong length");
  const int n = lay.n, m = lay.m, k = n + m;
  LayerParams p;
  p.a = theta.segment(lay.a_offset(), n * n).reshaped(n, n);
  p.b = theta.segment(lay.b_offset(), n * m).reshaped(n, m);
  p.q = theta.segment(lay.q_offset(), n * n).reshaped(n, n);
  p.r = theta.segment(lay.r_offset(), m * m).reshaped(m, m);
  p.d = theta.segment(lay.d_offset(), k * k).reshaped(k, k);
  p.sigma = theta(lay.sigma_offset());
  return p;
}

LayerParams LayerParams::from(const LinearSystem& sys, const UncertaintyEllipsoid& unc) {
  check_center(sys, unc);
  return {sys.a_nom(), sys.b_nom(), sys.q(), sys.r(), unc.d(), sys.sigma()};
}

LayerParams LayerParams::from(const LinearSystem& sys) {
  const int k = sys.n() + sys.m();
  return {sys.a_nom(), sys.b_nom(), sys.q(), sys.r(), MatrixXd::Identity(k, k),
          sys.sigma()};
}

LinearSystem LayerParams::system() const { return {a, b, q, r, sigma}; }

UncertaintyEllipsoid LayerParams::ellipsoid() const { return {d, a, b}; }

MatrixXd NominalEncoding::p(const VectorXd& x) const {
  return sdp::smat(x.segment(p_offset(), svec_dim(n)));
}

MatrixXd RobustEncoding::xi(const VectorXd& x) const {
  return sdp::smat(x.segment(xi_offset(), svec_dim(n + m)));
}
MatrixXd RobustEncoding::w(const VectorXd& x) const {
  return xi(x).topLeftCorner(n, n);
}
MatrixXd RobustEncoding::z(const VectorXd& x) const {
  return xi(x).topRightCorner(n, m);
}
double RobustEncoding::lambda(const VectorXd& x) const { return x(lambda_offset()); }

NominalEncoding build_nominal_lmi(const LinearSystem& sys, bool with_jacobian) {
  NominalEncoding enc;
  enc.n = sys.n();
  enc.m = sys.m();
  const int n = enc.n, m = enc.m;
  const LayerParams lp = LayerParams::from(sys);
  const int var_dim = svec_dim(n) + n * m + n * n;
  const int n_params = lp.layout().size();
  if (with_jacobian) {
    const auto p = seeded_params(lp);
    enc.problem = compile<AutoDiffXd>(var_dim, n_params, [&](const VectorXd& x) {
      return nominal_eval(p, n, m, x);
    });
  } else {
    const auto p = plain_params(lp);
    enc.problem = compile<double>(var_dim, n_params, [&](const VectorXd& x) {
      return nominal_eval(p, n, m, x);
    });
  }
  return enc;
}

RobustEncoding build_robust_sdp(const LinearSystem& sys, const UncertaintyEllipsoid& unc,
                                const RobustOptions& opts) {
  if (!(opts.epsilon >= 0.0)) throw InputError("epsilon must be >= 0");
  const LayerParams lp = LayerParams::from(sys, unc);
  RobustEncoding enc;
  enc.n = sys.n();
  enc.m = sys.m();
  enc.options = opts;
  const int n = enc.n, m = enc.m;
  const int var_dim = svec_dim(n + m) + 1 + (opts.use_aux ? (n + m) * n : 0);
  const int n_params = lp.layout().size();
  if (opts.with_jacobian) {
    const auto p = seeded_params(lp);
    enc.problem = compile<AutoDiffXd>(var_dim, n_params, [&](const VectorXd& x) {
      return robust_eval(p, n, m, opts, x);
    });
  } else {
    const auto p = plain_params(lp);
    enc.problem = compile<double>(var_dim, n_params, [&](const VectorXd& x) {
      return robust_eval(p, n, m, opts, x);
    });
  }
  enc.problem.nonneg_vars = {enc.lambda_offset()};
  return enc;
}

sdp::SdpSolution solve_layer(const sdp::SdpProblem& prob, const sdp::SolveOptions& opts) {
  sdp::SdpSolution sol = sdp::solve(prob, opts);
  if (!sol.optimal()) {
    std::ostringstream msg;
    msg << "SDP solve ended with status " << sdp::to_string(sol.status)
        << " after " << sol.iterations << " iterations";
    throw SolverError(msg.str(), std::max(sol.primal_residual, sol.dual_residual));
  }
  return sol;
}

GainPolicy gain_from_xi(const MatrixXd& xi, int n, const Model& nominal) {
  const MatrixXd w = sym(xi.topLeftCorner(n, n));
  const MatrixXd z = xi.topRightCorner(n, xi.cols() - n);
  const double lo = min_eigenvalue(w);
  if (!(lo > 1e-9)) {
    std::ostringstream msg;
    msg << "cannot recover K = Z'W^{-1}: smallest eigenvalue of W is " << lo;
    throw NumericalError(msg.str());
  }
  MatrixXd k = w.llt().solve(z).transpose();
  return GainPolicy::for_model(std::move(k), nominal);
}

GainPolicy recover_gain(const RobustEncoding& enc, const sdp::SdpSolution& sol,
                        const Model& nominal) {
  return gain_from_xi(enc.xi(sol.primal), enc.n, nominal);
}

AreSolution recover_p(const NominalEncoding& enc, const sdp::SdpSolution& sol,
                      const LinearSystem& sys) {
  if (!sol.optimal())
    throw SolverError("nominal LMI was not solved to optimality (status " +
                          sdp::to_string(sol.status) + ")",
                      std::max(sol.primal_residual, sol.dual_residual));
  AreSolution out;
  out.p = sym(enc.p(sol.primal));
  out.k = lqr_gain(out.p, sys.a_nom(), sys.b_nom(), sys.r()).k;
  out.residual = are_defect(out.p, sys.a_nom(), sys.b_nom(), sys.q(), sys.r()).norm();
  out.iterations = sol.iterations;
  return out;
}

double worst_case_cost(const RobustEncoding& enc, const sdp::SdpSolution& sol,
                       const LinearSystem& sys) {
  const MatrixXd xi = enc.xi(sol.primal);
  const int n = enc.n;
  return (sys.q() * xi.topLeftCorner(n, n)).trace() +
         (sys.r() * xi.bottomRightCorner(enc.m, enc.m)).trace();
}

}  // namespace rlqr
