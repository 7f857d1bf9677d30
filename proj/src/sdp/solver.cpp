#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>

#include "conic.hpp"
#include "rlqr/errors.hpp"

namespace rlqr::sdp {

namespace {

using detail::Cone;
using detail::ConicForm;

// Nesterov-Todd scaling W with W z = W^{-T} s = lambda.
struct Scaling {
  VectorXd d;                   // orthant: sqrt(s / z)
  std::vector<MatrixXd> r;      // PSD: W(Z) = R'ZR
  std::vector<MatrixXd> r_inv;
  VectorXd lambda_l;            // orthant part of lambda
  std::vector<VectorXd> lambda_eig;  // lambda is diagonal on PSD blocks
};

bool compute_scaling(const Cone& cone, const VectorXd& s, const VectorXd& z,
                     Scaling* w) {
  const auto sl = s.head(cone.l).array();
  const auto zl = z.head(cone.l).array();
  w->d = (sl / zl).sqrt().matrix();
  w->lambda_l = (sl * zl).sqrt().matrix();
  w->r.clear();
  w->r_inv.clear();
  w->lambda_eig.clear();
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    Eigen::LLT<MatrixXd> ls(smat(s.segment(off, d)));
    Eigen::LLT<MatrixXd> lz(smat(z.segment(off, d)));
    if (ls.info() != Eigen::Success || lz.info() != Eigen::Success) return false;
    const MatrixXd l_s = ls.matrixL();
    const MatrixXd l_z = lz.matrixL();
    Eigen::JacobiSVD<MatrixXd> svd(l_z.transpose() * l_s,
                                   Eigen::ComputeFullU | Eigen::ComputeFullV);
    const VectorXd lam = svd.singularValues();
    if (lam.minCoeff() <= 0.0) return false;
    const VectorXd isq = lam.cwiseSqrt().cwiseInverse();
    MatrixXd r = l_s * svd.matrixV() * isq.asDiagonal();
    // R^{-1} = Lambda^{1/2} V' L_s^{-1}
    MatrixXd r_inv = lam.cwiseSqrt().asDiagonal() * svd.matrixV().transpose() *
                     l_s.triangularView<Eigen::Lower>().solve(
                         MatrixXd::Identity(l_s.rows(), l_s.cols()));
    w->r.push_back(std::move(r));
    w->r_inv.push_back(std::move(r_inv));
    w->lambda_eig.push_back(lam);
  }
  return true;
}

VectorXd lambda_vec(const Cone& cone, const Scaling& w) {
  VectorXd out(cone.dim);
  out.head(cone.l) = w.lambda_l;
  for (std::size_t k = 0; k < cone.sizes.size(); ++k)
    out.segment(cone.offsets[k], cone.block_dim(static_cast<int>(k))) =
        svec(MatrixXd(w.lambda_eig[k].asDiagonal()));
  return out;
}

// W(v)
VectorXd apply_w(const Cone& cone, const Scaling& w, const VectorXd& v) {
  VectorXd out(cone.dim);
  out.head(cone.l) = v.head(cone.l).cwiseProduct(w.d);
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd& r = w.r[k];
    out.segment(off, d) = svec(r.transpose() * smat(v.segment(off, d)) * r);
  }
  return out;
}

// W^{-T}(v)
VectorXd apply_wit(const Cone& cone, const Scaling& w, const VectorXd& v) {
  VectorXd out(cone.dim);
  out.head(cone.l) = v.head(cone.l).cwiseQuotient(w.d);
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd& ri = w.r_inv[k];
    out.segment(off, d) = svec(ri * smat(v.segment(off, d)) * ri.transpose());
  }
  return out;
}

// W^{-1}(v)
VectorXd apply_wi(const Cone& cone, const Scaling& w, const VectorXd& v) {
  VectorXd out(cone.dim);
  out.head(cone.l) = v.head(cone.l).cwiseQuotient(w.d);
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd& ri = w.r_inv[k];
    out.segment(off, d) = svec(ri.transpose() * smat(v.segment(off, d)) * ri);
  }
  return out;
}

// W^{-T} G, column by column.
MatrixXd scaled_g(const Cone& cone, const Scaling& w, const MatrixXd& g) {
  MatrixXd out(g.rows(), g.cols());
  for (int j = 0; j < g.cols(); ++j) out.col(j) = apply_wit(cone, w, g.col(j));
  return out;
}

// Solves lambda o u = v for u.
VectorXd lambda_div(const Cone& cone, const Scaling& w, const VectorXd& v) {
  VectorXd out(cone.dim);
  out.head(cone.l) = v.head(cone.l).cwiseQuotient(w.lambda_l);
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const VectorXd& lam = w.lambda_eig[k];
    MatrixXd u = smat(v.segment(off, d));
    for (int j = 0; j < u.cols(); ++j)
      for (int i = 0; i < u.rows(); ++i) u(i, j) *= 2.0 / (lam(i) + lam(j));
    out.segment(off, d) = svec(u);
  }
  return out;
}

// Dense solver for [0 A' G'; A 0 0; G 0 -I] with iterative refinement.
class KktSolver {
 public:
  KktSolver(const ConicForm& f, const MatrixXd& g)
      : nx_(static_cast<int>(f.c.size())),
        ny_(static_cast<int>(f.b.size())),
        nz_(f.cone.dim) {
    const int n = nx_ + ny_ + nz_;
    k_ = MatrixXd::Zero(n, n);
    k_.block(0, nx_, nx_, ny_) = f.a.transpose();
    k_.block(0, nx_ + ny_, nx_, nz_) = g.transpose();
    k_.block(nx_, 0, ny_, nx_) = f.a;
    k_.block(nx_ + ny_, 0, nz_, nx_) = g;
    k_.block(nx_ + ny_, nx_ + ny_, nz_, nz_) = -MatrixXd::Identity(nz_, nz_);
    // Symmetric diagonal equilibration.
    scale_ = VectorXd::Ones(n);
    for (int pass = 0; pass < 8; ++pass) {
      VectorXd rs(n);
      for (int i = 0; i < n; ++i) {
        const double mx = k_.row(i).cwiseAbs().maxCoeff();
        rs(i) = mx > 0.0 ? 1.0 / std::sqrt(mx) : 1.0;
      }
      k_ = rs.asDiagonal() * k_ * rs.asDiagonal();
      scale_ = scale_.cwiseProduct(rs);
    }
    lu_.compute(k_);
  }

  VectorXd solve(const VectorXd& rhs) const {
    const VectorXd srhs = scale_.cwiseProduct(rhs);
    VectorXd sol = lu_.solve(srhs);
    for (int it = 0; it < 3; ++it) {
      const VectorXd res = srhs - k_ * sol;
      sol += lu_.solve(res);
    }
    return scale_.cwiseProduct(sol);
  }

  bool ok() const {
    return std::isfinite(lu_.rcond()) && lu_.rcond() > 1e-300;
  }

 private:
  int nx_, ny_, nz_;
  MatrixXd k_;
  VectorXd scale_;
  Eigen::PartialPivLU<MatrixXd> lu_;
};

struct Direction {
  VectorXd x, y, z, s;
};

Direction newton(const ConicForm& f, const Scaling& w, const KktSolver& kkt,
                 const VectorXd& rx, const VectorXd& ry, const VectorXd& rz,
                 const VectorXd& rs) {
  const int nx = static_cast<int>(f.c.size());
  const int ny = static_cast<int>(f.b.size());
  const int nz = f.cone.dim;
  // In scaled variables dz~ = W dz, ds~ = W^{-T} ds the step solves
  //   [0 A' G~'; A 0 0; G~ 0 -I] [dx; dy; dz~] = [rx; ry; W^{-T} rz - ls]
  // with G~ = W^{-T} G, ls = lambda \ rs, and ds~ = ls - dz~.
  const VectorXd ls = lambda_div(f.cone, w, rs);
  VectorXd rhs(nx + ny + nz);
  rhs << rx, ry, apply_wit(f.cone, w, rz) - ls;
  const VectorXd sol = kkt.solve(rhs);
  Direction d;
  d.x = sol.head(nx);
  d.y = sol.segment(nx, ny);
  const VectorXd dz_t = sol.tail(nz);
  d.z = apply_wi(f.cone, w, dz_t);
  // Equivalent to ds = W'(ls - dz~) in exact arithmetic, but keeps the linearized
  // primal equation exact when W is badly conditioned.
  d.s = rz - f.g * d.x;
  return d;
}

double step_length(const Cone& cone, const VectorXd& s, const VectorXd& ds,
                   const VectorXd& z, const VectorXd& dz) {
  return std::min(detail::max_step(cone, s, ds), detail::max_step(cone, z, dz));
}

void finish(const SdpProblem& prob, const ConicForm& f, const VectorXd& x,
            const VectorXd& y, const VectorXd& z, const VectorXd& s,
            SdpSolution* sol) {
  sol->primal = x;
  sol->eq_dual = y;
  sol->slack = s;
  sol->cone_dual = z;
  sol->nonneg_dual = z.head(f.cone.l);
  sol->psd_dual.clear();
  for (std::size_t k = 0; k < prob.psd_blocks.size(); ++k)
    sol->psd_dual.push_back(smat(z.segment(
        f.cone.offsets[k], f.cone.block_dim(static_cast<int>(k)))));
}

// Newton refinement of a converged iterate on the exact KKT equations
// (complementarity s o z = 0 instead of the central path). Newton runs while
// the merit halves; the best iterate with s, z in the cone up to rounding is
// kept.
void polish(const ConicForm& f, double b_scale, double h_scale, double c_scale,
            VectorXd* x, VectorXd* y, VectorXd* z, VectorXd* s) {
  const int nx = static_cast<int>(x->size());
  const int ny = static_cast<int>(y->size());
  const int nz = static_cast<int>(z->size());
  const int n = nx + ny + 2 * nz;
  auto merit = [&](const VectorXd& xx, const VectorXd& yy, const VectorXd& zz,
                   const VectorXd& ss, VectorXd* r) {
    r->resize(n);
    r->head(nx) = f.g.transpose() * zz + f.c;
    if (ny > 0) r->head(nx) += f.a.transpose() * yy;
    r->segment(nx, nz) = f.g * xx + ss - f.h;
    if (ny > 0) r->segment(nx + nz, ny) = f.a * xx - f.b;
    r->tail(nz) = detail::jordan(f.cone, ss, zz);
    const double scale = std::max(1.0, std::abs(f.c.dot(xx)));
    return std::max({r->head(nx).norm() / c_scale,
                     r->segment(nx, nz).norm() / h_scale,
                     ny > 0 ? r->segment(nx + nz, ny).norm() / b_scale : 0.0,
                     r->tail(nz).norm() / scale});
  };
  auto in_cone = [&](const VectorXd& v) {
    return detail::min_eig(f.cone, v) >= -1e-12 * std::max(1.0, v.norm());
  };
  VectorXd r;
  double m0 = merit(*x, *y, *z, *s, &r);
  VectorXd cx = *x, cy = *y, cz = *z, cs_ = *s;
  for (int it = 0; it < 5; ++it) {
    MatrixXd j = MatrixXd::Zero(n, n);
    if (ny > 0) j.block(0, nx, nx, ny) = f.a.transpose();
    j.block(0, nx + ny, nx, nz) = f.g.transpose();
    j.block(nx, 0, nz, nx) = f.g;
    j.block(nx, nx + ny + nz, nz, nz).setIdentity();
    if (ny > 0) j.block(nx + nz, 0, ny, nx) = f.a;
    j.block(nx + nz + ny, nx + ny, nz, nz) = detail::jordan_matrix(f.cone, cs_);
    j.block(nx + nz + ny, nx + ny + nz, nz, nz) = detail::jordan_matrix(f.cone, cz);
    VectorXd rs = VectorXd::Ones(n), cs = VectorXd::Ones(n);
    for (int pass = 0; pass < 5; ++pass) {
      for (int i = 0; i < n; ++i) {
        const double mx = j.row(i).cwiseAbs().maxCoeff();
        const double fi = mx > 0.0 ? 1.0 / std::sqrt(mx) : 1.0;
        j.row(i) *= fi;
        rs(i) *= fi;
      }
      for (int i = 0; i < n; ++i) {
        const double mx = j.col(i).cwiseAbs().maxCoeff();
        const double fi = mx > 0.0 ? 1.0 / std::sqrt(mx) : 1.0;
        j.col(i) *= fi;
        cs(i) *= fi;
      }
    }
    const Eigen::PartialPivLU<MatrixXd> lu(j);
    const VectorXd d = cs.cwiseProduct(lu.solve(-rs.cwiseProduct(r)));
    if (!d.allFinite()) return;
    const VectorXd xn = cx + d.head(nx);
    const VectorXd yn = cy + d.segment(nx, ny);
    const VectorXd zn = cz + d.segment(nx + ny, nz);
    const VectorXd sn = cs_ + d.tail(nz);
    VectorXd rn;
    const double m1 = merit(xn, yn, zn, sn, &rn);
    if (!(m1 < 0.5 * m0)) return;
    cx = xn;
    cy = yn;
    cz = zn;
    cs_ = sn;
    r = rn;
    m0 = m1;
    if (in_cone(sn) && in_cone(zn)) {
      *x = xn;
      *y = yn;
      *z = zn;
      *s = sn;
    }
  }
}

}  // namespace

SdpSolution solve(const SdpProblem& prob, const SolveOptions& opts) {
  if (!(opts.tol > 0.0) || opts.max_iter < 1)
    throw InputError("solve: tol must be > 0 and max_iter >= 1");
  const ConicForm f = detail::to_conic(prob);
  const Cone& cone = f.cone;
  const int nx = prob.var_dim;
  const int ny = static_cast<int>(f.b.size());
  const int nz = cone.dim;
  const double deg = cone.degree();
  const VectorXd e = detail::identity(cone);

  const double c_scale = std::max(1.0, f.c.norm());
  const double b_scale = std::max(1.0, f.b.size() ? f.b.norm() : 0.0);
  const double h_scale = std::max(1.0, f.h.norm());

  SdpSolution sol;
  VectorXd x, y, z, s;

  // Least-squares starting point.
  {
    KktSolver kkt(f, f.g);
    VectorXd rhs(nx + ny + nz);
    rhs << VectorXd::Zero(nx), f.b, f.h;
    VectorXd p = kkt.solve(rhs);
    x = p.head(nx);
    s = -p.tail(nz);
    rhs << -f.c, VectorXd::Zero(ny), VectorXd::Zero(nz);
    VectorXd d = kkt.solve(rhs);
    y = d.segment(nx, ny);
    z = d.tail(nz);
    if (!x.allFinite() || !z.allFinite()) {
      // [A; G] lacks full column rank; start from the origin instead.
      x = VectorXd::Zero(nx);
      y = VectorXd::Zero(ny);
      s = f.h;
      z = e;
    }
    const double sp = -detail::min_eig(cone, s);
    if (sp >= -1e-8 * std::max(1.0, s.norm())) s += (1.0 + std::max(sp, 0.0)) * e;
    const double zp = -detail::min_eig(cone, z);
    if (zp >= -1e-8 * std::max(1.0, z.norm())) z += (1.0 + std::max(zp, 0.0)) * e;
  }

  int stalled = 0;
  for (int it = 0; it <= opts.max_iter; ++it) {
    const VectorXd rd = f.g.transpose() * z + f.a.transpose() * y + f.c;
    const VectorXd re = f.a * x - f.b;
    const VectorXd rp = f.g * x + s - f.h;
    const double pcost = f.c.dot(x);
    const double dcost = -f.h.dot(z) - f.b.dot(y);
    const double gap = s.dot(z);
    const double pres = std::max(re.size() ? re.norm() / b_scale : 0.0,
                                 rp.norm() / h_scale);
    const double dres = rd.norm() / c_scale;

    sol.iterations = it;
    sol.primal_objective = pcost;
    sol.dual_objective = dcost;
    sol.primal_residual = pres;
    sol.dual_residual = dres;
    sol.duality_gap = gap / std::max(1.0, std::abs(pcost));
    finish(prob, f, x, y, z, s, &sol);

    if (pres <= opts.tol && dres <= opts.tol && sol.duality_gap <= opts.tol) {
      sol.status = SdpStatus::optimal;
      if (opts.polish) {
        polish(f, b_scale, h_scale, c_scale, &x, &y, &z, &s);
        const VectorXd re2 = f.a * x - f.b;
        sol.primal_objective = f.c.dot(x);
        sol.dual_objective = -f.h.dot(z) - f.b.dot(y);
        sol.primal_residual = std::max(re2.size() ? re2.norm() / b_scale : 0.0,
                                       (f.g * x + s - f.h).norm() / h_scale);
        sol.dual_residual =
            (f.g.transpose() * z + f.a.transpose() * y + f.c).norm() / c_scale;
        sol.duality_gap =
            std::abs(s.dot(z)) / std::max(1.0, std::abs(sol.primal_objective));
        finish(prob, f, x, y, z, s, &sol);
      }
      return sol;
    }

    // Infeasibility certificates on the normalized iterates.
    const double hz_by = f.h.dot(z) + f.b.dot(y);
    if (hz_by < 0.0) {
      const double pinf =
          (f.g.transpose() * z + f.a.transpose() * y).norm() / (-hz_by) *
          std::max(1.0, f.h.norm());
      if (pinf <= opts.tol) {
        sol.status = SdpStatus::infeasible;
        return sol;
      }
    }
    if (pcost < 0.0) {
      const double dinf =
          std::max(re.size() ? (f.a * x).norm() / b_scale : 0.0,
                   (f.g * x + s).norm() / h_scale) /
          (-pcost) * c_scale;
      if (dinf <= opts.tol) {
        sol.status = SdpStatus::unbounded;
        return sol;
      }
    }
    if (it == opts.max_iter) break;

    Scaling w;
    if (!compute_scaling(cone, s, z, &w)) break;
    const VectorXd lam = lambda_vec(cone, w);
    const double mu = gap / deg;

    KktSolver kkt(f, scaled_g(cone, w, f.g));
    if (!kkt.ok()) break;

    // Predictor.
    VectorXd rs = -detail::jordan(cone, lam, lam);
    Direction aff = newton(f, w, kkt, -rd, -re, -rp, rs);
    double alpha_a = std::min(1.0, step_length(cone, s, aff.s, z, aff.z));
    const double mu_aff =
        (s + alpha_a * aff.s).dot(z + alpha_a * aff.z) / deg;
    const double sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);

    // Corrector.
    const VectorXd ds_t = apply_wit(cone, w, aff.s);
    const VectorXd dz_t = apply_w(cone, w, aff.z);
    rs += -detail::jordan(cone, ds_t, dz_t) + sigma * mu * e;
    Direction dir = newton(f, w, kkt, -rd, -re, -rp, rs);
    if (!dir.x.allFinite() || !dir.z.allFinite() || !dir.s.allFinite()) break;
    const double alpha =
        std::min(1.0, 0.99 * step_length(cone, s, dir.s, z, dir.z));

    x += alpha * dir.x;
    y += alpha * dir.y;
    z += alpha * dir.z;
    s += alpha * dir.s;

    stalled = alpha < 1e-10 ? stalled + 1 : 0;
    if (stalled >= 5) break;
    if (x.norm() > 1e14 || z.norm() > 1e14) break;
  }

  // Not converged: classify from the final iterate.
  sol.status = SdpStatus::max_iter;
  const double hz_by = f.h.dot(z) + f.b.dot(y);
  const double pcost = f.c.dot(x);
  const double big = 1e8;
  if (z.norm() > big * std::max(1.0, x.norm()) && hz_by < 0.0)
    sol.status = SdpStatus::infeasible;
  else if (x.norm() > big && pcost < 0.0)
    sol.status = SdpStatus::unbounded;
  return sol;
}

std::vector<SdpSolution> solve_batch(const std::vector<SdpProblem>& probs,
                                     const SolveOptions& opts, int threads) {
  std::vector<SdpSolution> out(probs.size());
  if (probs.empty()) return out;
  const int workers =
      std::clamp(threads, 1, static_cast<int>(probs.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (std::size_t i = next++; i < probs.size(); i = next++) {
      if (failed) return;
      try {
        out[i] = solve(probs[i], opts);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace rlqr::sdp
