#include <cmath>
#include <limits>

#include "conic.hpp"
#include "rlqr/errors.hpp"

namespace rlqr::sdp {

// Unknowns (dx, dy, dz, ds); J = [0 A' G' 0; G 0 0 I; A 0 0 0; 0 0 L_s L_z],
// where L_u is the matrix of v -> u o v. J is equilibrated as Dr J Dc.
struct KktLinearization::Impl {
  detail::ConicForm f;
  std::vector<detail::ConicDelta> deltas;
  VectorXd x, y, z;
  int nx = 0, ny = 0, nz = 0;
  MatrixXd jac;
  VectorXd row_scale, col_scale;
  Eigen::PartialPivLU<MatrixXd> lu;

  VectorXd rhs(const detail::ConicDelta& d) const {
    VectorXd r = VectorXd::Zero(nx + ny + 2 * nz);
    r.head(nx) = -(d.g.transpose() * z + d.c);
    if (ny > 0) r.head(nx) -= d.a.transpose() * y;
    r.segment(nx, nz) = -(d.g * x - d.h);
    if (ny > 0) r.segment(nx + nz, ny) = -(d.a * x - d.b);
    return r;
  }

  VectorXd solve(const VectorXd& r) const {
    const VectorXd sr = row_scale.cwiseProduct(r);
    VectorXd sol = lu.solve(sr);
    sol += lu.solve(sr - jac * sol);
    return col_scale.cwiseProduct(sol).head(nx);
  }

  // With PJ = LU, J' v = g gives v = P' L^{-T} U^{-T} g.
  VectorXd lu_solve_t(const VectorXd& g) const {
    VectorXd w = lu.matrixLU().triangularView<Eigen::Upper>().transpose().solve(g);
    w = lu.matrixLU().triangularView<Eigen::UnitLower>().transpose().solve(w);
    return lu.permutationP().transpose() * w;
  }

  VectorXd solve_transposed(const VectorXd& g) const {
    const VectorXd sg = col_scale.cwiseProduct(g);
    VectorXd sol = lu_solve_t(sg);
    sol += lu_solve_t(sg - jac.transpose() * sol);
    return row_scale.cwiseProduct(sol);
  }
};

KktLinearization::KktLinearization(const SdpProblem& prob,
                                   const SdpSolution& sol,
                                   double max_condition) {
  if (!sol.optimal())
    throw DegeneracyError("KKT linearization needs an optimal solution (status " +
                              to_string(sol.status) + "); use finite differences",
                          std::numeric_limits<double>::infinity());
  auto impl = std::make_shared<Impl>();
  impl->f = detail::to_conic(prob);
  const auto& f = impl->f;
  impl->nx = prob.var_dim;
  impl->ny = static_cast<int>(f.b.size());
  impl->nz = f.cone.dim;
  if (sol.primal.size() != impl->nx || sol.slack.size() != impl->nz ||
      sol.cone_dual.size() != impl->nz || sol.eq_dual.size() != impl->ny)
    throw InputError("solution does not match the problem");
  impl->x = sol.primal;
  impl->y = sol.eq_dual;
  impl->z = sol.cone_dual;
  for (const auto& d : prob.param_jacobian)
    impl->deltas.push_back(detail::to_conic(prob, d));

  const int nx = impl->nx, ny = impl->ny, nz = impl->nz;
  const int n = nx + ny + 2 * nz;
  // Row order: stationarity (nx), primal cone rows (nz), equalities (ny),
  // complementarity (nz). Column order: dx, dy, dz, ds.
  MatrixXd j = MatrixXd::Zero(n, n);
  j.block(0, nx, nx, ny) = f.a.transpose();
  j.block(0, nx + ny, nx, nz) = f.g.transpose();
  j.block(nx, 0, nz, nx) = f.g;
  j.block(nx, nx + ny + nz, nz, nz).setIdentity();
  j.block(nx + nz, 0, ny, nx) = f.a;
  j.block(nx + nz + ny, nx + ny, nz, nz) = detail::jordan_matrix(f.cone, sol.slack);
  j.block(nx + nz + ny, nx + ny + nz, nz, nz) =
      detail::jordan_matrix(f.cone, sol.cone_dual);

  VectorXd rs = VectorXd::Ones(n), cs = VectorXd::Ones(n);
  for (int pass = 0; pass < 10; ++pass) {
    for (int i = 0; i < n; ++i) {
      const double mx = j.row(i).cwiseAbs().maxCoeff();
      const double f_i = mx > 0.0 ? 1.0 / std::sqrt(mx) : 1.0;
      j.row(i) *= f_i;
      rs(i) *= f_i;
    }
    for (int i = 0; i < n; ++i) {
      const double mx = j.col(i).cwiseAbs().maxCoeff();
      const double f_i = mx > 0.0 ? 1.0 / std::sqrt(mx) : 1.0;
      j.col(i) *= f_i;
      cs(i) *= f_i;
    }
  }
  impl->lu.compute(j);
  const double rc = impl->lu.rcond();
  condition_ = rc > 0.0 ? 1.0 / rc : std::numeric_limits<double>::infinity();
  if (!std::isfinite(condition_) || condition_ > max_condition)
    throw DegeneracyError(
        "KKT system is singular or ill-conditioned (condition estimate " +
            std::to_string(condition_) +
            "); strict complementarity likely fails, use finite differences",
        condition_);
  impl->jac = std::move(j);
  impl->row_scale = std::move(rs);
  impl->col_scale = std::move(cs);
  impl_ = std::move(impl);
}

VectorXd KktLinearization::forward(const VectorXd& dparam) const {
  const auto& d = impl_->deltas;
  if (dparam.size() != static_cast<Eigen::Index>(d.size()))
    throw InputError("dparam length must match param_jacobian");
  const int n = impl_->nx + impl_->ny + 2 * impl_->nz;
  VectorXd r = VectorXd::Zero(n);
  for (std::size_t k = 0; k < d.size(); ++k)
    if (dparam(k) != 0.0) r += dparam(k) * impl_->rhs(d[k]);
  return impl_->solve(r);
}

VectorXd KktLinearization::forward(const ProblemDelta& delta) const {
  const auto& f = impl_->f;
  if (delta.c.size() != impl_->nx || delta.eq_b.size() != impl_->ny ||
      delta.psd_blocks.size() != f.cone.sizes.size())
    throw InputError("ProblemDelta does not match the problem");
  // to_conic only needs the cone layout, which is stored in f.
  detail::ConicDelta cd;
  cd.c = delta.c;
  cd.a = delta.eq_a.rows() > 0 ? delta.eq_a : MatrixXd::Zero(impl_->ny, impl_->nx);
  cd.b = delta.eq_b;
  cd.g = MatrixXd::Zero(impl_->nz, impl_->nx);
  cd.h = VectorXd::Zero(impl_->nz);
  for (std::size_t k = 0; k < delta.psd_blocks.size(); ++k) {
    const int off = f.cone.offsets[k];
    const int dim = f.cone.block_dim(static_cast<int>(k));
    cd.g.middleRows(off, dim) = -delta.psd_blocks[k].lin;
    cd.h.segment(off, dim) = delta.psd_blocks[k].offset;
  }
  return impl_->solve(impl_->rhs(cd));
}

VectorXd KktLinearization::adjoint(const VectorXd& dl_dx) const {
  if (dl_dx.size() != impl_->nx) throw InputError("dl_dx length must be var_dim");
  const int n = impl_->nx + impl_->ny + 2 * impl_->nz;
  VectorXd g = VectorXd::Zero(n);
  g.head(impl_->nx) = dl_dx;
  const VectorXd v = impl_->solve_transposed(g);
  VectorXd out(impl_->deltas.size());
  for (std::size_t k = 0; k < impl_->deltas.size(); ++k)
    out(k) = v.dot(impl_->rhs(impl_->deltas[k]));
  return out;
}

VectorXd kkt_differentiate(const SdpProblem& prob, const SdpSolution& sol,
                           const VectorXd& dparam) {
  return KktLinearization(prob, sol).forward(dparam);
}

}  // namespace rlqr::sdp
