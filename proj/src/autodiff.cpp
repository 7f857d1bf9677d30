#include "rlqr/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

#include "rlqr/errors.hpp"

namespace rlqr {

namespace {

// Which entries of the flat layout belong to a symmetric block.
bool symmetric_block(const ParamLayout& lay, int j, int* rows, int* base) {
  if (j >= lay.q_offset() && j < lay.r_offset()) {
    *rows = lay.n;
    *base = lay.q_offset();
  } else if (j >= lay.r_offset() && j < lay.d_offset()) {
    *rows = lay.m;
    *base = lay.r_offset();
  } else if (j >= lay.d_offset() && j < lay.sigma_offset()) {
    *rows = lay.n + lay.m;
    *base = lay.d_offset();
  } else {
    return false;
  }
  return true;
}

void check_loss_shape(const MatrixXd& dl_dk, int n, int m) {
  if (dl_dk.rows() != m || dl_dk.cols() != n)
    throw InputError("dl_dk must be m x n");
}

// Runs fn(j) for every j in [0, count) on up to `threads` workers.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  std::atomic<int> next{0};
  auto work = [&] {
    for (int j = next++; j < count; j = next++) fn(j);
  };
  const int workers = std::clamp(threads, 1, std::max(count, 1));
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
}

}  // namespace

VectorXd ParamMask::expand(const ParamLayout& lay) const {
  VectorXd e = VectorXd::Zero(lay.size());
  auto fill = [&](bool on, int from, int to) {
    if (on) e.segment(from, to - from).setOnes();
  };
  fill(a, lay.a_offset(), lay.b_offset());
  fill(b, lay.b_offset(), lay.q_offset());
  fill(q, lay.q_offset(), lay.r_offset());
  fill(r, lay.r_offset(), lay.d_offset());
  fill(d, lay.d_offset(), lay.sigma_offset());
  fill(sigma, lay.sigma_offset(), lay.size());
  return e;
}

std::string to_string(GradPath path) {
  return path == GradPath::implicit ? "implicit" : "finite_diff";
}

ParamGradient ParamGradient::zeros(int n, int m, const ParamMask& mask) {
  ParamGradient g;
  g.d_a_nom = MatrixXd::Zero(n, n);
  g.d_b_nom = MatrixXd::Zero(n, m);
  g.d_q = MatrixXd::Zero(n, n);
  g.d_r = MatrixXd::Zero(m, m);
  g.d_d = MatrixXd::Zero(n + m, n + m);
  g.mask = mask;
  return g;
}

ParamLayout ParamGradient::layout() const {
  return {static_cast<int>(d_a_nom.rows()), static_cast<int>(d_b_nom.cols())};
}

ParamGradient ParamGradient::unflatten(const VectorXd& g, const ParamLayout& lay,
                                       const ParamMask& mask) {
  const LayerParams p = LayerParams::unflatten(g, lay);
  ParamGradient out;
  out.d_a_nom = p.a;
  out.d_b_nom = p.b;
  out.d_q = p.q;
  out.d_r = p.r;
  out.d_d = p.d;
  out.d_sigma = p.sigma;
  out.mask = mask;
  out.apply_mask();
  return out;
}

VectorXd ParamGradient::flatten() const {
  return LayerParams{d_a_nom, d_b_nom, d_q, d_r, d_d, d_sigma}.flatten();
}

void ParamGradient::apply_mask() {
  if (!mask.a) d_a_nom.setZero();
  if (!mask.b) d_b_nom.setZero();
  if (!mask.q) d_q.setZero();
  if (!mask.r) d_r.setZero();
  if (!mask.d) d_d.setZero();
  if (!mask.sigma) d_sigma = 0.0;
}

GainGradient grad_through_gain(const MatrixXd& dl_dk, const MatrixXd& w, const MatrixXd& z) {
  const int n = static_cast<int>(w.rows());
  if (w.cols() != n || z.rows() != n) throw InputError("W must be n x n and Z n x m");
  check_loss_shape(dl_dk, n, static_cast<int>(z.cols()));
  const double lo = min_eigenvalue(sym(w));
  if (!(lo > 1e-9)) {
    std::ostringstream msg;
    msg << "W is near-singular (smallest eigenvalue " << lo << ")";
    throw NumericalError(msg.str());
  }
  const Eigen::LLT<MatrixXd> llt(sym(w));
  GainGradient g;
  // dK = dZ' W^{-1} - Z' W^{-1} dW W^{-1}
  g.d_z = llt.solve(dl_dk.transpose());
  g.d_w = -sym(g.d_z * llt.solve(z).transpose());
  return g;
}

GainGradient grad_through_gain(const MatrixXd& dl_dk, const RobustEncoding& enc,
                               const sdp::SdpSolution& sol) {
  return grad_through_gain(dl_dk, enc.w(sol.primal), enc.z(sol.primal));
}

ParamGradient fd_oracle(const ParamLoss& loss, const LayerParams& theta,
                        const ParamMask& mask, double rel_step, double min_step,
                        int threads) {
  const ParamLayout lay = theta.layout();
  const VectorXd t0 = theta.flatten();
  const VectorXd on = mask.expand(lay);
  VectorXd grad = VectorXd::Zero(lay.size());
  std::vector<std::string> skipped(lay.size());

  auto eval = [&](const VectorXd& t) -> std::optional<double> {
    try {
      return loss(LayerParams::unflatten(t, lay));
    } catch (const InputError&) {
    } catch (const SolverError&) {
    } catch (const NumericalError&) {
    }
    return std::nullopt;
  };

  parallel_for(lay.size(), threads, [&](int j) {
    if (on(j) == 0.0) return;
    int rows = 0, base = 0;
    const bool symm = symmetric_block(lay, j, &rows, &base);
    int mirror = j;
    if (symm) {
      const int i = (j - base) % rows, c = (j - base) / rows;
      if (i < c) return;  // filled from the lower triangle
      mirror = base + i * rows + c;
    }
    const double h = std::max(rel_step * std::abs(t0(j)), min_step);
    VectorXd tp = t0, tm = t0;
    tp(j) += h;
    tm(j) -= h;
    if (mirror != j) {
      tp(mirror) += h;
      tm(mirror) -= h;
    }
    const auto lp = eval(tp);
    const auto lm = eval(tm);
    if (!lp || !lm) {
      skipped[j] = "coordinate " + std::to_string(j) + " skipped: perturbed loss not evaluable";
      return;
    }
    double g = (*lp - *lm) / (2.0 * h);
    // A joint (i,j)/(j,i) move measures the sum of both partials.
    if (mirror != j) g *= 0.5;
    grad(j) = g;
    grad(mirror) = g;
  });

  ParamGradient out = ParamGradient::unflatten(grad, lay, mask);
  out.path = GradPath::finite_diff;
  for (auto& s : skipped)
    if (!s.empty()) out.warnings.push_back(std::move(s));
  return out;
}

namespace {

ParamGradient robust_fd(const LayerLossGrad& loss, const LinearSystem& sys,
                        const UncertaintyEllipsoid& unc, const GradOptions& opts) {
  const int n = sys.n();
  const bool uses_k = loss.dl_dk.norm() > 0.0;
  auto fn = [&](const LayerParams& p) -> std::optional<double> {
    const LinearSystem s = p.system();
    const auto enc = build_robust_sdp(s, p.ellipsoid(),
                                      {opts.robust.epsilon, opts.robust.use_aux, false});
    const auto sol = solve_layer(enc.problem, opts.solve);
    double l = loss.dl_dcost * worst_case_cost(enc, sol, s);
    if (uses_k) {
      const MatrixXd xi = enc.xi(sol.primal);
      l += (loss.dl_dk.array() * gain_from_xi(xi, n, s.nominal_model()).k.array()).sum();
    }
    return l;
  };
  return fd_oracle(fn, LayerParams::from(sys, unc), opts.mask, opts.fd_rel_step,
                   opts.fd_min_step, opts.threads);
}

ParamGradient nominal_fd(const MatrixXd& dl_dk, const LinearSystem& sys,
                         const GradOptions& opts) {
  auto fn = [&](const LayerParams& p) -> std::optional<double> {
    const LinearSystem s = p.system();
    const auto enc = build_nominal_lmi(s, false);
    const auto are = recover_p(enc, solve_layer(enc.problem, opts.solve), s);
    return (dl_dk.array() * are.k.array()).sum();
  };
  ParamMask mask = opts.mask;
  mask.d = mask.sigma = false;
  return fd_oracle(fn, LayerParams::from(sys), mask, opts.fd_rel_step, opts.fd_min_step,
                   opts.threads);
}

// Runs the implicit path, falling back to finite differences when the KKT
// system is degenerate and fallback is allowed.
template <typename Implicit, typename Fallback>
ParamGradient with_fallback(const GradOptions& opts, Implicit&& implicit, Fallback&& fallback) {
  std::string reason;
  if (!opts.force_finite_diff) {
    try {
      return implicit();
    } catch (const DegeneracyError& e) {
      if (!opts.allow_fallback) throw;
      reason = e.what();
    }
  } else {
    reason = "finite differences requested";
  }
  try {
    ParamGradient g = fallback();
    g.warnings.insert(g.warnings.begin(), "finite-difference fallback: " + reason);
    return g;
  } catch (const std::exception& e) {
    throw GradientError(std::string("implicit and finite-difference gradients both failed: ") +
                        reason + "; " + e.what());
  }
}

}  // namespace

ParamGradient grad_robust_layer(const LayerLossGrad& loss, const LinearSystem& sys,
                                const UncertaintyEllipsoid& unc, const RobustEncoding& enc,
                                const sdp::SdpSolution& sol, const GradOptions& opts) {
  const int n = sys.n(), m = sys.m();
  check_loss_shape(loss.dl_dk, n, m);
  const ParamLayout lay{n, m};
  if (loss.dl_dk.norm() == 0.0 && loss.dl_dcost == 0.0)
    return ParamGradient::zeros(n, m, opts.mask);
  if (static_cast<int>(enc.problem.param_jacobian.size()) != lay.size() && !opts.force_finite_diff)
    throw InputError("robust encoding was built without its parameter Jacobian");

  return with_fallback(
      opts,
      [&] {
        const sdp::KktLinearization lin(enc.problem, sol, opts.max_condition);
        VectorXd dl_dx = loss.dl_dcost * enc.problem.c;
        if (loss.dl_dk.norm() > 0.0) {
          const GainGradient gg = grad_through_gain(loss.dl_dk, enc, sol);
          MatrixXd gamma = MatrixXd::Zero(n + m, n + m);
          gamma.topLeftCorner(n, n) = gg.d_w;
          gamma.topRightCorner(n, m) = 0.5 * gg.d_z;
          gamma.bottomLeftCorner(m, n) = 0.5 * gg.d_z.transpose();
          dl_dx.segment(enc.xi_offset(), sdp::svec_dim(n + m)) += sdp::svec(gamma);
        }
        VectorXd g = lin.adjoint(dl_dx);
        // The objective coefficients depend on (Q, R) directly.
        if (loss.dl_dcost != 0.0)
          for (int j = 0; j < lay.size(); ++j)
            g(j) += loss.dl_dcost * enc.problem.param_jacobian[j].c.dot(sol.primal);
        ParamGradient out = ParamGradient::unflatten(g, lay, opts.mask);
        out.path = GradPath::implicit;
        out.condition = lin.condition_estimate();
        return out;
      },
      [&] { return robust_fd(loss, sys, unc, opts); });
}

ParamGradient grad_nominal_layer(const MatrixXd& dl_dk, const LinearSystem& sys,
                                 const NominalEncoding& enc, const sdp::SdpSolution& sol,
                                 const GradOptions& opts) {
  const int n = sys.n(), m = sys.m();
  check_loss_shape(dl_dk, n, m);
  const ParamLayout lay{n, m};
  ParamMask mask = opts.mask;
  mask.d = mask.sigma = false;
  if (dl_dk.norm() == 0.0) return ParamGradient::zeros(n, m, mask);
  if (static_cast<int>(enc.problem.param_jacobian.size()) != lay.size() && !opts.force_finite_diff)
    throw InputError("nominal encoding was built without its parameter Jacobian");

  return with_fallback(
      opts,
      [&] {
        const sdp::KktLinearization lin(enc.problem, sol, opts.max_condition);
        const MatrixXd& a = sys.a_nom();
        const MatrixXd& b = sys.b_nom();
        const MatrixXd p = sym(enc.p(sol.primal));
        // K = -M^{-1} B'PA with M = B'PB + R; H = -M^{-1} dl/dK, J = H K'.
        const MatrixXd mm = b.transpose() * p * b + sys.r();
        const Eigen::LDLT<MatrixXd> ldlt(mm);
        const MatrixXd k = -ldlt.solve(b.transpose() * p * a);
        const MatrixXd h = -ldlt.solve(dl_dk);
        const MatrixXd jj = h * k.transpose();
        const MatrixXd dl_dp = sym(b * h * a.transpose() + b * jj * b.transpose());
        VectorXd dl_dx = VectorXd::Zero(enc.problem.var_dim);
        dl_dx.segment(enc.p_offset(), sdp::svec_dim(n)) = sdp::svec(dl_dp);
        ParamGradient out = ParamGradient::unflatten(lin.adjoint(dl_dx), lay, mask);
        if (mask.a) out.d_a_nom += p * b * h;
        if (mask.b) out.d_b_nom += p * a * h.transpose() + p * b * (jj + jj.transpose());
        if (mask.r) out.d_r += sym(jj);
        out.path = GradPath::implicit;
        out.condition = lin.condition_estimate();
        return out;
      },
      [&] { return nominal_fd(dl_dk, sys, opts); });
}

}  // namespace rlqr
