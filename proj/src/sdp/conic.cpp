#include "conic.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "rlqr/errors.hpp"

namespace rlqr::sdp {

namespace {
const double kSqrt2 = std::sqrt(2.0);
}

int svec_dim(int k) { return k * (k + 1) / 2; }

int svec_side(int dim) {
  const int k = static_cast<int>(std::lround((std::sqrt(8.0 * dim + 1) - 1) / 2));
  if (svec_dim(k) != dim) throw InputError("not a triangular svec length");
  return k;
}

int svec_index(int i, int j, int k) {
  if (i < j) std::swap(i, j);
  // Column j starts after columns 0..j-1 of lengths k, k-1, ...
  return j * k - j * (j - 1) / 2 + (i - j);
}

VectorXd svec(const MatrixXd& s) {
  const int k = static_cast<int>(s.rows());
  VectorXd v(svec_dim(k));
  int p = 0;
  for (int j = 0; j < k; ++j) {
    v(p++) = s(j, j);
    for (int i = j + 1; i < k; ++i) v(p++) = kSqrt2 * 0.5 * (s(i, j) + s(j, i));
  }
  return v;
}

MatrixXd smat(const VectorXd& v) {
  const int k = svec_side(static_cast<int>(v.size()));
  MatrixXd s(k, k);
  int p = 0;
  for (int j = 0; j < k; ++j) {
    s(j, j) = v(p++);
    for (int i = j + 1; i < k; ++i) {
      s(i, j) = v(p++) / kSqrt2;
      s(j, i) = s(i, j);
    }
  }
  return s;
}

void SdpProblem::validate() const {
  if (var_dim < 1) throw InputError("SDP needs at least one variable");
  if (c.size() != var_dim) throw InputError("objective length != var_dim");
  if (eq_a.rows() != eq_b.size() || (eq_a.rows() > 0 && eq_a.cols() != var_dim))
    throw InputError("equality constraint shapes are inconsistent");
  if (psd_blocks.empty() && nonneg_vars.empty())
    throw InputError("SDP needs at least one conic constraint");
  for (const auto& blk : psd_blocks) {
    if (blk.size < 1 || blk.offset.size() != svec_dim(blk.size) ||
        blk.lin.rows() != svec_dim(blk.size) || blk.lin.cols() != var_dim)
      throw InputError("PSD block shapes are inconsistent");
  }
  for (int j : nonneg_vars)
    if (j < 0 || j >= var_dim) throw InputError("nonneg index out of range");
  for (const auto& d : param_jacobian) {
    if (d.c.size() != var_dim || d.eq_a.rows() != eq_a.rows() ||
        d.eq_b.size() != eq_b.size() || d.psd_blocks.size() != psd_blocks.size())
      throw InputError("param_jacobian entry does not match the problem");
  }
}

MatrixXd SdpProblem::block_value(int k, const VectorXd& x) const {
  const auto& blk = psd_blocks.at(k);
  return smat(blk.offset + blk.lin * x);
}

std::string to_string(SdpStatus status) {
  switch (status) {
    case SdpStatus::optimal: return "optimal";
    case SdpStatus::infeasible: return "infeasible";
    case SdpStatus::unbounded: return "unbounded";
    case SdpStatus::max_iter: return "max_iter";
  }
  return "unknown";
}

void write_triplets(const SdpProblem& prob, std::ostream& os) {
  prob.validate();
  os.precision(17);
  os << "vars " << prob.var_dim << "\n";
  for (int i = 0; i < prob.var_dim; ++i)
    if (prob.c(i) != 0.0) os << "c " << i << " " << prob.c(i) << "\n";
  for (int r = 0; r < prob.eq_a.rows(); ++r) {
    for (int i = 0; i < prob.var_dim; ++i)
      if (prob.eq_a(r, i) != 0.0)
        os << "eq " << r << " " << i << " " << prob.eq_a(r, i) << "\n";
    os << "eqb " << r << " " << prob.eq_b(r) << "\n";
  }
  for (std::size_t k = 0; k < prob.psd_blocks.size(); ++k) {
    const auto& blk = prob.psd_blocks[k];
    os << "block " << k << " " << blk.size << "\n";
    auto emit = [&](int var, const VectorXd& v) {
      const MatrixXd m = smat(v);
      for (int j = 0; j < blk.size; ++j)
        for (int i = j; i < blk.size; ++i)
          if (m(i, j) != 0.0)
            os << "F " << k << " " << var << " " << i << " " << j << " "
               << m(i, j) << "\n";
    };
    emit(-1, blk.offset);
    for (int i = 0; i < prob.var_dim; ++i) emit(i, blk.lin.col(i));
  }
  for (int j : prob.nonneg_vars) os << "nonneg " << j << "\n";
}

namespace detail {

int Cone::degree() const {
  int deg = l;
  for (int k : sizes) deg += k;
  return deg;
}

Cone make_cone(const SdpProblem& prob) {
  Cone cone;
  cone.l = static_cast<int>(prob.nonneg_vars.size());
  int off = cone.l;
  for (const auto& blk : prob.psd_blocks) {
    cone.sizes.push_back(blk.size);
    cone.offsets.push_back(off);
    off += svec_dim(blk.size);
  }
  cone.dim = off;
  return cone;
}

ConicForm to_conic(const SdpProblem& prob) {
  prob.validate();
  ConicForm f;
  f.cone = make_cone(prob);
  f.c = prob.c;
  f.a = prob.eq_a.rows() > 0 ? prob.eq_a : MatrixXd(0, prob.var_dim);
  f.b = prob.eq_b;
  f.g = MatrixXd::Zero(f.cone.dim, prob.var_dim);
  f.h = VectorXd::Zero(f.cone.dim);
  for (int i = 0; i < f.cone.l; ++i) f.g(i, prob.nonneg_vars[i]) = -1.0;
  for (std::size_t k = 0; k < prob.psd_blocks.size(); ++k) {
    const int off = f.cone.offsets[k];
    const int d = f.cone.block_dim(static_cast<int>(k));
    f.g.middleRows(off, d) = -prob.psd_blocks[k].lin;
    f.h.segment(off, d) = prob.psd_blocks[k].offset;
  }
  return f;
}

ConicDelta to_conic(const SdpProblem& prob, const ProblemDelta& delta) {
  const Cone cone = make_cone(prob);
  ConicDelta f;
  f.c = delta.c;
  f.a = delta.eq_a.rows() > 0 ? delta.eq_a : MatrixXd(0, prob.var_dim);
  f.b = delta.eq_b;
  f.g = MatrixXd::Zero(cone.dim, prob.var_dim);
  f.h = VectorXd::Zero(cone.dim);
  for (std::size_t k = 0; k < delta.psd_blocks.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    f.g.middleRows(off, d) = -delta.psd_blocks[k].lin;
    f.h.segment(off, d) = delta.psd_blocks[k].offset;
  }
  return f;
}

VectorXd identity(const Cone& cone) {
  VectorXd e = VectorXd::Zero(cone.dim);
  e.head(cone.l).setOnes();
  for (std::size_t k = 0; k < cone.sizes.size(); ++k)
    e.segment(cone.offsets[k], cone.block_dim(static_cast<int>(k))) =
        svec(MatrixXd::Identity(cone.sizes[k], cone.sizes[k]));
  return e;
}

VectorXd jordan(const Cone& cone, const VectorXd& u, const VectorXd& v) {
  VectorXd out(cone.dim);
  out.head(cone.l) = u.head(cone.l).cwiseProduct(v.head(cone.l));
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd um = smat(u.segment(off, d));
    const MatrixXd vm = smat(v.segment(off, d));
    out.segment(off, d) = svec(0.5 * (um * vm + vm * um));
  }
  return out;
}

MatrixXd jordan_matrix(const Cone& cone, const VectorXd& u) {
  MatrixXd op = MatrixXd::Zero(cone.dim, cone.dim);
  for (int i = 0; i < cone.l; ++i) op(i, i) = u(i);
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd um = smat(u.segment(off, d));
    op.block(off, off, d, d) = svec_operator(
        cone.sizes[k], [&](const MatrixXd& x) -> MatrixXd {
          return 0.5 * (um * x + x * um);
        });
  }
  return op;
}

double min_eig(const Cone& cone, const VectorXd& u) {
  double lo = std::numeric_limits<double>::infinity();
  if (cone.l > 0) lo = u.head(cone.l).minCoeff();
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const MatrixXd um = smat(u.segment(cone.offsets[k],
                                       cone.block_dim(static_cast<int>(k))));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(um, Eigen::EigenvaluesOnly);
    lo = std::min(lo, es.eigenvalues()(0));
  }
  return lo;
}

double max_step(const Cone& cone, const VectorXd& u, const VectorXd& du) {
  double alpha = std::numeric_limits<double>::infinity();
  for (int i = 0; i < cone.l; ++i)
    if (du(i) < 0.0) alpha = std::min(alpha, -u(i) / du(i));
  for (std::size_t k = 0; k < cone.sizes.size(); ++k) {
    const int off = cone.offsets[k];
    const int d = cone.block_dim(static_cast<int>(k));
    const MatrixXd um = smat(u.segment(off, d));
    const MatrixXd dm = smat(du.segment(off, d));
    Eigen::LLT<MatrixXd> llt(um);
    double lo;
    if (llt.info() == Eigen::Success) {
      const MatrixXd l_inv_d = llt.matrixL().solve(dm);
      const MatrixXd scaled = llt.matrixL().solve(l_inv_d.transpose());
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (scaled + scaled.transpose()),
                                                 Eigen::EigenvaluesOnly);
      lo = es.eigenvalues()(0);
    } else {
      // u is on the boundary numerically; only directions into the cone move.
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(dm, Eigen::EigenvaluesOnly);
      lo = es.eigenvalues()(0) < 0.0 ? -std::numeric_limits<double>::infinity() : 0.0;
    }
    if (lo < 0.0) alpha = std::min(alpha, -1.0 / lo);
  }
  return std::max(alpha, 0.0);
}

}  // namespace detail
}  // namespace rlqr::sdp
