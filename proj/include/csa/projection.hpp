#pragma once

#include <cassert>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csa/dataset.hpp"
#include "csa/errors.hpp"
#include "csa/subsets.hpp"

namespace csa {

inline constexpr double kRankTolerance = 1e-10;  // relative, on QR pivots

// One-time orthonormal factorization of the full column space
// [instruments | exogenous].  Every subset design lives inside this span, so
// each per-subset projector is Q * proj(S_m) * Q' with S_m a small coordinate
// block: all averaging, traces and criterion products reduce to r x r algebra
// (r <= K + d2) instead of N x N.  The N x N operator is recovered exactly by
// dense() when wanted.
struct InstrumentSpace {
  Eigen::MatrixXd Q;     // N x r, orthonormal columns spanning [Z_excl, X_exog]
  Eigen::MatrixXd T;     // r x (K + d2): coordinates of each raw column
  Eigen::MatrixXd G;     // (K+d2) x (K+d2) Gram matrix T'T
  Eigen::MatrixXd A;     // r x d: coordinates of X = [Y_endo, X_exog]
  Eigen::VectorXd b;     // r: coordinates of y
  Eigen::MatrixXd X;     // N x d cached regressor block
  Eigen::VectorXd y;     // N cached outcome
  Eigen::MatrixXd XtX;   // d x d
  Eigen::VectorXd Xty;   // d
  int N = 0, K = 0, d2 = 0, r = 0;

  int d() const { return static_cast<int>(A.cols()); }
  int d1() const { return d() - d2; }

  // q-space column indices of a subset design: members, then the exogenous tail.
  std::vector<int> design_cols(const SubsetIndex& s) const {
    std::vector<int> cols(s.begin(), s.end());
    for (int j = 0; j < d2; ++j) cols.push_back(K + j);
    return cols;
  }
};

inline std::shared_ptr<const InstrumentSpace> make_instrument_space(
    const DataSet& ds, double rank_tol = kRankTolerance) {
  auto sp = std::make_shared<InstrumentSpace>();
  sp->N = ds.n();
  sp->K = ds.K();
  sp->d2 = ds.d2();
  const int q = sp->K + sp->d2;
  if (q == 0) throw DataError("no instrument or exogenous columns");
  Eigen::MatrixXd zfull(sp->N, q);
  zfull.leftCols(sp->K) = ds.Z_excl;
  if (sp->d2 > 0) zfull.rightCols(sp->d2) = ds.X_exog;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(zfull);
  qr.setThreshold(rank_tol);
  sp->r = static_cast<int>(qr.rank());
  sp->Q = qr.householderQ() * Eigen::MatrixXd::Identity(sp->N, sp->r);
  sp->T = sp->Q.transpose() * zfull;
  sp->G = sp->T.transpose() * sp->T;
  sp->X = ds.X();
  sp->y = ds.y;
  sp->A = sp->Q.transpose() * sp->X;
  sp->b = sp->Q.transpose() * ds.y;
  sp->XtX = sp->X.transpose() * sp->X;
  sp->Xty = sp->X.transpose() * ds.y;
  return sp;
}

// Projection onto span(m) as a dense matrix, via pivoted QR (handles rank
// deficiency by projecting onto the actual span).
inline Eigen::MatrixXd projection_matrix(const Eigen::MatrixXd& m) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  qr.setThreshold(kRankTolerance);
  const int rk = static_cast<int>(qr.rank());
  const Eigen::MatrixXd u =
      qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), rk);
  return u * u.transpose();
}

// Raw-column design of one subset: selected instruments, then all exogenous
// columns.  Used by oracles and small-scale checks; the averaging loop works
// in coordinates instead.
inline Eigen::MatrixXd subset_design(const DataSet& ds, const SubsetIndex& s) {
  Eigen::MatrixXd z(ds.n(), static_cast<int>(s.size()) + ds.d2());
  for (std::size_t j = 0; j < s.size(); ++j) {
    assert(s[j] >= 0 && s[j] < ds.K());
    z.col(j) = ds.Z_excl.col(s[j]);
  }
  if (ds.d2() > 0) z.rightCols(ds.d2()) = ds.X_exog;
  return z;
}

enum class SingularPolicy {
  PerMode,  // strict in exact mode, drop-and-renormalize in sampled mode
  Error,
  Drop,
};

enum class BuilderPath {
  Auto,  // per-subset pivoted QR; Gram accumulation for huge exact collections
  Qr,
  Gram,
};

struct ProjectionOptions {
  SingularPolicy singular = SingularPolicy::PerMode;
  BuilderPath path = BuilderPath::Auto;
  double rank_tol = kRankTolerance;
  // exact collections at least this large take the Gram path under Auto
  std::size_t gram_threshold = 20000;
  // optional predicate: subsets it rejects are excluded from the average
  // (used by the limited-information analysis); empty means keep everything
  std::function<bool(const SubsetIndex&)> filter;
};

// Equal-weight average P of per-subset projectors, held in coordinates:
// P = Q * Pi * Q'.  trace == k + d2 up to roundoff (== k when there is no
// exogenous block); trace_sq = tr(P^2) <= trace with equality iff idempotent.
class CsaProjection {
 public:
  std::shared_ptr<const InstrumentSpace> space;
  Eigen::MatrixXd Pi;  // r x r symmetric PSD
  int k = 0;
  std::size_t count_used = 0;      // subsets actually averaged
  std::size_t count_dropped = 0;   // singular subsets skipped (drop policy)
  std::size_t count_filtered = 0;  // subsets rejected by an options filter
  double trace = 0, trace_sq = 0, max_diag = 0;

  Eigen::MatrixXd dense() const { return space->Q * Pi * space->Q.transpose(); }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& a) const {
    assert(a.rows() == space->N);
    return space->Q * (Pi * (space->Q.transpose() * a));
  }

  // Criterion building blocks, all in coordinates.
  Eigen::MatrixXd xpx() const {   // X' P X
    return space->A.transpose() * Pi * space->A;
  }
  Eigen::MatrixXd xppx() const {  // X' P P X
    const Eigen::MatrixXd pa = Pi * space->A;
    return pa.transpose() * pa;
  }
  Eigen::VectorXd xpy() const {   // X' P y
    return space->A.transpose() * (Pi * space->b);
  }
};

namespace detail {

inline std::string subset_to_string(const SubsetIndex& s) {
  std::string out = "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "}";
}

// Compensated (Kahan) matrix accumulator: the exact-mode average can run over
// ~10^6 terms, so stray low-order bits are worth recovering.
class KahanMatrix {
 public:
  explicit KahanMatrix(int n) : sum_(Eigen::MatrixXd::Zero(n, n)),
                                comp_(Eigen::MatrixXd::Zero(n, n)) {}
  void add(const Eigen::MatrixXd& term) {
    y_ = term - comp_;
    t_ = sum_ + y_;
    comp_ = (t_ - sum_) - y_;
    sum_.swap(t_);
  }
  const Eigen::MatrixXd& value() const { return sum_; }

 private:
  Eigen::MatrixXd sum_, comp_, y_, t_;
};

}  // namespace detail

// Build the averaged projector over the plan's subset collection.
inline CsaProjection csa_projection(std::shared_ptr<const InstrumentSpace> space,
                                    const SubsetPlan& plan,
                                    const ProjectionOptions& opt = {}) {
  const InstrumentSpace& sp = *space;
  assert(plan.K == sp.K);
  const int r = sp.r;
  const int p = plan.k + sp.d2;

  const bool exact = plan.mode == SubsetMode::Exact;
  const bool strict = opt.singular == SingularPolicy::Error ||
                      (opt.singular == SingularPolicy::PerMode && exact);

  BuilderPath path = opt.path;
  if (path == BuilderPath::Auto)
    path = (exact && plan.collection_size() >= opt.gram_threshold)
               ? BuilderPath::Gram
               : BuilderPath::Qr;

  CsaProjection out;
  out.space = space;
  out.k = plan.k;

  detail::KahanMatrix pi_acc(r);
  std::size_t used = 0, dropped = 0, filtered = 0;

  // Workspaces shared across subsets.
  Eigen::MatrixXd s_block(r, p), u, term(r, r);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  Eigen::MatrixXd gm(p, p), ginv(p, p);
  Eigen::LLT<Eigen::MatrixXd> llt;
  detail::KahanMatrix omega_acc(sp.K + sp.d2);
  Eigen::MatrixXd omega_term = Eigen::MatrixXd::Zero(sp.K + sp.d2, sp.K + sp.d2);
  bool any_omega = false;

  auto qr_accumulate = [&](const std::vector<int>& cols,
                           const SubsetIndex& members) -> void {
    for (int j = 0; j < p; ++j) s_block.col(j) = sp.T.col(cols[j]);
    qr.compute(s_block);
    qr.setThreshold(opt.rank_tol);
    if (static_cast<int>(qr.rank()) < p) {
      if (strict)
        throw NumericError("subset design " + detail::subset_to_string(members) +
                           " at k=" + std::to_string(plan.k) +
                           " is rank deficient");
      ++dropped;
      return;
    }
    u = qr.householderQ() * Eigen::MatrixXd::Identity(r, p);
    term.noalias() = u * u.transpose();
    pi_acc.add(term);
    ++used;
  };

  auto visit = [&](const SubsetIndex& members) {
    if (opt.filter && !opt.filter(members)) {
      ++filtered;
      return;
    }
    if (p == 0) {  // k = 0 with no exogenous block: the zero projector
      ++used;
      return;
    }
    std::vector<int> cols = sp.design_cols(members);
    if (path == BuilderPath::Qr) {
      qr_accumulate(cols, members);
      return;
    }
    // Gram path: G_m is a lookup, its inverse is scattered into Omega.
    double maxd = 0;
    for (int a = 0; a < p; ++a) {
      for (int c = 0; c <= a; ++c) gm(a, c) = gm(c, a) = sp.G(cols[a], cols[c]);
      maxd = std::max(maxd, gm(a, a));
    }
    llt.compute(gm);
    bool suspect = llt.info() != Eigen::Success || maxd <= 0;
    if (!suspect) {
      const double minl = llt.matrixLLT().diagonal().minCoeff();
      suspect = !(minl * minl > 1e-12 * maxd);
    }
    if (suspect) {  // marginal conditioning: let pivoted QR decide
      qr_accumulate(cols, members);
      return;
    }
    ginv = llt.solve(Eigen::MatrixXd::Identity(p, p));
    omega_term.setZero();
    for (int a = 0; a < p; ++a)
      for (int c = 0; c < p; ++c) omega_term(cols[a], cols[c]) = ginv(a, c);
    omega_acc.add(omega_term);
    any_omega = true;
    ++used;
  };

  if (exact) {
    for_each_subset(sp.K, plan.k, visit);
  } else {
    for (const auto& s : sample_subsets(sp.K, plan.k, plan.R, plan.seed)) visit(s);
  }

  if (used == 0) {
    if (filtered > 0 && dropped == 0)
      throw NumericError("no subset of size k=" + std::to_string(plan.k) +
                         " passes the subset filter; the average is undefined");
    throw NumericError("all " + std::to_string(used + dropped) +
                       " subset designs at k=" + std::to_string(plan.k) +
                       " are rank deficient; estimation impossible");
  }

  out.Pi = pi_acc.value();
  if (any_omega) out.Pi += sp.T * omega_acc.value() * sp.T.transpose();
  out.Pi /= static_cast<double>(used);
  out.Pi = 0.5 * (out.Pi + out.Pi.transpose()).eval();
  out.count_used = used;
  out.count_dropped = dropped;
  out.count_filtered = filtered;
  out.trace = out.Pi.trace();
  out.trace_sq = out.Pi.squaredNorm();  // tr(Pi^2) for symmetric Pi
  const Eigen::MatrixXd b = sp.Q * out.Pi;
  out.max_diag = b.cwiseProduct(sp.Q).rowwise().sum().maxCoeff();
  return out;
}

inline CsaProjection csa_projection(const DataSet& ds, const SubsetPlan& plan,
                                    const ProjectionOptions& opt = {}) {
  return csa_projection(make_instrument_space(ds, opt.rank_tol), plan, opt);
}

// Idempotent projector of one instrument set (plus the exogenous block),
// packaged as a single-member "average" so criterion and inference code can
// treat nested-selection estimators uniformly.  Rank deficiency projects onto
// the actual span.
inline CsaProjection single_subset_projection(
    std::shared_ptr<const InstrumentSpace> space, const SubsetIndex& members) {
  const InstrumentSpace& sp = *space;
  const int p = static_cast<int>(members.size()) + sp.d2;
  CsaProjection out;
  out.space = space;
  out.k = static_cast<int>(members.size());
  out.count_used = 1;
  if (p == 0) {
    out.Pi = Eigen::MatrixXd::Zero(sp.r, sp.r);
    return out;
  }
  const std::vector<int> cols = sp.design_cols(members);
  Eigen::MatrixXd block(sp.r, p);
  for (int j = 0; j < p; ++j) block.col(j) = sp.T.col(cols[j]);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(block);
  qr.setThreshold(kRankTolerance);
  const int rk = static_cast<int>(qr.rank());
  const Eigen::MatrixXd u =
      qr.householderQ() * Eigen::MatrixXd::Identity(sp.r, rk);
  out.Pi = u * u.transpose();
  out.trace = out.Pi.trace();
  out.trace_sq = out.Pi.squaredNorm();
  const Eigen::MatrixXd b = sp.Q * out.Pi;
  out.max_diag = b.cwiseProduct(sp.Q).rowwise().sum().maxCoeff();
  return out;
}

// The leading-j nested design used by single-model selection rules.
inline CsaProjection nested_projection(
    std::shared_ptr<const InstrumentSpace> space, int j) {
  SubsetIndex lead(j);
  for (int i = 0; i < j; ++i) lead[i] = i;
  return single_subset_projection(std::move(space), lead);
}

}  // namespace csa
