#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "csa/errors.hpp"
#include "csa/projection.hpp"
#include "csa/rng.hpp"
#include "csa/subsets.hpp"

namespace csa {

inline constexpr double kConditionLimit = 1e12;  // moment-matrix sanity bound

inline Eigen::VectorXd default_lambda(int d) {
  Eigen::VectorXd l = Eigen::VectorXd::Zero(d);
  l(0) = 1.0;
  return l;
}

// ---------------------------------------------------------------------------
// First-stage instrument-count choice: Mallows Cp over the nested leading
// sets j = d1..K (each design is the first j instruments plus the exogenous
// block), with the error scale taken from the largest model.  Ties go to the
// smaller j.
// ---------------------------------------------------------------------------
struct MallowsResult {
  int k_tilde = 0;
  std::vector<int> grid;    // j = d1 .. K
  std::vector<double> cp;   // Cp(j), aligned with grid
};

inline MallowsResult mallows_first_stage(const InstrumentSpace& sp) {
  const int d1 = sp.d1();
  const int d = sp.d();
  if (sp.K < d1)
    throw ConfigError("first-stage selection needs at least " +
                      std::to_string(d1) + " instruments, have " +
                      std::to_string(sp.K));
  const double n = static_cast<double>(sp.N);
  const double xnorm2 = sp.X.squaredNorm();

  // Rss(j) = ||X - P_j X||_F^2 = ||X||_F^2 - ||U_j' A||_F^2 with U_j an
  // orthonormal basis (in coordinates) of the leading-j design.
  auto rss = [&](int j) {
    const int p = j + sp.d2;
    if (p == 0) return xnorm2;
    Eigen::MatrixXd block(sp.r, p);
    for (int i = 0; i < j; ++i) block.col(i) = sp.T.col(i);
    for (int i = 0; i < sp.d2; ++i) block.col(j + i) = sp.T.col(sp.K + i);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(block);
    qr.setThreshold(kRankTolerance);
    const int rk = static_cast<int>(qr.rank());
    const Eigen::MatrixXd u =
        qr.householderQ() * Eigen::MatrixXd::Identity(sp.r, rk);
    return xnorm2 - (u.transpose() * sp.A).squaredNorm();
  };

  const double sigma2_tr = rss(sp.K) / (n * d);
  MallowsResult out;
  double best = std::numeric_limits<double>::infinity();
  for (int j = d1; j <= sp.K; ++j) {
    const double cp = rss(j) / n + 2.0 * sigma2_tr * (j + sp.d2) / n;
    out.grid.push_back(j);
    out.cp.push_back(cp);
    if (cp < best) {  // strict: ties resolve to the smaller j
      best = cp;
      out.k_tilde = j;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preliminary fit: two-stage least squares on the Mallows-selected leading
// instruments, plus every residual moment the criterion needs.
// ---------------------------------------------------------------------------
struct PreliminaryFit {
  Eigen::VectorXd beta;        // preliminary 2SLS coefficients
  Eigen::VectorXd eps;         // y - X beta
  Eigen::MatrixXd f;           // first-stage fitted values, N x d
  Eigen::MatrixXd u;           // X - f
  Eigen::MatrixXd H;           // f'f / N
  double sigma2_eps = 0;       // eps'eps / N
  Eigen::VectorXd sigma_ueps;  // u'eps / N
  Eigen::MatrixXd Sigma_u;     // u'u / N
  int k_tilde = 0;             // leading-set size actually used
  MallowsResult selection;     // populated when the choice was data driven
};

// force_k > 0 bypasses the Mallows step and uses the leading force_k
// instruments directly.
inline PreliminaryFit preliminary_fit(
    const std::shared_ptr<const InstrumentSpace>& space, int force_k = 0) {
  const InstrumentSpace& sp = *space;
  PreliminaryFit out;
  if (force_k > 0) {
    if (force_k < sp.d1() || force_k > sp.K)
      throw ConfigError("forced preliminary instrument count " +
                        std::to_string(force_k) + " outside [" +
                        std::to_string(sp.d1()) + ", " + std::to_string(sp.K) +
                        "]");
    out.k_tilde = force_k;
  } else {
    out.selection = mallows_first_stage(sp);
    out.k_tilde = out.selection.k_tilde;
  }

  const double n = static_cast<double>(sp.N);
  const int p = out.k_tilde + sp.d2;
  Eigen::MatrixXd block(sp.r, p);
  for (int i = 0; i < out.k_tilde; ++i) block.col(i) = sp.T.col(i);
  for (int i = 0; i < sp.d2; ++i) block.col(out.k_tilde + i) = sp.T.col(sp.K + i);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(block);
  qr.setThreshold(kRankTolerance);
  const int rk = static_cast<int>(qr.rank());
  const Eigen::MatrixXd u =
      qr.householderQ() * Eigen::MatrixXd::Identity(sp.r, rk);
  const Eigen::MatrixXd ua = u.transpose() * sp.A;  // rk x d
  const Eigen::VectorXd ub = u.transpose() * sp.b;

  out.f = sp.Q * (u * ua);
  out.H = ua.transpose() * ua / n;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.H);
  const double emax = eig.eigenvalues().maxCoeff();
  const double emin = eig.eigenvalues().minCoeff();
  if (!(emax > 0) || !(emin > emax / kConditionLimit))
    throw NumericError(
        "preliminary first-stage moment matrix is singular or ill "
        "conditioned; instruments may be uninformative");

  out.beta = (ua.transpose() * ua).ldlt().solve(ua.transpose() * ub);
  out.eps = sp.y - sp.X * out.beta;
  out.u = sp.X - out.f;
  out.sigma2_eps = out.eps.squaredNorm() / n;
  out.sigma_ueps = out.u.transpose() * out.eps / n;
  out.Sigma_u = out.u.transpose() * out.u / n;
  return out;
}

// ---------------------------------------------------------------------------
// Feasible approximate-MSE criterion for an averaged projector.
// ---------------------------------------------------------------------------
struct FeasibleParts {
  Eigen::MatrixXd e_f;   // X'(I-P)^2 X / N + Sigma_u (2k - tr P^2) / N
  Eigen::MatrixXd xi_f;  // X'(I-P)  X / N + Sigma_u k / N - Sigma_u
};

inline FeasibleParts feasible_parts(const PreliminaryFit& pre,
                                    const CsaProjection& proj) {
  const InstrumentSpace& sp = *proj.space;
  const double n = static_cast<double>(sp.N);
  const double k = static_cast<double>(proj.k);
  const Eigen::MatrixXd xpx = proj.xpx();
  const Eigen::MatrixXd xppx = proj.xppx();
  FeasibleParts out;
  out.e_f = (sp.XtX - 2.0 * xpx + xppx) / n +
            pre.Sigma_u * (2.0 * k - proj.trace_sq) / n;
  out.xi_f = (sp.XtX - xpx) / n + pre.Sigma_u * (k / n) - pre.Sigma_u;
  return out;
}

inline double feasible_mse(const PreliminaryFit& pre, const CsaProjection& proj,
                           const Eigen::VectorXd& lambda) {
  const InstrumentSpace& sp = *proj.space;
  if (lambda.size() != sp.d())
    throw ConfigError("direction vector has length " +
                      std::to_string(lambda.size()) + ", expected " +
                      std::to_string(sp.d()));
  const double n = static_cast<double>(sp.N);
  const double k = static_cast<double>(proj.k);
  const FeasibleParts parts = feasible_parts(pre, proj);

  const auto hfac = pre.H.ldlt();
  const Eigen::VectorXd hl = hfac.solve(lambda);
  const double s2_lam_eps = std::pow(hl.dot(pre.sigma_ueps), 2);
  const Eigen::VectorXd v = parts.xi_f * hl;
  const double value = s2_lam_eps * k * k / n +
                       pre.sigma2_eps * (hl.dot(parts.e_f * hl) -
                                         v.dot(hfac.solve(v)));
  if (!std::isfinite(value))
    throw NumericError("criterion value at k=" + std::to_string(proj.k) +
                       " is not finite");
  return value;
}

// ---------------------------------------------------------------------------
// Data-driven choice of the subset size: evaluate the criterion on the grid
// k = d1..K and take the smallest minimizer.
// ---------------------------------------------------------------------------
struct CriterionPoint {
  int k = 0;
  double value = 0;
  SubsetMode mode = SubsetMode::Exact;
  std::size_t count_used = 0;
};

struct CriterionCurve {
  std::vector<CriterionPoint> points;
  int k_hat = 0;
  double min_value = std::numeric_limits<double>::infinity();
  bool tie = false;  // some larger k attained exactly the same minimum
};

struct SelectOptions {
  Eigen::VectorXd lambda;    // empty: first coordinate direction
  std::size_t subset_draws = kDefaultSubsetDraws;  // R per k in sampled mode
  bool exhaustive = false;   // force exact enumeration at every k
  std::uint64_t seed = 0;    // master seed; k-specific streams derive from it
  std::size_t enumeration_cap = kDefaultEnumerationCap;
  ProjectionOptions projection;
  int jobs = 1;
};

inline SubsetPlan plan_for_k(const InstrumentSpace& sp, int k,
                             const SelectOptions& opt) {
  if (opt.exhaustive) return SubsetPlan::exact(sp.K, k, opt.enumeration_cap);
  return SubsetPlan::automatic(sp.K, k, opt.subset_draws,
                               derive_seed(opt.seed, static_cast<std::uint64_t>(k)),
                               opt.enumeration_cap);
}

inline CriterionCurve select_k(
    const std::shared_ptr<const InstrumentSpace>& space,
    const PreliminaryFit& pre, const SelectOptions& opt = {}) {
  const InstrumentSpace& sp = *space;
  const int d1 = sp.d1();
  if (sp.K < d1)
    throw ConfigError("subset size grid is empty: K < d1");
  const Eigen::VectorXd lambda =
      opt.lambda.size() == 0 ? default_lambda(sp.d()) : opt.lambda;

  CriterionCurve curve;
  const int m = sp.K - d1 + 1;
  curve.points.resize(m);

  auto eval_at = [&](int idx) {
    const int k = d1 + idx;
    const SubsetPlan plan = plan_for_k(sp, k, opt);
    const CsaProjection proj = csa_projection(space, plan, opt.projection);
    CriterionPoint pt;
    pt.k = k;
    pt.value = feasible_mse(pre, proj, lambda);
    pt.mode = plan.mode;
    pt.count_used = proj.count_used;
    curve.points[idx] = pt;
  };

  const int jobs = std::max(1, std::min(opt.jobs, m));
  if (jobs == 1) {
    for (int i = 0; i < m; ++i) eval_at(i);
  } else {
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (int t = 0; t < jobs; ++t) {
      pool.emplace_back([&, t]() {
        try {
          for (int i = t; i < m; i += jobs) eval_at(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (const auto& pt : curve.points) {
    if (pt.value < curve.min_value) {  // strict: ties keep the smaller k
      curve.min_value = pt.value;
      curve.k_hat = pt.k;
    }
  }
  for (const auto& pt : curve.points)
    if (pt.k > curve.k_hat && pt.value == curve.min_value) curve.tie = true;
  return curve;
}

// ---------------------------------------------------------------------------
// Population-style MSE in a direction, from true first-stage quantities.
// Used by the simulation engine to audit the feasible choice.
// ---------------------------------------------------------------------------
struct OracleInputs {
  Eigen::MatrixXd f;           // true first stage, N x d
  double sigma2_eps = 1.0;
  Eigen::VectorXd sigma_ueps;  // true cov(u, eps), length d
  Eigen::MatrixXd H;           // f'f / N (or its population value)
};

inline double oracle_mse(const OracleInputs& ora, const CsaProjection& proj,
                         const Eigen::VectorXd& lambda,
                         double bias_inflation = 1.0) {
  const InstrumentSpace& sp = *proj.space;
  const double n = static_cast<double>(sp.N);
  const double k = static_cast<double>(proj.k);
  // g = (I - P) f; then f'(I-P)(I-P_f)(I-P)f = g'g - (f'g)'(f'f)^{-1}(f'g).
  const Eigen::MatrixXd g = ora.f - proj.apply(ora.f);
  const Eigen::MatrixXd ftf = ora.f.transpose() * ora.f;
  const Eigen::MatrixXd fg = ora.f.transpose() * g;
  const Eigen::MatrixXd mid =
      (g.transpose() * g - fg.transpose() * ftf.ldlt().solve(fg)) / n;
  const Eigen::VectorXd hl = ora.H.ldlt().solve(lambda);
  const double bias = std::pow(bias_inflation * hl.dot(ora.sigma_ueps), 2);
  return bias * k * k / n + ora.sigma2_eps * hl.dot(mid * hl);
}

// Limited-information variant: only subsets containing at least d1 relevant
// instruments carry first-stage signal; the averaged projector keeps exactly
// those, and the bias term picks up the factor (M / M1)^2.
struct IrrelevantOracle {
  double value = 0;
  std::size_t m_total = 0;        // subsets in the plan's collection
  std::size_t m_informative = 0;  // members with >= d1 relevant instruments
};

inline IrrelevantOracle oracle_mse_irrelevant(
    const OracleInputs& ora,
    const std::shared_ptr<const InstrumentSpace>& space, const SubsetPlan& plan,
    const Eigen::VectorXd& lambda, const std::vector<bool>& relevant,
    const ProjectionOptions& base_opt = {}) {
  const InstrumentSpace& sp = *space;
  if (static_cast<int>(relevant.size()) != sp.K)
    throw ConfigError("relevance mask has length " +
                      std::to_string(relevant.size()) + ", expected " +
                      std::to_string(sp.K));
  const int threshold = sp.d1();
  auto informative = [&](const SubsetIndex& s) {
    int hits = 0;
    for (int j : s)
      if (relevant[j]) ++hits;
    return hits >= threshold;
  };

  IrrelevantOracle out;
  auto count = [&](const SubsetIndex& s) {
    ++out.m_total;
    if (informative(s)) ++out.m_informative;
  };
  if (plan.mode == SubsetMode::Exact) {
    for_each_subset(plan.K, plan.k, count);
  } else {
    for (const auto& s : sample_subsets(plan.K, plan.k, plan.R, plan.seed))
      count(s);
  }
  if (out.m_informative == 0)
    throw NumericError("no subset of size k=" + std::to_string(plan.k) +
                       " contains " + std::to_string(threshold) +
                       " relevant instruments; the limited-information "
                       "average is undefined");

  ProjectionOptions opt = base_opt;
  opt.filter = informative;
  const CsaProjection proj = csa_projection(space, plan, opt);
  const double ratio = static_cast<double>(out.m_total) /
                       static_cast<double>(out.m_informative);
  out.value = oracle_mse(ora, proj, lambda, ratio);
  return out;
}

}  // namespace csa
