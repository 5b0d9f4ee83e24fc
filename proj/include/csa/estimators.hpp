#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "csa/criterion.hpp"
#include "csa/dataset.hpp"
#include "csa/errors.hpp"
#include "csa/inference.hpp"
#include "csa/projection.hpp"
#include "csa/subsets.hpp"

namespace csa {

enum class Method { Ols, Tsls, Dn, Csa };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Ols: return "OLS";
    case Method::Tsls: return "2SLS";
    case Method::Dn: return "DN";
    case Method::Csa: return "CSA";
  }
  return "?";
}

struct EstimationResult {
  Eigen::VectorXd beta;  // coefficient order: endogenous, then exogenous
  Method method = Method::Ols;
  std::optional<int> k_hat;              // CSA subset size / DN leading count
  std::optional<CriterionCurve> curve;   // attached when selection ran
  std::optional<Eigen::MatrixXd> vcov;   // N-scaled asymptotic covariance
  std::optional<Eigen::VectorXd> se;     // sqrt(diag(vcov / N))
  std::vector<std::string> warnings;
  std::vector<std::string> coef_names;
};

inline std::vector<Interval> confidence_intervals(const EstimationResult& res,
                                                  double level = 0.95) {
  if (!res.se) throw ConfigError("no standard errors attached to the result");
  std::vector<Interval> out;
  out.reserve(res.beta.size());
  for (int j = 0; j < res.beta.size(); ++j)
    out.push_back(confidence_interval(res.beta(j), (*res.se)(j), level));
  return out;
}

namespace detail {

// Symmetric solve through an eigendecomposition: safe for the PSD-up-to-
// rounding cross-product matrices here, with an explicit conditioning report.
inline Eigen::VectorXd checked_solve(const Eigen::MatrixXd& a,
                                     const Eigen::VectorXd& rhs,
                                     const std::string& context,
                                     std::vector<std::string>* warnings) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double emax = ev.cwiseAbs().maxCoeff();
  const double emin = ev.cwiseAbs().minCoeff();
  if (!(emax > 0) || !(emin > emax * 1e-14))
    throw NumericError(context + " is numerically singular");
  if (emin < emax * 1e-10 && warnings) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(2);
    os << context << " is ill conditioned (condition number " << emax / emin
       << ")";
    warnings->push_back(os.str());
  }
  return es.eigenvectors() *
         (es.eigenvectors().transpose() * rhs).cwiseQuotient(ev);
}

// Common tail of every projection-based estimator: point estimate, residual,
// sandwich covariance with W = P X.
inline EstimationResult finish_projection_estimate(
    const CsaProjection& proj, Method method, const ClusterPartition& part,
    const std::string& context) {
  const InstrumentSpace& sp = *proj.space;
  EstimationResult res;
  res.method = method;
  res.beta = checked_solve(proj.xpx(), proj.xpy(), context, &res.warnings);
  const Eigen::VectorXd eps = sp.y - sp.X * res.beta;
  const Eigen::MatrixXd w = sp.Q * (proj.Pi * sp.A);
  res.vcov = sandwich_vcov(w, proj.xpx(), eps, part);
  res.se = standard_errors(*res.vcov, sp.N);
  return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// OLS.
// ---------------------------------------------------------------------------
inline EstimationResult ols(const DataSet& ds) {
  const Eigen::MatrixXd x = ds.X();
  EstimationResult res;
  res.method = Method::Ols;
  const Eigen::MatrixXd xtx = x.transpose() * x;
  res.beta = detail::checked_solve(xtx, x.transpose() * ds.y, "X'X",
                                   &res.warnings);
  const Eigen::VectorXd eps = ds.y - x * res.beta;
  res.vcov = sandwich_vcov(x, xtx, eps, ClusterPartition::from_dataset(ds));
  res.se = standard_errors(*res.vcov, ds.n());
  res.coef_names = ds.coef_names();
  return res;
}

// ---------------------------------------------------------------------------
// 2SLS on a chosen instrument set (default: all K instruments).
// ---------------------------------------------------------------------------
inline EstimationResult tsls(
    const std::shared_ptr<const InstrumentSpace>& space,
    const ClusterPartition& part,
    const std::optional<SubsetIndex>& subset = std::nullopt) {
  const InstrumentSpace& sp = *space;
  SubsetIndex members;
  if (subset) {
    members = *subset;
    for (int j : members)
      if (j < 0 || j >= sp.K)
        throw ConfigError("instrument index " + std::to_string(j) +
                          " outside [0, " + std::to_string(sp.K) + ")");
  } else {
    members.resize(sp.K);
    for (int i = 0; i < sp.K; ++i) members[i] = i;
  }
  if (static_cast<int>(members.size()) < sp.d1())
    throw ConfigError("two-stage least squares needs at least " +
                      std::to_string(sp.d1()) + " instruments, got " +
                      std::to_string(members.size()));
  const CsaProjection proj = single_subset_projection(space, members);
  EstimationResult res =
      detail::finish_projection_estimate(proj, Method::Tsls, part, "X'PX");
  return res;
}

inline EstimationResult tsls(
    const DataSet& ds,
    const std::optional<SubsetIndex>& subset = std::nullopt) {
  EstimationResult res = tsls(make_instrument_space(ds),
                              ClusterPartition::from_dataset(ds), subset);
  res.coef_names = ds.coef_names();
  return res;
}

// ---------------------------------------------------------------------------
// Nested-selection 2SLS baseline: the approximate-MSE criterion evaluated on
// the idempotent leading-set projectors, then 2SLS on the winning set.
// ---------------------------------------------------------------------------
inline EstimationResult dn_baseline(
    const std::shared_ptr<const InstrumentSpace>& space,
    const PreliminaryFit& pre, const Eigen::VectorXd& lambda,
    const ClusterPartition& part) {
  const InstrumentSpace& sp = *space;
  const int d1 = sp.d1();
  CriterionCurve curve;
  CsaProjection best;
  for (int j = d1; j <= sp.K; ++j) {
    CsaProjection proj = nested_projection(space, j);
    CriterionPoint pt;
    pt.k = j;
    pt.value = feasible_mse(pre, proj, lambda);
    pt.mode = SubsetMode::Exact;
    pt.count_used = 1;
    curve.points.push_back(pt);
    if (pt.value < curve.min_value) {  // strict: ties keep the smaller set
      curve.min_value = pt.value;
      curve.k_hat = j;
      best = std::move(proj);
    }
  }
  for (const auto& pt : curve.points)
    if (pt.k > curve.k_hat && pt.value == curve.min_value) curve.tie = true;

  EstimationResult res = detail::finish_projection_estimate(
      best, Method::Dn, part,
      "X'PX on the leading " + std::to_string(curve.k_hat) + " instruments");
  res.k_hat = curve.k_hat;
  res.curve = std::move(curve);
  return res;
}

inline EstimationResult dn_baseline(const DataSet& ds,
                                    const PreliminaryFit& pre,
                                    const Eigen::VectorXd& lambda) {
  EstimationResult res =
      dn_baseline(make_instrument_space(ds), pre, lambda,
                  ClusterPartition::from_dataset(ds));
  res.coef_names = ds.coef_names();
  return res;
}

// ---------------------------------------------------------------------------
// Complete-subset-averaging 2SLS.
// ---------------------------------------------------------------------------
struct CsaConfig {
  Eigen::VectorXd lambda;     // criterion direction; empty = first coordinate
  std::size_t subset_draws = kDefaultSubsetDraws;  // R per size when sampling
  bool exhaustive = false;    // enumerate every size exactly
  std::uint64_t seed = 0;     // master seed for sampled collections
  std::optional<int> fixed_k; // skip selection and estimate at this size
  std::size_t enumeration_cap = kDefaultEnumerationCap;
  ProjectionOptions projection;
  int jobs = 1;
};

inline EstimationResult csa_2sls(
    const std::shared_ptr<const InstrumentSpace>& space, const CsaConfig& cfg,
    const ClusterPartition& part) {
  const InstrumentSpace& sp = *space;
  int k_hat = 0;
  std::optional<CriterionCurve> curve;
  if (cfg.fixed_k) {
    k_hat = *cfg.fixed_k;
    if (k_hat < 1 || k_hat > sp.K)
      throw ConfigError("fixed subset size " + std::to_string(k_hat) +
                        " outside [1, " + std::to_string(sp.K) + "]");
  } else {
    const PreliminaryFit pre = preliminary_fit(space);
    SelectOptions so;
    so.lambda = cfg.lambda;
    so.subset_draws = cfg.subset_draws;
    so.exhaustive = cfg.exhaustive;
    so.seed = cfg.seed;
    so.enumeration_cap = cfg.enumeration_cap;
    so.projection = cfg.projection;
    so.jobs = cfg.jobs;
    curve = select_k(space, pre, so);
    k_hat = curve->k_hat;
  }

  // The estimation plan reuses the size-specific stream, so the estimate at
  // k_hat averages exactly the collection the criterion scored.
  const SubsetPlan plan =
      cfg.exhaustive
          ? SubsetPlan::exact(sp.K, k_hat, cfg.enumeration_cap)
          : SubsetPlan::automatic(sp.K, k_hat, cfg.subset_draws,
                                  derive_seed(cfg.seed,
                                              static_cast<std::uint64_t>(k_hat)),
                                  cfg.enumeration_cap);
  const CsaProjection proj = csa_projection(space, plan, cfg.projection);
  EstimationResult res = detail::finish_projection_estimate(
      proj, Method::Csa, part, "X'P^kX at k=" + std::to_string(k_hat));
  res.k_hat = k_hat;
  res.curve = std::move(curve);
  return res;
}

inline EstimationResult csa_2sls(const DataSet& ds, const CsaConfig& cfg = {}) {
  EstimationResult res = csa_2sls(make_instrument_space(ds), cfg,
                                  ClusterPartition::from_dataset(ds));
  res.coef_names = ds.coef_names();
  return res;
}

}  // namespace csa
