#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csa/dataset.hpp"
#include "csa/errors.hpp"
#include "csa/projection.hpp"

namespace csa {

// ---------------------------------------------------------------------------
// Cluster structure.  The i.i.d. case is N singleton groups.
// ---------------------------------------------------------------------------
struct ClusterPartition {
  std::vector<std::vector<int>> groups;

  int G() const { return static_cast<int>(groups.size()); }

  static ClusterPartition singletons(int n) {
    ClusterPartition p;
    p.groups.resize(n);
    for (int i = 0; i < n; ++i) p.groups[i] = {i};
    return p;
  }

  // ids must be contiguous 0..G-1 (as produced by the CSV loader).
  static ClusterPartition from_ids(const std::vector<int>& ids) {
    ClusterPartition p;
    int g = 0;
    for (int id : ids) {
      if (id < 0) throw DataError("negative cluster id");
      g = std::max(g, id + 1);
    }
    p.groups.resize(g);
    for (int i = 0; i < static_cast<int>(ids.size()); ++i)
      p.groups[ids[i]].push_back(i);
    for (const auto& grp : p.groups)
      if (grp.empty()) throw DataError("cluster ids are not contiguous");
    return p;
  }

  // Partition implied by a dataset: its cluster column, or singletons.
  static ClusterPartition from_dataset(const DataSet& ds) {
    return ds.cluster.empty() ? singletons(ds.n()) : from_ids(ds.cluster);
  }

  void check_covers(int n) const {
    std::vector<char> seen(n, 0);
    for (const auto& grp : groups)
      for (int i : grp) {
        if (i < 0 || i >= n || seen[i])
          throw DataError("cluster groups do not partition the rows");
        seen[i] = 1;
      }
    for (char c : seen)
      if (!c) throw DataError("cluster groups do not partition the rows");
  }
};

// ---------------------------------------------------------------------------
// Normal quantile: rational approximation refined by one Newton step against
// the erfc-based CDF, giving near machine precision over (0, 1).
// ---------------------------------------------------------------------------
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

inline double normal_pdf(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw ConfigError("quantile probability must lie strictly in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  x -= (normal_cdf(x) - p) / normal_pdf(x);
  return x;
}

// ---------------------------------------------------------------------------
// Sandwich covariance.  W is the effective instrument block (P X for a
// projection-based estimator, X itself for OLS) so the meat is
// sum_g (W_g' e_g)(W_g' e_g)'.  Sigma = N * bread * meat * bread with
// bread = (W'X)^{-1} evaluated from the supplied cross-product matrix, and
// standard errors are sqrt(diag(Sigma / N)).
// ---------------------------------------------------------------------------
inline Eigen::MatrixXd sandwich_vcov(const Eigen::MatrixXd& w,
                                     const Eigen::MatrixXd& wtx,
                                     const Eigen::VectorXd& eps,
                                     const ClusterPartition& part) {
  const int n = static_cast<int>(w.rows());
  const int d = static_cast<int>(w.cols());
  part.check_covers(n);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd s(d);
  for (const auto& grp : part.groups) {
    s.setZero();
    for (int i : grp) s += w.row(i).transpose() * eps(i);
    meat.selfadjointView<Eigen::Lower>().rankUpdate(s);
  }
  meat.triangularView<Eigen::StrictlyUpper>() =
      meat.triangularView<Eigen::StrictlyLower>().transpose();

  Eigen::FullPivLU<Eigen::MatrixXd> lu(wtx);
  if (!lu.isInvertible())
    throw NumericError("sandwich bread matrix is singular");
  const Eigen::MatrixXd bread = lu.inverse();
  return static_cast<double>(n) * bread * meat * bread.transpose();
}

inline Eigen::MatrixXd robust_vcov(const DataSet& ds, const CsaProjection& proj,
                                   const Eigen::VectorXd& beta_hat,
                                   const ClusterPartition& part) {
  const InstrumentSpace& sp = *proj.space;
  const Eigen::MatrixXd w = sp.Q * (proj.Pi * sp.A);  // P X, no dense P
  const Eigen::VectorXd eps = ds.y - ds.X() * beta_hat;
  return sandwich_vcov(w, proj.xpx(), eps, part);
}

inline Eigen::VectorXd standard_errors(const Eigen::MatrixXd& sigma, int n) {
  return (sigma.diagonal() / static_cast<double>(n))
      .cwiseMax(0.0)
      .cwiseSqrt();
}

struct Interval {
  double lo = 0, hi = 0;
  bool contains(double x) const { return lo <= x && x <= hi; }
};

inline Interval confidence_interval(double beta, double se, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw ConfigError("confidence level must lie strictly in (0, 1)");
  const double z = normal_quantile(0.5 + level / 2.0);
  return {beta - z * se, beta + z * se};
}

}  // namespace csa
