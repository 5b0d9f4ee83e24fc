#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "csa/estimators.hpp"

namespace csa {

// ---------------------------------------------------------------------------
// Design configuration.
// ---------------------------------------------------------------------------

enum class Signal { Flat, Decreasing, HalfZero };

inline const char* signal_name(Signal s) {
  switch (s) {
    case Signal::Flat: return "flat";
    case Signal::Decreasing: return "decreasing";
    case Signal::HalfZero: return "half-zero";
  }
  return "?";
}

inline Signal parse_signal(const std::string& name) {
  if (name == "flat") return Signal::Flat;
  if (name == "decreasing") return Signal::Decreasing;
  if (name == "half-zero" || name == "halfzero") return Signal::HalfZero;
  throw ConfigError("unknown signal design '" + name +
                    "' (expected flat, decreasing, or half-zero)");
}

// One simulated design cell: y_i = beta0 + beta1 Y_i + eps_i with a single
// endogenous regressor Y_i = pi'Z_i + u_i, K equicorrelated instruments, and
// unit-variance errors with covariance sigma_ueps.
struct DgpConfig {
  int N = 100;
  int K = 20;
  double rho_z = 0.0;        // equicorrelation of the instruments, in [0,1)
  double sigma_ueps = 0.0;   // cov(u, eps), in (-1,1)
  double rf2 = 0.1;          // population first-stage R^2, in [0,1)
  Signal signal = Signal::Flat;
  double beta0 = 0.0;        // intercept
  double beta1 = 0.1;        // endogenous coefficient (the estimand)
  std::uint64_t seed = 0;

  void check() const {
    if (N < 3)
      throw ConfigError("N=" + std::to_string(N) +
                        " cannot identify the two coefficients");
    if (K < 1) throw ConfigError("K must be at least 1");
    if (!(rho_z >= 0.0 && rho_z < 1.0))
      throw ConfigError("rho_z must lie in [0,1)");
    if (!(sigma_ueps > -1.0 && sigma_ueps < 1.0))
      throw ConfigError("sigma_ueps must lie in (-1,1)");
    if (!(rf2 >= 0.0 && rf2 < 1.0)) throw ConfigError("rf2 must lie in [0,1)");
    if (signal == Signal::HalfZero && K < 2)
      throw ConfigError("the half-zero design needs K >= 2");
    if (!std::isfinite(beta0) || !std::isfinite(beta1))
      throw ConfigError("beta0 and beta1 must be finite");
  }
};

// Population first-stage R^2 implied by a coefficient vector under the
// equicorrelated instrument covariance (1-rho)I + rho 11' and unit u variance:
// R^2 = pi'Sigma pi / (pi'Sigma pi + 1).
inline double population_rf2(const Eigen::VectorXd& pi, double rho_z) {
  const double sum = pi.sum();
  const double ss = pi.squaredNorm();
  const double quad = ss + rho_z * (sum * sum - ss);
  return quad / (quad + 1.0);
}

// First-stage coefficients for the three signal layouts.  Decreasing and
// half-zero scale a quartic shape so that the population R^2 identity above
// returns rf2 exactly for any rho_z.  Flat uses the rho-free normalization
// pi_k = sqrt(rf2 / (K(1-rf2))) as a deliberate convention: its population
// R^2 is exact at rho_z = 0 and grows with rho_z (the per-coefficient scale,
// and hence the least-squares bias benchmark, stays comparable across
// correlation levels instead of shrinking).
inline Eigen::VectorXd solve_pi(const DgpConfig& cfg) {
  cfg.check();
  Eigen::VectorXd pi = Eigen::VectorXd::Zero(cfg.K);
  if (cfg.rf2 == 0.0) return pi;
  const double target = cfg.rf2 / (1.0 - cfg.rf2);  // pi'Sigma pi

  if (cfg.signal == Signal::Flat) {
    pi.setConstant(std::sqrt(cfg.rf2 / (cfg.K * (1.0 - cfg.rf2))));
    return pi;
  }

  // Quartic shape on the nonzero block: all of 1..K when decreasing, the
  // trailing half when half-zero (leading floor(K/2) coefficients are zero).
  const int zeros = cfg.signal == Signal::HalfZero ? cfg.K / 2 : 0;
  const int live = cfg.K - zeros;
  Eigen::VectorXd shape(live);
  for (int i = 0; i < live; ++i)
    shape[i] = std::pow(1.0 - (i + 1.0) / (live + 1.0), 4);
  const double sum = shape.sum();
  const double ss = shape.squaredNorm();
  const double denom = ss + cfg.rho_z * (sum * sum - ss);
  if (!(denom > 0.0))
    throw ConfigError("signal normalization sum is not positive");
  pi.tail(live) = std::sqrt(target / denom) * shape;
  return pi;
}

// ---------------------------------------------------------------------------
// Data generation.
// ---------------------------------------------------------------------------

// What the generator knows and an estimator does not: the structural
// coefficients in coefficient order (endogenous first), the first-stage
// signal f_i = pi'Z_i, and the error moments.  Drives oracle criteria and
// coverage accounting.
struct TruthRecord {
  Eigen::VectorXd beta;      // (beta1, beta0)
  Eigen::VectorXd f;         // N-vector pi'Z_i
  Eigen::VectorXd pi;        // K first-stage coefficients
  double sigma2_eps = 1.0;
  double sigma_ueps = 0.0;
};

struct GeneratedData {
  DataSet data;
  TruthRecord truth;
};

// Draw order is part of the format: the instrument matrix (column-major),
// then eps, then the independent component of u.  Changing it changes every
// seeded artifact.
inline GeneratedData generate(const DgpConfig& cfg) {
  cfg.check();
  const Eigen::VectorXd pi = solve_pi(cfg);
  Rng rng(cfg.seed);

  Eigen::MatrixXd z = rng.normal_matrix(cfg.N, cfg.K);
  if (cfg.rho_z != 0.0) {
    Eigen::MatrixXd sigma =
        Eigen::MatrixXd::Constant(cfg.K, cfg.K, cfg.rho_z);
    sigma.diagonal().setOnes();
    const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
      throw NumericError("instrument covariance is not positive definite");
    z = z * Eigen::MatrixXd(llt.matrixL()).transpose();
  }

  const Eigen::VectorXd eps = rng.normal_vector(cfg.N);
  const Eigen::VectorXd e2 = rng.normal_vector(cfg.N);
  const Eigen::VectorXd u =
      cfg.sigma_ueps * eps +
      std::sqrt(1.0 - cfg.sigma_ueps * cfg.sigma_ueps) * e2;

  GeneratedData out;
  out.truth.pi = pi;
  out.truth.f = z * pi;
  out.truth.sigma_ueps = cfg.sigma_ueps;
  out.truth.beta = Eigen::Vector2d(cfg.beta1, cfg.beta0);

  DataSet& ds = out.data;
  ds.Z_excl = std::move(z);
  ds.Y_endo = out.truth.f + u;
  ds.X_exog = Eigen::MatrixXd::Ones(cfg.N, 1);
  ds.y = (cfg.beta0 + cfg.beta1 * ds.Y_endo.col(0).array() + eps.array())
             .matrix();
  ds.default_names();
  ds.y_name = "y";
  ds.endo_names = {"Y"};
  ds.exog_names = {"const"};
  return out;
}

// ---------------------------------------------------------------------------
// Method roster.
// ---------------------------------------------------------------------------

struct MethodSpec {
  Method method = Method::Ols;
  std::optional<int> fixed_k;  // CSA.j pins the subset size to j
  std::string label;
};

// Accepts OLS, 2SLS, DN, CSA, and CSA.<j> (case-insensitive); the label is
// normalized to the canonical spelling.
inline MethodSpec parse_method(const std::string& raw) {
  std::string name(raw);
  std::transform(name.begin(), name.end(), name.begin(),
                 [](unsigned char c) { return std::toupper(c); });
  if (name == "OLS") return {Method::Ols, std::nullopt, "OLS"};
  if (name == "2SLS") return {Method::Tsls, std::nullopt, "2SLS"};
  if (name == "DN") return {Method::Dn, std::nullopt, "DN"};
  if (name == "CSA") return {Method::Csa, std::nullopt, "CSA"};
  if (name.rfind("CSA.", 0) == 0) {
    const std::string digits = name.substr(4);
    if (!digits.empty() && digits.size() <= 6 &&
        std::all_of(digits.begin(), digits.end(),
                    [](unsigned char c) { return std::isdigit(c); })) {
      const int j = std::stoi(digits);
      if (j >= 1) return {Method::Csa, j, "CSA." + digits};
    }
  }
  throw ConfigError("unknown method '" + raw +
                    "' (expected OLS, 2SLS, DN, CSA, or CSA.<k>)");
}

inline std::vector<MethodSpec> default_methods() {
  return {parse_method("OLS"), parse_method("2SLS"), parse_method("DN"),
          parse_method("CSA")};
}

// ---------------------------------------------------------------------------
// Replication runner.
// ---------------------------------------------------------------------------

struct RunOptions {
  std::size_t subset_draws = kDefaultSubsetDraws;  // R per size when sampling
  bool exhaustive = false;                         // enumerate every size
  std::size_t enumeration_cap = kDefaultEnumerationCap;
  double level = 0.95;                             // CI level for coverage
  std::function<void(int, int)> progress;          // (done, total), serialized
};

struct MethodRow {
  std::string label;
  double mse = 0.0;
  double bias = 0.0;
  double mad = 0.0;
  double median_bias = 0.0;
  double range = 0.0;      // 90th minus 10th percentile of the estimates
  double coverage = 0.0;
  std::optional<double> mean_k;
  std::optional<double> median_k;
  int n_used = 0;
  int n_failed = 0;
};

struct SimulationReport {
  DgpConfig config;  // echo of the design (defaulted for custom generators)
  int reps = 0;
  std::vector<MethodRow> rows;
  std::vector<std::string> failures;  // "replication <r>: <method>: <why>"
};

// Linear-interpolation sample quantile between order statistics (the common
// spreadsheet/NumPy default).  Sorts its own copy.
inline double quantile_type7(std::vector<double> v, double p) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  p = std::clamp(p, 0.0, 1.0);
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - lo) * (v[lo + 1] - v[lo]);
}

namespace detail {

struct MethodOutcome {
  double beta1 = 0.0;
  double deviation = 0.0;  // beta1 minus the replication's true value
  bool covered = false;
  std::optional<double> k_hat;
};

struct RepOutcome {
  std::vector<std::optional<MethodOutcome>> per_method;
  std::vector<std::string> failures;
};

inline RepOutcome run_one_replication(const GeneratedData& g,
                                      const std::vector<MethodSpec>& methods,
                                      std::uint64_t rep_seed, int rep,
                                      const RunOptions& opt) {
  RepOutcome out;
  out.per_method.resize(methods.size());

  // Shared, lazily built inputs; a failure while building attributes to the
  // first method that needs the piece, and later methods retry so every
  // failing method gets its own audit line.
  std::shared_ptr<const InstrumentSpace> space;
  std::optional<ClusterPartition> part;
  std::optional<PreliminaryFit> pre;
  auto get_space = [&]() {
    if (!space) space = make_instrument_space(g.data);
    return space;
  };
  auto get_part = [&]() -> const ClusterPartition& {
    if (!part) part = ClusterPartition::from_dataset(g.data);
    return *part;
  };
  auto get_pre = [&]() -> const PreliminaryFit& {
    if (!pre) pre = preliminary_fit(get_space());
    return *pre;
  };

  for (std::size_t m = 0; m < methods.size(); ++m) {
    const MethodSpec& spec = methods[m];
    try {
      EstimationResult res;
      switch (spec.method) {
        case Method::Ols:
          res = ols(g.data);
          break;
        case Method::Tsls:
          res = tsls(get_space(), get_part());
          break;
        case Method::Dn:
          res = dn_baseline(get_space(), get_pre(),
                            Eigen::VectorXd::Unit(g.data.d(), 0), get_part());
          break;
        case Method::Csa: {
          CsaConfig cfg;
          cfg.subset_draws = opt.subset_draws;
          cfg.exhaustive = opt.exhaustive;
          cfg.enumeration_cap = opt.enumeration_cap;
          cfg.seed = rep_seed;
          cfg.fixed_k = spec.fixed_k;
          res = csa_2sls(get_space(), cfg, get_part());
          break;
        }
      }
      MethodOutcome rec;
      rec.beta1 = res.beta[0];
      rec.deviation = res.beta[0] - g.truth.beta[0];
      rec.covered =
          confidence_intervals(res, opt.level)[0].contains(g.truth.beta[0]);
      if (res.k_hat) rec.k_hat = static_cast<double>(*res.k_hat);
      out.per_method[m] = rec;
    } catch (const Error& e) {
      out.failures.push_back("replication " + std::to_string(rep) + ": " +
                             spec.label + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detail

// Runs `make(seed, rep)` for rep = 0..reps-1 with seed = master xor rep,
// estimates every method on each draw, and folds the per-replication records
// into one row per method.  Replication-indexed storage makes the report
// independent of the parallelism degree.  A method failing in more than 5% of
// replications aborts the run; below that, its failures are excluded from the
// aggregates and listed in the audit trail.
inline SimulationReport run_replications(
    const std::function<GeneratedData(std::uint64_t, int)>& make,
    std::uint64_t master, const std::vector<MethodSpec>& methods, int reps,
    int jobs, const RunOptions& opt = {}) {
  if (reps < 1) throw ConfigError("reps must be at least 1");
  if (methods.empty()) throw ConfigError("no methods requested");

  std::vector<detail::RepOutcome> recs(reps);
  std::atomic<int> next{0};
  std::atomic<bool> stop{false};
  std::mutex mu;
  std::exception_ptr fatal;
  int done = 0;

  auto worker = [&]() {
    while (!stop.load(std::memory_order_relaxed)) {
      const int r = next.fetch_add(1);
      if (r >= reps) return;
      try {
        const auto rep_seed = master ^ static_cast<std::uint64_t>(r);
        const GeneratedData g = make(rep_seed, r);
        recs[r] =
            detail::run_one_replication(g, methods, rep_seed, r, opt);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!fatal) fatal = std::current_exception();
        stop.store(true);
        return;
      }
      std::lock_guard<std::mutex> lock(mu);
      ++done;
      if (opt.progress) opt.progress(done, reps);
    }
  };

  const int workers = std::max(1, std::min(jobs, reps));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  SimulationReport report;
  report.reps = reps;
  for (const auto& rec : recs)
    for (const auto& line : rec.failures) report.failures.push_back(line);

  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<double> b, dev, ks;
    int covered = 0;
    for (const auto& rec : recs) {
      if (!rec.per_method[m]) continue;
      const detail::MethodOutcome& o = *rec.per_method[m];
      b.push_back(o.beta1);
      dev.push_back(o.deviation);
      if (o.covered) ++covered;
      if (o.k_hat) ks.push_back(*o.k_hat);
    }
    MethodRow row;
    row.label = methods[m].label;
    row.n_used = static_cast<int>(b.size());
    row.n_failed = reps - row.n_used;
    if (row.n_failed > 0.05 * reps)
      throw NumericError(row.label + " failed in " +
                         std::to_string(row.n_failed) + " of " +
                         std::to_string(reps) + " replications (limit 5%)");
    double sum = 0.0, sum2 = 0.0;
    for (double d : dev) {
      sum += d;
      sum2 += d * d;
    }
    row.mse = sum2 / row.n_used;
    row.bias = sum / row.n_used;
    row.median_bias = quantile_type7(dev, 0.5);
    const double med = quantile_type7(b, 0.5);
    std::vector<double> absdev(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) absdev[i] = std::abs(b[i] - med);
    row.mad = quantile_type7(absdev, 0.5);
    row.range = quantile_type7(b, 0.9) - quantile_type7(b, 0.1);
    row.coverage = static_cast<double>(covered) / row.n_used;
    if (!ks.empty()) {
      double ksum = 0.0;
      for (double k : ks) ksum += k;
      row.mean_k = ksum / static_cast<double>(ks.size());
      row.median_k = quantile_type7(ks, 0.5);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// Monte Carlo comparison of the requested estimators on one design cell.
inline SimulationReport run_design(const DgpConfig& cfg,
                                   const std::vector<MethodSpec>& methods,
                                   int reps, int jobs,
                                   const RunOptions& opt = {}) {
  cfg.check();
  auto make = [&cfg](std::uint64_t rep_seed, int) {
    DgpConfig local = cfg;
    local.seed = rep_seed;
    return generate(local);
  };
  SimulationReport report =
      run_replications(make, cfg.seed, methods, reps, jobs, opt);
  report.config = cfg;
  return report;
}

}  // namespace csa
