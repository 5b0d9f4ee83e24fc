#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csa/simulation.hpp"

namespace {

double corr(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ac = a.array() - a.mean();
  const Eigen::VectorXd bc = b.array() - b.mean();
  return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

// Sample R^2 of the first-stage regression of the endogenous column on
// [Z, const], via plain least squares.
double first_stage_r2(const csa::DataSet& ds) {
  const int n = ds.n();
  Eigen::MatrixXd design(n, ds.K() + 1);
  design.leftCols(ds.K()) = ds.Z_excl;
  design.col(ds.K()).setOnes();
  const Eigen::VectorXd yv = ds.Y_endo.col(0);
  const Eigen::VectorXd coef = design.colPivHouseholderQr().solve(yv);
  const double rss = (yv - design * coef).squaredNorm();
  const double tss = (yv.array() - yv.mean()).matrix().squaredNorm();
  return 1.0 - rss / tss;
}

// Hand-built replication cell where OLS is exact in floating point:
// Y = (1,-1,1,-1), constant column, y = slope * Y.  X'X = 4*I, so the
// eigen-solve returns the coefficients without rounding, residuals are
// bitwise zero, and the confidence interval degenerates to a point.
csa::GeneratedData exact_ols_cell(double slope) {
  csa::GeneratedData g;
  csa::DataSet& ds = g.data;
  ds.y.resize(4);
  ds.Y_endo.resize(4, 1);
  ds.Y_endo << 1, -1, 1, -1;
  ds.X_exog = Eigen::MatrixXd::Ones(4, 1);
  ds.Z_excl = ds.Y_endo;
  ds.y = slope * ds.Y_endo.col(0);
  ds.default_names();
  g.truth.beta = Eigen::Vector2d(0.125, 0.0);
  g.truth.f = ds.Y_endo.col(0);
  g.truth.pi = Eigen::VectorXd::Ones(1);
  g.truth.sigma_ueps = 0.0;
  return g;
}

}  // namespace

TEST_CASE("solve_pi flat matches the closed form for every instrument") {
  csa::DgpConfig cfg;
  cfg.N = 100;
  cfg.K = 20;
  cfg.rho_z = 0.0;
  cfg.rf2 = 0.1;
  cfg.signal = csa::Signal::Flat;

  const Eigen::VectorXd pi = csa::solve_pi(cfg);
  REQUIRE(pi.size() == 20);
  const double expect = std::sqrt(0.1 / (20.0 * 0.9));
  for (int k = 0; k < 20; ++k) REQUIRE(pi[k] == Catch::Approx(expect).epsilon(1e-12));
  REQUIRE(pi[0] == Catch::Approx(0.074536).margin(5e-7));

  // The flat normalization deliberately ignores rho_z (documented convention),
  // so the coefficients are unchanged when the instruments are correlated and
  // the population R^2 identity is exact only at rho_z = 0.
  csa::DgpConfig corr_cfg = cfg;
  corr_cfg.rho_z = 0.5;
  const Eigen::VectorXd pi_corr = csa::solve_pi(corr_cfg);
  REQUIRE((pi_corr - pi).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(csa::population_rf2(pi, 0.0) == Catch::Approx(0.1).epsilon(1e-12));
  REQUIRE(csa::population_rf2(pi, 0.5) > 0.1);
}

TEST_CASE("solve_pi decreasing has the quartic shape and round-trips the R2") {
  csa::DgpConfig cfg;
  cfg.N = 100;
  cfg.K = 10;
  cfg.rho_z = 0.5;
  cfg.rf2 = 0.1;
  cfg.signal = csa::Signal::Decreasing;

  const Eigen::VectorXd pi = csa::solve_pi(cfg);
  REQUIRE(pi.size() == 10);
  for (int k = 1; k < 10; ++k) REQUIRE(pi[k] < pi[k - 1]);
  for (int k = 0; k < 10; ++k) {
    const double shape = std::pow(1.0 - (k + 1) / 11.0, 4);
    const double base = std::pow(1.0 - 1.0 / 11.0, 4);
    REQUIRE(pi[k] / pi[0] == Catch::Approx(shape / base).epsilon(1e-12));
  }
  REQUIRE(csa::population_rf2(pi, cfg.rho_z) == Catch::Approx(0.1).epsilon(1e-12));

  cfg.rho_z = 0.0;
  REQUIRE(csa::population_rf2(csa::solve_pi(cfg), 0.0) ==
          Catch::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("solve_pi half-zero zeroes the leading half and round-trips the R2") {
  csa::DgpConfig cfg;
  cfg.N = 100;
  cfg.K = 20;
  cfg.rho_z = 0.5;
  cfg.rf2 = 0.1;
  cfg.signal = csa::Signal::HalfZero;

  const Eigen::VectorXd pi = csa::solve_pi(cfg);
  REQUIRE(pi.size() == 20);
  for (int k = 0; k < 10; ++k) REQUIRE(pi[k] == 0.0);
  for (int k = 10; k < 20; ++k) REQUIRE(pi[k] > 0.0);
  REQUIRE(csa::population_rf2(pi, cfg.rho_z) == Catch::Approx(0.1).epsilon(1e-12));

  // The nonzero block is exactly the decreasing design on K/2 instruments:
  // same quartic shape, same denominator, and the normalization sums only
  // over nonzero positions.
  csa::DgpConfig half = cfg;
  half.K = 10;
  half.signal = csa::Signal::Decreasing;
  const Eigen::VectorXd dec = csa::solve_pi(half);
  REQUIRE((pi.tail(10) - dec).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("solve_pi returns the zero vector when rf2 is zero") {
  csa::DgpConfig cfg;
  cfg.N = 50;
  cfg.K = 6;
  cfg.rf2 = 0.0;
  for (csa::Signal s :
       {csa::Signal::Flat, csa::Signal::Decreasing, csa::Signal::HalfZero}) {
    cfg.signal = s;
    const Eigen::VectorXd pi = csa::solve_pi(cfg);
    REQUIRE(pi.size() == 6);
    REQUIRE(pi.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("config validation rejects out-of-range fields") {
  csa::DgpConfig good;
  good.N = 50;
  good.K = 5;
  REQUIRE_NOTHROW(good.check());

  auto expect_reject = [&](auto&& tweak) {
    csa::DgpConfig bad = good;
    tweak(bad);
    REQUIRE_THROWS_AS(bad.check(), csa::ConfigError);
  };
  expect_reject([](csa::DgpConfig& c) { c.N = 2; });
  expect_reject([](csa::DgpConfig& c) { c.K = 0; });
  expect_reject([](csa::DgpConfig& c) { c.rho_z = -0.1; });
  expect_reject([](csa::DgpConfig& c) { c.rho_z = 1.0; });
  expect_reject([](csa::DgpConfig& c) { c.rho_z = 1.2; });
  expect_reject([](csa::DgpConfig& c) { c.sigma_ueps = 1.0; });
  expect_reject([](csa::DgpConfig& c) { c.sigma_ueps = -1.0; });
  expect_reject([](csa::DgpConfig& c) { c.rf2 = 1.0; });
  expect_reject([](csa::DgpConfig& c) { c.rf2 = -0.05; });
  expect_reject([](csa::DgpConfig& c) {
    c.signal = csa::Signal::HalfZero;
    c.K = 1;
  });
  expect_reject([](csa::DgpConfig& c) { c.beta1 = std::nan(""); });
}

TEST_CASE("generate is deterministic in the seed and shapes the dataset") {
  csa::DgpConfig cfg;
  cfg.N = 40;
  cfg.K = 5;
  cfg.rho_z = 0.3;
  cfg.sigma_ueps = 0.6;
  cfg.rf2 = 0.2;
  cfg.signal = csa::Signal::Decreasing;
  cfg.seed = 2024;

  const csa::GeneratedData a = csa::generate(cfg);
  const csa::GeneratedData b = csa::generate(cfg);
  REQUIRE((a.data.y - b.data.y).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.data.Z_excl - b.data.Z_excl).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.data.Y_endo - b.data.Y_endo).cwiseAbs().maxCoeff() == 0.0);

  csa::DgpConfig other = cfg;
  other.seed = 2025;
  const csa::GeneratedData c = csa::generate(other);
  REQUIRE((a.data.y - c.data.y).cwiseAbs().maxCoeff() > 0.0);

  REQUIRE(a.data.n() == 40);
  REQUIRE(a.data.d1() == 1);
  REQUIRE(a.data.d2() == 1);
  REQUIRE(a.data.K() == 5);
  REQUIRE((a.data.X_exog.array() == 1.0).all());
  REQUIRE(csa::validate(a.data).empty());

  // Truth record: coefficient order is endogenous first, f = Z pi.
  REQUIRE(a.truth.beta.size() == 2);
  REQUIRE(a.truth.beta[0] == 0.1);
  REQUIRE(a.truth.beta[1] == 0.0);
  REQUIRE(a.truth.sigma2_eps == 1.0);
  REQUIRE(a.truth.sigma_ueps == 0.6);
  const Eigen::VectorXd f = a.data.Z_excl * a.truth.pi;
  REQUIRE((a.truth.f - f).cwiseAbs().maxCoeff() < 1e-14);

  // y = beta0 + beta1 * Y + eps holds with the recoverable eps ~ N(0,1).
  csa::DgpConfig shifted = cfg;
  shifted.beta0 = 5.0;
  const csa::GeneratedData d = csa::generate(shifted);
  const Eigen::VectorXd eps =
      d.data.y - 5.0 * Eigen::VectorXd::Ones(40) - 0.1 * d.data.Y_endo.col(0);
  REQUIRE(eps.cwiseAbs().maxCoeff() < 10.0);
  REQUIRE(d.truth.beta[1] == 5.0);
}

TEST_CASE("generate reproduces the design moments at large N") {
  const int big = 100000;

  SECTION("independent errors when sigma_ueps is zero") {
    csa::DgpConfig cfg;
    cfg.N = big;
    cfg.K = 3;
    cfg.sigma_ueps = 0.0;
    cfg.rf2 = 0.1;
    cfg.seed = 7;
    const csa::GeneratedData g = csa::generate(cfg);
    const Eigen::VectorXd eps = g.data.y - 0.1 * g.data.Y_endo.col(0);
    const Eigen::VectorXd u = g.data.Y_endo.col(0) - g.truth.f;
    REQUIRE(std::abs(corr(u, eps)) < 0.01);
  }

  SECTION("errors carry the configured covariance") {
    csa::DgpConfig cfg;
    cfg.N = big;
    cfg.K = 3;
    cfg.sigma_ueps = 0.9;
    cfg.rf2 = 0.1;
    cfg.seed = 8;
    const csa::GeneratedData g = csa::generate(cfg);
    const Eigen::VectorXd eps = g.data.y - 0.1 * g.data.Y_endo.col(0);
    const Eigen::VectorXd u = g.data.Y_endo.col(0) - g.truth.f;
    REQUIRE(corr(u, eps) == Catch::Approx(0.9).margin(0.01));
    REQUIRE(eps.squaredNorm() / big == Catch::Approx(1.0).margin(0.02));
    REQUIRE(u.squaredNorm() / big == Catch::Approx(1.0).margin(0.02));
  }

  SECTION("instruments are equicorrelated at rho_z") {
    csa::DgpConfig cfg;
    cfg.N = big;
    cfg.K = 3;
    cfg.rho_z = 0.5;
    cfg.rf2 = 0.1;
    cfg.seed = 9;
    const csa::GeneratedData g = csa::generate(cfg);
    for (int a = 0; a < 3; ++a) {
      REQUIRE(g.data.Z_excl.col(a).squaredNorm() / big ==
              Catch::Approx(1.0).margin(0.02));
      for (int b = a + 1; b < 3; ++b)
        REQUIRE(corr(g.data.Z_excl.col(a), g.data.Z_excl.col(b)) ==
                Catch::Approx(0.5).margin(0.01));
    }
  }

  SECTION("first-stage R2 matches rf2") {
    csa::DgpConfig cfg;
    cfg.N = big;
    cfg.K = 10;
    cfg.rho_z = 0.5;
    cfg.rf2 = 0.1;
    cfg.signal = csa::Signal::Decreasing;
    cfg.seed = 10;
    REQUIRE(first_stage_r2(csa::generate(cfg).data) ==
            Catch::Approx(0.1).margin(0.01));

    cfg.signal = csa::Signal::Flat;
    cfg.rho_z = 0.0;
    cfg.seed = 11;
    REQUIRE(first_stage_r2(csa::generate(cfg).data) ==
            Catch::Approx(0.1).margin(0.01));
  }
}

TEST_CASE("quantile_type7 interpolates linearly between order statistics") {
  std::vector<double> v{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};  // sorted internally
  REQUIRE(csa::quantile_type7(v, 0.1) == Catch::Approx(0.9).epsilon(1e-15));
  REQUIRE(csa::quantile_type7(v, 0.9) == Catch::Approx(8.1).epsilon(1e-15));
  REQUIRE(csa::quantile_type7(v, 0.0) == 0.0);
  REQUIRE(csa::quantile_type7(v, 1.0) == 9.0);

  std::vector<double> w{1, 2, 3, 4};
  REQUIRE(csa::quantile_type7(w, 0.5) == Catch::Approx(2.5).epsilon(1e-15));

  std::vector<double> one{3.5};
  REQUIRE(csa::quantile_type7(one, 0.25) == 3.5);
}

TEST_CASE("parse_method accepts canonical labels and fixed-k variants") {
  REQUIRE(csa::parse_method("OLS").method == csa::Method::Ols);
  REQUIRE(csa::parse_method("ols").label == "OLS");
  REQUIRE(csa::parse_method("2SLS").method == csa::Method::Tsls);
  REQUIRE(csa::parse_method("DN").method == csa::Method::Dn);
  REQUIRE(csa::parse_method("CSA").method == csa::Method::Csa);
  REQUIRE_FALSE(csa::parse_method("CSA").fixed_k.has_value());

  const csa::MethodSpec one = csa::parse_method("CSA.1");
  REQUIRE(one.method == csa::Method::Csa);
  REQUIRE(one.fixed_k == 1);
  REQUIRE(one.label == "CSA.1");
  REQUIRE(csa::parse_method("csa.3").fixed_k == 3);

  REQUIRE_THROWS_AS(csa::parse_method("KO"), csa::ConfigError);
  REQUIRE_THROWS_AS(csa::parse_method("CSA.0"), csa::ConfigError);
  REQUIRE_THROWS_AS(csa::parse_method("CSA.x"), csa::ConfigError);
  REQUIRE_THROWS_AS(csa::parse_method(""), csa::ConfigError);

  const auto defaults = csa::default_methods();
  REQUIRE(defaults.size() == 4);
  REQUIRE(defaults[0].label == "OLS");
  REQUIRE(defaults[1].label == "2SLS");
  REQUIRE(defaults[2].label == "DN");
  REQUIRE(defaults[3].label == "CSA");
}

TEST_CASE("run_replications computes the documented metrics exactly") {
  // Three exact replications with OLS slopes 0.125, 0.250, 0.375 against the
  // fixed truth 0.125 pin every aggregation convention:
  //   bias       = mean - truth           = 0.125
  //   median bias= median - truth         = 0.125
  //   MAD        = median |b - median(b)| = 0.125
  //   MSE        = mean squared error     = 0.078125 / 3
  //   range      = q90 - q10 (type 7)     = 0.35 - 0.15
  //   coverage   = point CI covers truth only in replication 0 -> 1/3
  auto make = [](std::uint64_t, int rep) {
    return exact_ols_cell(0.125 * (rep + 1));
  };
  const csa::SimulationReport rep = csa::run_replications(
      make, 99, {csa::parse_method("OLS")}, 3, 1, {});

  REQUIRE(rep.reps == 3);
  REQUIRE(rep.rows.size() == 1);
  const csa::MethodRow& row = rep.rows[0];
  REQUIRE(row.label == "OLS");
  REQUIRE(row.n_used == 3);
  REQUIRE(row.n_failed == 0);
  REQUIRE(row.bias == Catch::Approx(0.125).epsilon(1e-15));
  REQUIRE(row.median_bias == Catch::Approx(0.125).epsilon(1e-15));
  REQUIRE(row.mad == Catch::Approx(0.125).epsilon(1e-15));
  REQUIRE(row.mse == Catch::Approx(0.078125 / 3.0).epsilon(1e-15));
  REQUIRE(row.range == Catch::Approx(0.2).epsilon(1e-12));
  REQUIRE(row.coverage == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  REQUIRE_FALSE(row.mean_k.has_value());
  REQUIRE_FALSE(row.median_k.has_value());
}

TEST_CASE("run_replications on noiseless data gives zero error and coverage 1") {
  auto make = [](std::uint64_t, int) { return exact_ols_cell(0.125); };
  const csa::SimulationReport rep = csa::run_replications(
      make, 1, {csa::parse_method("OLS")}, 1, 1, {});
  REQUIRE(rep.rows[0].mse == 0.0);
  REQUIRE(rep.rows[0].bias == 0.0);
  REQUIRE(rep.rows[0].mad == 0.0);
  REQUIRE(rep.rows[0].range == 0.0);
  REQUIRE(rep.rows[0].coverage == 1.0);
}

TEST_CASE("run_replications records and excludes failures under the threshold") {
  csa::DgpConfig cfg;
  cfg.N = 60;
  cfg.K = 4;
  cfg.rho_z = 0.0;
  cfg.sigma_ueps = 0.5;
  cfg.rf2 = 0.3;
  // Replication 5 has its instruments zeroed out: the projection-based
  // methods lose identification there while OLS is unaffected.
  auto make = [&cfg](std::uint64_t seed, int rep) {
    csa::DgpConfig local = cfg;
    local.seed = seed;
    csa::GeneratedData g = csa::generate(local);
    if (rep == 5) g.data.Z_excl.setZero();
    return g;
  };
  csa::RunOptions opt;
  opt.exhaustive = true;
  const std::vector<csa::MethodSpec> methods{csa::parse_method("OLS"),
                                             csa::parse_method("2SLS")};
  const csa::SimulationReport rep =
      csa::run_replications(make, 4242, methods, 30, 1, opt);

  REQUIRE(rep.rows[0].label == "OLS");
  REQUIRE(rep.rows[0].n_used == 30);
  REQUIRE(rep.rows[0].n_failed == 0);
  REQUIRE(rep.rows[1].label == "2SLS");
  REQUIRE(rep.rows[1].n_used == 29);
  REQUIRE(rep.rows[1].n_failed == 1);
  REQUIRE(rep.failures.size() == 1);
  REQUIRE(rep.failures[0].find("2SLS") != std::string::npos);
  REQUIRE(rep.failures[0].find("replication 5") != std::string::npos);
}

TEST_CASE("run_replications aborts when more than five percent fail") {
  csa::DgpConfig cfg;
  cfg.N = 60;
  cfg.K = 4;
  cfg.sigma_ueps = 0.5;
  cfg.rf2 = 0.3;
  auto make = [&cfg](std::uint64_t seed, int rep) {
    csa::DgpConfig local = cfg;
    local.seed = seed;
    csa::GeneratedData g = csa::generate(local);
    if (rep % 2 == 0) g.data.Z_excl.setZero();
    return g;
  };
  REQUIRE_THROWS_AS(csa::run_replications(make, 1, {csa::parse_method("2SLS")},
                                          10, 1, {}),
                    csa::NumericError);
  REQUIRE_THROWS_WITH(csa::run_replications(make, 1, {csa::parse_method("2SLS")},
                                            10, 1, {}),
                      Catch::Matchers::ContainsSubstring("5 of 10"));
}

TEST_CASE("run_design end to end on a small design") {
  csa::DgpConfig cfg;
  cfg.N = 60;
  cfg.K = 4;
  cfg.rho_z = 0.2;
  cfg.sigma_ueps = 0.5;
  cfg.rf2 = 0.3;
  cfg.signal = csa::Signal::Flat;
  cfg.seed = 314159;

  const std::vector<csa::MethodSpec> methods{
      csa::parse_method("OLS"), csa::parse_method("2SLS"),
      csa::parse_method("DN"), csa::parse_method("CSA"),
      csa::parse_method("CSA.1")};
  csa::RunOptions opt;
  opt.exhaustive = true;

  const csa::SimulationReport rep = csa::run_design(cfg, methods, 30, 1, opt);
  REQUIRE(rep.reps == 30);
  REQUIRE(rep.config.seed == 314159);
  REQUIRE(rep.rows.size() == 5);

  for (const csa::MethodRow& row : rep.rows) {
    REQUIRE(row.n_used == 30);
    REQUIRE(row.coverage >= 0.0);
    REQUIRE(row.coverage <= 1.0);
    REQUIRE(row.mse >= row.bias * row.bias - 1e-12);  // Jensen
    REQUIRE(std::isfinite(row.mad));
    REQUIRE(std::isfinite(row.range));
  }
  REQUIRE_FALSE(rep.rows[0].mean_k.has_value());  // OLS
  REQUIRE_FALSE(rep.rows[1].mean_k.has_value());  // 2SLS
  REQUIRE(rep.rows[2].mean_k.has_value());        // DN
  REQUIRE(rep.rows[3].mean_k.has_value());        // CSA
  REQUIRE(*rep.rows[2].mean_k >= 1.0);
  REQUIRE(*rep.rows[2].mean_k <= 4.0);
  REQUIRE(*rep.rows[3].mean_k >= 1.0);
  REQUIRE(*rep.rows[3].mean_k <= 4.0);
  REQUIRE(*rep.rows[4].mean_k == 1.0);    // CSA.1 pins k
  REQUIRE(*rep.rows[4].median_k == 1.0);

  // OLS is badly biased under strong endogeneity; CSA corrects toward truth.
  REQUIRE(std::abs(rep.rows[0].bias) > std::abs(rep.rows[3].bias));

  SECTION("bit-identical rerun under the same master seed") {
    const csa::SimulationReport again = csa::run_design(cfg, methods, 30, 1, opt);
    for (std::size_t m = 0; m < rep.rows.size(); ++m) {
      REQUIRE(rep.rows[m].mse == again.rows[m].mse);
      REQUIRE(rep.rows[m].bias == again.rows[m].bias);
      REQUIRE(rep.rows[m].mad == again.rows[m].mad);
      REQUIRE(rep.rows[m].median_bias == again.rows[m].median_bias);
      REQUIRE(rep.rows[m].range == again.rows[m].range);
      REQUIRE(rep.rows[m].coverage == again.rows[m].coverage);
    }
  }

  SECTION("report is invariant to the parallelism degree") {
    const csa::SimulationReport par = csa::run_design(cfg, methods, 30, 3, opt);
    for (std::size_t m = 0; m < rep.rows.size(); ++m) {
      REQUIRE(rep.rows[m].mse == par.rows[m].mse);
      REQUIRE(rep.rows[m].coverage == par.rows[m].coverage);
      REQUIRE(rep.rows[m].range == par.rows[m].range);
      if (rep.rows[m].mean_k)
        REQUIRE(*rep.rows[m].mean_k == *par.rows[m].mean_k);
    }
  }

  SECTION("progress callback sees every replication") {
    int calls = 0;
    int last = 0;
    csa::RunOptions watched = opt;
    watched.progress = [&](int done, int total) {
      ++calls;
      last = done;
      REQUIRE(total == 30);
    };
    csa::run_design(cfg, methods, 30, 1, watched);
    REQUIRE(calls == 30);
    REQUIRE(last == 30);
  }
}
