#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include <csa/dataset.hpp>
#include <csa/errors.hpp>
#include <csa/rng.hpp>

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream out(p);
  out << body;
  return p;
}

csa::DatasetSchema demo_schema() {
  csa::DatasetSchema s;
  s.outcome = "y";
  s.endogenous = {"Y1"};
  s.exogenous = {"x1"};
  s.instruments = {"z1", "z2"};
  s.cluster = "cl";
  return s;
}

}  // namespace

TEST_CASE("load_csv: values, shapes and column mapping") {
  const auto p = write_temp("csa_ds_basic.csv",
                            "z2,y,Y1,cl,x1,z1\n"
                            "0.5,1.0,2.0,b,1.0,-0.25\n"
                            "1.5,2.0,3.0,a,1.0,0.75\n"
                            "2.5,3.0,4.0,b,1.0,1.25\n"
                            "3.5,4.0,5.0,c,1.0,2.25\n");
  const auto ds = csa::load_csv(p.string(), demo_schema());
  CHECK(ds.n() == 4);
  CHECK(ds.d1() == 1);
  CHECK(ds.d2() == 1);
  CHECK(ds.K() == 2);
  CHECK(ds.d() == 2);
  // columns follow the schema listing, not file order
  CHECK(ds.y(2) == 3.0);
  CHECK(ds.Y_endo(1, 0) == 3.0);
  CHECK(ds.X_exog(3, 0) == 1.0);
  CHECK(ds.Z_excl(0, 0) == -0.25);  // z1 first per schema
  CHECK(ds.Z_excl(0, 1) == 0.5);
  // X = [endogenous | exogenous]
  const Eigen::MatrixXd X = ds.X();
  CHECK(X(0, 0) == 2.0);
  CHECK(X(0, 1) == 1.0);
  // cluster labels -> contiguous ids in first-appearance order
  REQUIRE(ds.cluster.size() == 4);
  CHECK(ds.cluster[0] == 0);
  CHECK(ds.cluster[1] == 1);
  CHECK(ds.cluster[2] == 0);
  CHECK(ds.cluster[3] == 2);
  REQUIRE(ds.cluster_labels.size() == 3);
  CHECK(ds.cluster_labels[0] == "b");
  CHECK(ds.cluster_labels[1] == "a");
  CHECK(ds.cluster_labels[2] == "c");
  CHECK(csa::validate(ds).empty());
}

TEST_CASE("load_csv: non-numeric and non-finite cells are rejected with location") {
  const auto schema = [] {
    csa::DatasetSchema s;
    s.outcome = "y";
    s.endogenous = {"Y1"};
    s.instruments = {"z1"};
    return s;
  }();
  const auto p1 = write_temp("csa_ds_nan.csv", "y,Y1,z1\n1,2,3\n1,NaN,3\n1,2,3\n");
  try {
    csa::load_csv(p1.string(), schema);
    FAIL("expected DataError");
  } catch (const csa::DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("Y1") != std::string::npos);
    CHECK(msg.find("3") != std::string::npos);  // file line of the bad cell
  }
  const auto p2 = write_temp("csa_ds_text.csv", "y,Y1,z1\n1,2,3\n1,2,oops\n1,2,3\n");
  CHECK_THROWS_AS(csa::load_csv(p2.string(), schema), csa::DataError);
  const auto p3 = write_temp("csa_ds_inf.csv", "y,Y1,z1\n1,2,3\n1,2,inf\n1,2,3\n");
  CHECK_THROWS_AS(csa::load_csv(p3.string(), schema), csa::DataError);
}

TEST_CASE("load_csv: missing schema column is a config error naming it") {
  const auto p = write_temp("csa_ds_missing.csv", "y,Y1,z1\n1,2,3\n4,5,6\n7,8,9\n");
  auto s = demo_schema();
  s.exogenous.clear();
  s.cluster.reset();
  try {
    csa::load_csv(p.string(), s);
    FAIL("expected ConfigError");
  } catch (const csa::ConfigError& e) {
    CHECK(std::string(e.what()).find("z2") != std::string::npos);
  }
}

TEST_CASE("load_csv: too few rows for the coefficient count") {
  auto s = demo_schema();
  s.cluster.reset();
  const auto p = write_temp("csa_ds_small.csv",
                            "y,Y1,x1,z1,z2\n1,2,1,3,4\n2,3,1,4,5\n");
  CHECK_THROWS_AS(csa::load_csv(p.string(), s), csa::DataError);
}

TEST_CASE("load_csv: ragged row is rejected with its line number") {
  auto s = demo_schema();
  s.exogenous.clear();
  s.cluster.reset();
  s.instruments = {"z1"};
  const auto p = write_temp("csa_ds_ragged.csv", "y,Y1,z1\n1,2,3\n1,2\n1,2,3\n");
  try {
    csa::load_csv(p.string(), s);
    FAIL("expected DataError");
  } catch (const csa::DataError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("DatasetSchema: role overlap and malformed JSON are config errors") {
  auto s = demo_schema();
  s.instruments = {"z1", "Y1"};  // endogenous reused as instrument
  CHECK_THROWS_AS(s.check(), csa::ConfigError);

  CHECK_THROWS_AS(csa::DatasetSchema::from_json(nlohmann::json{{"endogenous", {"Y"}}}),
                  csa::ConfigError);  // no outcome

  const auto ok = csa::DatasetSchema::from_json(nlohmann::json{
      {"outcome", "y"},
      {"endogenous", {"Y1"}},
      {"instruments", {"z1", "z2"}}});
  CHECK(ok.outcome == "y");
  CHECK(ok.exogenous.empty());
  CHECK_FALSE(ok.cluster.has_value());
}

TEST_CASE("validate: reports order condition and shape problems") {
  csa::DataSet ds;
  ds.y = Eigen::VectorXd::LinSpaced(6, 0.0, 1.0);
  ds.Y_endo = Eigen::MatrixXd::Random(6, 2);
  ds.X_exog = Eigen::MatrixXd::Ones(6, 1);
  ds.Z_excl = Eigen::MatrixXd::Random(6, 1);  // K=1 < d1=2
  auto diags = csa::validate(ds);
  REQUIRE_FALSE(diags.empty());
  bool order = false;
  for (const auto& d : diags) order = order || d.code == "order_condition";
  CHECK(order);

  csa::DataSet bad = ds;
  bad.Z_excl = Eigen::MatrixXd::Random(5, 3);  // row mismatch
  bool rows = false;
  for (const auto& d : csa::validate(bad)) rows = rows || d.code == "row_mismatch";
  CHECK(rows);

  csa::DataSet nonfin = ds;
  nonfin.Z_excl = Eigen::MatrixXd::Random(6, 3);
  nonfin.Y_endo(2, 1) = std::nan("");
  bool fin = false;
  for (const auto& d : csa::validate(nonfin)) fin = fin || d.code == "non_finite";
  CHECK(fin);
}

TEST_CASE("write_csv / load_csv round trip preserves doubles exactly") {
  csa::Rng rng(314);
  csa::DataSet ds;
  const int n = 17;
  ds.y = rng.normal_vector(n) * 1e-7;
  ds.Y_endo = rng.normal_matrix(n, 2);
  ds.X_exog = rng.normal_matrix(n, 1) * 1e9;
  ds.Z_excl = rng.normal_matrix(n, 3);
  ds.y[3] = 1.0 / 3.0;
  ds.Z_excl(5, 2) = 1e-300;
  ds.default_names();
  const auto p = std::filesystem::temp_directory_path() / "csa_ds_rt.csv";
  csa::write_csv(ds, p.string());

  csa::DatasetSchema s;
  s.outcome = ds.y_name;
  s.endogenous = ds.endo_names;
  s.exogenous = ds.exog_names;
  s.instruments = ds.instr_names;
  const auto back = csa::load_csv(p.string(), s);
  REQUIRE(back.n() == ds.n());
  CHECK((back.y - ds.y).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.Y_endo - ds.Y_endo).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.X_exog - ds.X_exog).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.Z_excl - ds.Z_excl).cwiseAbs().maxCoeff() == 0.0);
}
