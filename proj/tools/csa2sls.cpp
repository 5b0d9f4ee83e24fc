// Command-line surface for the CSA-2SLS library.
//
//   csa2sls estimate   --data d.csv --schema s.json [...]   real-data fits
//   csa2sls simulate   --config sweep.json [...]            Monte Carlo sweeps
//   csa2sls criterion  --data d.csv --schema s.json [...]   selection curve
//
// Every command accepts --config <file.json> whose keys mirror the flags;
// explicit flags win over file values.  Unknown config keys are rejected.
// Runs are reproducible from the log line: library version, a hash of the
// effective configuration, and the master seed are printed to stderr and
// embedded in every artifact.  Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 numerical failure.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csa/csa.hpp"

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Small utilities.
// ---------------------------------------------------------------------------

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

// FNV-1a over the canonical dump of the effective configuration.  Paths are
// hashed as given; the hash pins the run given identical input files.
std::string config_hash(const json& effective) {
  const std::string s = effective.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_cell(double v, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%*.6g", width, v);
  return buf;
}

std::string fmt_blank(int width) { return std::string(width, ' '); }

json parse_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in)
    throw csa::ConfigError(std::string("cannot open ") + what + " file '" +
                           path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw csa::ConfigError(std::string(what) + " file '" + path +
                           "' is not valid JSON: " + one_line(e.what()));
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object())
    throw csa::ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known)
      throw csa::ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T jget(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw csa::ConfigError(where + ": key '" + key + "': " +
                           one_line(e.what()));
  }
}

// "all" or a positive integer; returns (draws, exhaustive).
std::pair<std::size_t, bool> parse_subsets_r(const std::string& raw) {
  if (raw == "all") return {0, true};
  if (!raw.empty() &&
      std::all_of(raw.begin(), raw.end(),
                  [](unsigned char c) { return std::isdigit(c); }) &&
      raw.size() <= 9) {
    const long v = std::stol(raw);
    if (v >= 1) return {static_cast<std::size_t>(v), false};
  }
  throw csa::ConfigError("--subsets-R expects a positive integer or 'all', got '" +
                         raw + "'");
}

std::pair<std::size_t, bool> subsets_r_from_json(const json& v,
                                                 const std::string& where) {
  if (v.is_string()) return parse_subsets_r(v.get<std::string>());
  if (v.is_number_integer() && v.get<long>() >= 1)
    return {static_cast<std::size_t>(v.get<long>()), false};
  throw csa::ConfigError(where +
                         ": 'subsets_R' expects a positive integer or \"all\"");
}

// ---------------------------------------------------------------------------
// Shared dataset loading.
// ---------------------------------------------------------------------------

struct LoadedData {
  csa::DatasetSchema schema;
  csa::DataSet ds;
};

LoadedData load_dataset(const std::string& data_path, const json& schema_json,
                        const std::optional<std::string>& cluster_override) {
  LoadedData out;
  out.schema = csa::DatasetSchema::from_json(schema_json);
  if (cluster_override) {
    out.schema.cluster = *cluster_override;
    out.schema.check();
  }
  out.ds = csa::load_csv(data_path, out.schema);
  const auto diags = csa::validate(out.ds);
  if (!diags.empty()) {
    std::string msg = "'" + data_path + "':";
    for (const auto& d : diags) msg += " [" + d.code + "] " + d.message + ";";
    msg.pop_back();
    throw csa::DataError(msg);
  }
  return out;
}

void log_run(const char* command, const std::string& hash,
             std::uint64_t seed) {
  std::fprintf(stderr, "csa2sls %s: command=%s config_hash=%s seed=%llu\n",
               csa::kVersion, command, hash.c_str(),
               static_cast<unsigned long long>(seed));
}

std::string artifact_comment(const std::string& hash, std::uint64_t seed) {
  return std::string("# version=") + csa::kVersion + " config_hash=" + hash +
         " seed=" + std::to_string(seed);
}

void write_text_file(const std::string& path, const std::string& text,
                     const char* what) {
  std::ofstream out(path);
  if (!out)
    throw csa::DataError(std::string("cannot write ") + what + " '" + path +
                         "'");
  out << text;
}

// Applies a --fixed-k override to every plain CSA entry in the roster.
std::vector<csa::MethodSpec> build_roster(const std::vector<std::string>& names,
                                          const std::optional<int>& fixed_k) {
  std::vector<csa::MethodSpec> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    csa::MethodSpec spec = csa::parse_method(n);
    if (fixed_k && spec.method == csa::Method::Csa && !spec.fixed_k)
      spec.fixed_k = *fixed_k;
    out.push_back(std::move(spec));
  }
  if (out.empty()) throw csa::ConfigError("the method list is empty");
  return out;
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

struct EstimateParams {
  std::string data_path;
  json schema_json;
  std::vector<std::string> methods{"OLS", "2SLS", "DN", "CSA"};
  std::vector<double> lambda;  // empty: first-coordinate direction
  std::size_t subset_draws = csa::kDefaultSubsetDraws;
  bool exhaustive = false;
  std::uint64_t seed = 0;
  std::optional<int> fixed_k;
  std::optional<std::string> cluster;
  int jobs = 1;
  std::string out;

  json effective() const {
    json j{{"command", "estimate"},
           {"data", data_path},
           {"schema", schema_json},
           {"methods", methods},
           {"lambda", lambda},
           {"subsets_R", exhaustive ? json("all") : json(subset_draws)},
           {"seed", seed}};
    j["fixed_k"] = fixed_k ? json(*fixed_k) : json();
    j["cluster"] = cluster ? json(*cluster) : json();
    return j;
  }
};

int cmd_estimate(const EstimateParams& p) {
  const std::string hash = config_hash(p.effective());
  log_run("estimate", hash, p.seed);

  const LoadedData loaded = load_dataset(p.data_path, p.schema_json, p.cluster);
  const csa::DataSet& ds = loaded.ds;
  const auto roster = build_roster(p.methods, p.fixed_k);

  auto space = csa::make_instrument_space(ds);
  const auto part = csa::ClusterPartition::from_dataset(ds);
  std::optional<csa::PreliminaryFit> pre;
  auto get_pre = [&]() -> const csa::PreliminaryFit& {
    if (!pre) pre = csa::preliminary_fit(space);
    return *pre;
  };
  Eigen::VectorXd lambda;
  if (!p.lambda.empty())
    lambda = Eigen::Map<const Eigen::VectorXd>(p.lambda.data(),
                                               static_cast<long>(p.lambda.size()));

  std::vector<csa::EstimationResult> results;
  for (const auto& spec : roster) {
    csa::EstimationResult res;
    switch (spec.method) {
      case csa::Method::Ols:
        res = csa::ols(ds);
        break;
      case csa::Method::Tsls:
        res = csa::tsls(space, part);
        break;
      case csa::Method::Dn:
        res = csa::dn_baseline(space, get_pre(),
                               lambda.size() ? lambda
                                             : csa::default_lambda(ds.d()),
                               part);
        break;
      case csa::Method::Csa: {
        csa::CsaConfig cfg;
        cfg.lambda = lambda;
        cfg.subset_draws = p.subset_draws;
        cfg.exhaustive = p.exhaustive;
        cfg.seed = p.seed;
        cfg.fixed_k = spec.fixed_k;
        cfg.jobs = p.jobs;
        res = csa::csa_2sls(space, cfg, part);
        break;
      }
    }
    res.coef_names = ds.coef_names();
    results.push_back(std::move(res));
  }

  // Text table: one row per (method, coefficient).
  std::ostringstream text;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %-16s %12s %12s %6s\n", "method",
                "coefficient", "estimate", "std.error", "k");
  text << line;
  for (std::size_t m = 0; m < roster.size(); ++m) {
    const auto& res = results[m];
    for (int j = 0; j < res.beta.size(); ++j) {
      std::snprintf(line, sizeof line, "%-8s %-16s %s %s %6s",
                    roster[m].label.c_str(), res.coef_names[j].c_str(),
                    fmt_cell(res.beta[j], 12).c_str(),
                    fmt_cell((*res.se)[j], 12).c_str(),
                    res.k_hat && j == 0 ? std::to_string(*res.k_hat).c_str()
                                        : "");
      std::string row(line);
      while (!row.empty() && row.back() == ' ') row.pop_back();
      text << row << "\n";
    }
  }
  for (std::size_t m = 0; m < roster.size(); ++m)
    for (const auto& w : results[m].warnings)
      text << "# warning (" << roster[m].label << "): " << w << "\n";
  std::fputs(text.str().c_str(), stdout);

  if (!p.out.empty()) {
    json detail{{"version", csa::kVersion},
                {"command", "estimate"},
                {"config_hash", hash},
                {"seed", p.seed},
                {"rng", csa::kRngName},
                {"data",
                 {{"path", p.data_path},
                  {"n", ds.n()},
                  {"endogenous", ds.d1()},
                  {"exogenous", ds.d2()},
                  {"instruments", ds.K()},
                  {"clusters", static_cast<int>(ds.cluster_labels.size())}}}};
    json jres = json::array();
    for (std::size_t m = 0; m < roster.size(); ++m) {
      const auto& res = results[m];
      json r{{"method", roster[m].label}};
      json coef = json::array();
      for (int j = 0; j < res.beta.size(); ++j)
        coef.push_back({{"name", res.coef_names[j]},
                        {"estimate", res.beta[j]},
                        {"se", (*res.se)[j]}});
      r["coefficients"] = coef;
      if (res.k_hat) r["k_hat"] = *res.k_hat;
      if (res.curve) {
        json pts = json::array();
        for (const auto& pt : res.curve->points)
          pts.push_back({{"k", pt.k},
                         {"value", pt.value},
                         {"mode", pt.mode == csa::SubsetMode::Exact
                                      ? "exact"
                                      : "sampled"},
                         {"subsets", pt.count_used}});
        r["curve"] = {{"k_hat", res.curve->k_hat},
                      {"tie", res.curve->tie},
                      {"points", pts}};
      }
      r["warnings"] = res.warnings;
      jres.push_back(std::move(r));
    }
    detail["results"] = jres;
    write_text_file(p.out, detail.dump(2) + "\n", "JSON detail file");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateParams {
  std::vector<csa::DgpConfig> cells;       // seed field unset here
  std::vector<std::optional<std::uint64_t>> cell_seeds;
  std::vector<std::string> methods{"OLS", "2SLS", "DN", "CSA"};
  int reps = 100;
  std::size_t subset_draws = csa::kDefaultSubsetDraws;
  bool exhaustive = false;
  std::uint64_t seed = 0;
  std::optional<int> fixed_k;
  double level = 0.95;
  int jobs = 1;
  std::string out;

  json effective() const {
    json cells_j = json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& c = cells[i];
      json cj{{"N", c.N},         {"K", c.K},
              {"rho_z", c.rho_z}, {"sigma_ueps", c.sigma_ueps},
              {"rf2", c.rf2},     {"signal", csa::signal_name(c.signal)},
              {"beta0", c.beta0}, {"beta1", c.beta1}};
      cj["seed"] = cell_seeds[i] ? json(*cell_seeds[i]) : json();
      cells_j.push_back(std::move(cj));
    }
    json j{{"command", "simulate"},
           {"designs", cells_j},
           {"methods", methods},
           {"reps", reps},
           {"subsets_R", exhaustive ? json("all") : json(subset_draws)},
           {"seed", seed},
           {"level", level}};
    j["fixed_k"] = fixed_k ? json(*fixed_k) : json();
    return j;
  }
};

csa::DgpConfig parse_cell(const json& j, std::size_t index,
                          std::optional<std::uint64_t>* seed_out) {
  const std::string where = "designs[" + std::to_string(index) + "]";
  check_keys(j,
             {"N", "K", "rho_z", "sigma_ueps", "rf2", "signal", "beta0",
              "beta1", "seed"},
             where);
  csa::DgpConfig cfg;
  if (j.contains("N")) cfg.N = jget<int>(j, "N", where);
  if (j.contains("K")) cfg.K = jget<int>(j, "K", where);
  if (j.contains("rho_z")) cfg.rho_z = jget<double>(j, "rho_z", where);
  if (j.contains("sigma_ueps"))
    cfg.sigma_ueps = jget<double>(j, "sigma_ueps", where);
  if (j.contains("rf2")) cfg.rf2 = jget<double>(j, "rf2", where);
  if (j.contains("signal"))
    cfg.signal = csa::parse_signal(jget<std::string>(j, "signal", where));
  if (j.contains("beta0")) cfg.beta0 = jget<double>(j, "beta0", where);
  if (j.contains("beta1")) cfg.beta1 = jget<double>(j, "beta1", where);
  *seed_out = std::nullopt;
  if (j.contains("seed"))
    *seed_out = jget<std::uint64_t>(j, "seed", where);
  try {
    cfg.check();
  } catch (const csa::ConfigError& e) {
    throw csa::ConfigError(where + ": " + e.what());
  }
  return cfg;
}

int cmd_simulate(const SimulateParams& p) {
  const std::string hash = config_hash(p.effective());
  log_run("simulate", hash, p.seed);
  const auto roster = build_roster(p.methods, p.fixed_k);

  std::ostringstream text;
  std::ostringstream csv;
  csv << artifact_comment(hash, p.seed) << "\n"
      << "design,signal,N,K,rho_z,sigma_ueps,rf2,beta0,beta1,cell_seed,"
         "method,mse,bias,mad,median_bias,range,coverage,mean_k,median_k,"
         "n_used,n_failed\n";

  static const char* kHeads[] = {"MSE",      "Bias",    "MAD",
                                 "MedBias",  "Range",   "Coverage",
                                 "Mean(k)",  "Med(k)"};
  for (std::size_t c = 0; c < p.cells.size(); ++c) {
    csa::DgpConfig cfg = p.cells[c];
    cfg.seed = p.cell_seeds[c]
                   ? *p.cell_seeds[c]
                   : csa::derive_seed(p.seed, static_cast<std::uint64_t>(c));

    csa::RunOptions opt;
    opt.subset_draws = p.subset_draws;
    opt.exhaustive = p.exhaustive;
    opt.level = p.level;
    const int step = std::max(1, p.reps / 10);
    opt.progress = [&](int done, int total) {
      if (done % step == 0 || done == total)
        std::fprintf(stderr, "design %zu/%zu: %d/%d replications\n", c + 1,
                     p.cells.size(), done, total);
    };

    const csa::SimulationReport rep =
        csa::run_design(cfg, roster, p.reps, p.jobs, opt);

    char line[256];
    std::snprintf(line, sizeof line,
                  "design %zu: signal=%s N=%d K=%d rho_z=%g sigma_ueps=%g "
                  "rf2=%g beta1=%g reps=%d R=%s seed=%llu\n",
                  c + 1, csa::signal_name(cfg.signal), cfg.N, cfg.K, cfg.rho_z,
                  cfg.sigma_ueps, cfg.rf2, cfg.beta1, p.reps,
                  p.exhaustive ? "all" : std::to_string(p.subset_draws).c_str(),
                  static_cast<unsigned long long>(cfg.seed));
    text << line;
    text << "  method  ";
    for (const char* h : kHeads) {
      std::snprintf(line, sizeof line, " %11s", h);
      text << line;
    }
    text << "\n";
    for (const auto& row : rep.rows) {
      std::snprintf(line, sizeof line, "  %-8s", row.label.c_str());
      text << line;
      const double vals[] = {row.mse,         row.bias,  row.mad,
                             row.median_bias, row.range, row.coverage};
      std::string cols;
      for (double v : vals) cols += " " + fmt_cell(v, 11);
      cols += " " + (row.mean_k ? fmt_cell(*row.mean_k, 11) : fmt_blank(11));
      cols +=
          " " + (row.median_k ? fmt_cell(*row.median_k, 11) : fmt_blank(11));
      while (!cols.empty() && cols.back() == ' ') cols.pop_back();
      text << cols << "\n";

      csv << (c + 1) << ',' << csa::signal_name(cfg.signal) << ',' << cfg.N
          << ',' << cfg.K << ',' << fmt_full(cfg.rho_z) << ','
          << fmt_full(cfg.sigma_ueps) << ',' << fmt_full(cfg.rf2) << ','
          << fmt_full(cfg.beta0) << ',' << fmt_full(cfg.beta1) << ','
          << cfg.seed << ',' << row.label << ',' << fmt_full(row.mse) << ','
          << fmt_full(row.bias) << ',' << fmt_full(row.mad) << ','
          << fmt_full(row.median_bias) << ',' << fmt_full(row.range) << ','
          << fmt_full(row.coverage) << ','
          << (row.mean_k ? fmt_full(*row.mean_k) : "") << ','
          << (row.median_k ? fmt_full(*row.median_k) : "") << ','
          << row.n_used << ',' << row.n_failed << "\n";
    }
    if (!rep.failures.empty()) {
      text << "  excluded failures:\n";
      for (const auto& f : rep.failures) text << "    " << f << "\n";
    }
    text << "\n";
  }

  std::fputs(text.str().c_str(), stdout);
  if (!p.out.empty()) {
    write_text_file(p.out + ".csv", csv.str(), "CSV artifact");
    write_text_file(p.out + ".txt", text.str(), "text artifact");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// criterion
// ---------------------------------------------------------------------------

struct CriterionParams {
  std::string data_path;
  json schema_json;
  std::vector<double> lambda;
  std::size_t subset_draws = csa::kDefaultSubsetDraws;
  bool exhaustive = false;
  std::uint64_t seed = 0;
  std::optional<std::string> cluster;
  std::optional<std::string> truth_path;
  int jobs = 1;
  std::string out;

  json effective() const {
    json j{{"command", "criterion"},
           {"data", data_path},
           {"schema", schema_json},
           {"lambda", lambda},
           {"subsets_R", exhaustive ? json("all") : json(subset_draws)},
           {"seed", seed}};
    j["cluster"] = cluster ? json(*cluster) : json();
    j["truth"] = truth_path ? json(*truth_path) : json();
    return j;
  }
};

// Truth file for the oracle column: the endogenous first-stage signal and the
// true error moments.  "f" is a flat array (one endogenous regressor) or an
// array of rows; "sigma_ueps" is a scalar or an array of length d1.
csa::OracleInputs load_truth(const std::string& path, const csa::DataSet& ds) {
  const json j = parse_json_file(path, "truth");
  check_keys(j, {"f", "sigma2_eps", "sigma_ueps"}, "truth");
  for (const char* key : {"f", "sigma2_eps", "sigma_ueps"})
    if (!j.contains(key))
      throw csa::ConfigError(std::string("truth: missing '") + key + "'");

  const int n = ds.n();
  const int d1 = ds.d1();
  Eigen::MatrixXd f_endo(n, d1);
  const json& jf = j.at("f");
  if (!jf.is_array() || static_cast<int>(jf.size()) != n)
    throw csa::ConfigError("truth: 'f' must be an array with one entry per row (" +
                           std::to_string(n) + ")");
  for (int i = 0; i < n; ++i) {
    const json& row = jf.at(i);
    if (row.is_number()) {
      if (d1 != 1)
        throw csa::ConfigError(
            "truth: 'f' rows must be arrays of length d1 when d1 > 1");
      f_endo(i, 0) = row.get<double>();
    } else if (row.is_array() && static_cast<int>(row.size()) == d1) {
      for (int k = 0; k < d1; ++k) f_endo(i, k) = row.at(k).get<double>();
    } else {
      throw csa::ConfigError("truth: 'f' row " + std::to_string(i) +
                             " has the wrong shape");
    }
  }

  csa::OracleInputs ora;
  ora.f.resize(n, ds.d());
  ora.f.leftCols(d1) = f_endo;
  if (ds.d2() > 0) ora.f.rightCols(ds.d2()) = ds.X_exog;
  ora.H = ora.f.transpose() * ora.f / n;
  ora.sigma2_eps = jget<double>(j, "sigma2_eps", "truth");
  ora.sigma_ueps = Eigen::VectorXd::Zero(ds.d());
  const json& su = j.at("sigma_ueps");
  if (su.is_number()) {
    if (d1 != 1)
      throw csa::ConfigError(
          "truth: 'sigma_ueps' must be an array of length d1 when d1 > 1");
    ora.sigma_ueps(0) = su.get<double>();
  } else if (su.is_array() && static_cast<int>(su.size()) == d1) {
    for (int k = 0; k < d1; ++k) ora.sigma_ueps(k) = su.at(k).get<double>();
  } else {
    throw csa::ConfigError("truth: 'sigma_ueps' has the wrong shape");
  }
  return ora;
}

int cmd_criterion(const CriterionParams& p) {
  const std::string hash = config_hash(p.effective());
  log_run("criterion", hash, p.seed);

  const LoadedData loaded = load_dataset(p.data_path, p.schema_json, p.cluster);
  const csa::DataSet& ds = loaded.ds;
  auto space = csa::make_instrument_space(ds);
  const csa::PreliminaryFit pre = csa::preliminary_fit(space);

  csa::SelectOptions so;
  if (!p.lambda.empty())
    so.lambda = Eigen::Map<const Eigen::VectorXd>(
        p.lambda.data(), static_cast<long>(p.lambda.size()));
  so.subset_draws = p.subset_draws;
  so.exhaustive = p.exhaustive;
  so.seed = p.seed;
  so.jobs = p.jobs;
  const csa::CriterionCurve curve = csa::select_k(space, pre, so);

  std::optional<csa::OracleInputs> ora;
  if (p.truth_path) ora = load_truth(*p.truth_path, ds);
  const Eigen::VectorXd lambda =
      so.lambda.size() ? so.lambda : csa::default_lambda(ds.d());

  std::ostringstream csv;
  csv << artifact_comment(hash, p.seed) << "\n";
  csv << "k,criterion,mode,subsets,selected";
  if (ora) csv << ",oracle";
  csv << "\n";
  for (const auto& pt : curve.points) {
    csv << pt.k << ',' << fmt_full(pt.value) << ','
        << (pt.mode == csa::SubsetMode::Exact ? "exact" : "sampled") << ','
        << pt.count_used << ',' << (pt.k == curve.k_hat ? 1 : 0);
    if (ora) {
      const csa::SubsetPlan plan = csa::plan_for_k(*space, pt.k, so);
      const csa::CsaProjection proj = csa::csa_projection(space, plan, {});
      csv << ',' << fmt_full(csa::oracle_mse(*ora, proj, lambda));
    }
    csv << "\n";
  }

  if (p.out.empty())
    std::fputs(csv.str().c_str(), stdout);
  else
    write_text_file(p.out, csv.str(), "CSV artifact");
  return 0;
}

// ---------------------------------------------------------------------------
// Flag plumbing: per-command raw flags, merged over the optional config file.
// ---------------------------------------------------------------------------

struct RawFlags {
  std::string config_path;
  std::string data, schema, out, cluster, truth, subsets_r;
  std::vector<std::string> methods;
  std::vector<double> lambda;
  std::uint64_t seed = 0;
  int fixed_k = 0, jobs = 0, reps = 0;
  double level = 0;
};

struct FlagOpts {
  CLI::Option* data = nullptr;
  CLI::Option* schema = nullptr;
  CLI::Option* methods = nullptr;
  CLI::Option* lambda = nullptr;
  CLI::Option* subsets_r = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* fixed_k = nullptr;
  CLI::Option* cluster = nullptr;
  CLI::Option* reps = nullptr;
  CLI::Option* jobs = nullptr;
  CLI::Option* level = nullptr;
  CLI::Option* out = nullptr;
  CLI::Option* truth = nullptr;
};

// Resolves the schema entry of a config file: a path string or an inline
// schema object.
json schema_from_config(const json& v, const std::string& where) {
  if (v.is_string()) return parse_json_file(v.get<std::string>(), "schema");
  if (v.is_object()) return v;
  throw csa::ConfigError(where +
                         ": 'schema' must be a file path or a schema object");
}

EstimateParams resolve_estimate(const RawFlags& f, const FlagOpts& o) {
  EstimateParams p;
  if (!f.config_path.empty()) {
    const json cfg = parse_json_file(f.config_path, "config");
    check_keys(cfg,
               {"data", "schema", "methods", "lambda", "subsets_R", "seed",
                "fixed_k", "cluster", "jobs", "out"},
               "config");
    if (cfg.contains("data")) p.data_path = jget<std::string>(cfg, "data", "config");
    if (cfg.contains("schema"))
      p.schema_json = schema_from_config(cfg.at("schema"), "config");
    if (cfg.contains("methods"))
      p.methods = jget<std::vector<std::string>>(cfg, "methods", "config");
    if (cfg.contains("lambda"))
      p.lambda = jget<std::vector<double>>(cfg, "lambda", "config");
    if (cfg.contains("subsets_R"))
      std::tie(p.subset_draws, p.exhaustive) =
          subsets_r_from_json(cfg.at("subsets_R"), "config");
    if (cfg.contains("seed")) p.seed = jget<std::uint64_t>(cfg, "seed", "config");
    if (cfg.contains("fixed_k")) p.fixed_k = jget<int>(cfg, "fixed_k", "config");
    if (cfg.contains("cluster"))
      p.cluster = jget<std::string>(cfg, "cluster", "config");
    if (cfg.contains("jobs")) p.jobs = jget<int>(cfg, "jobs", "config");
    if (cfg.contains("out")) p.out = jget<std::string>(cfg, "out", "config");
  }
  if (o.data->count()) p.data_path = f.data;
  if (o.schema->count()) p.schema_json = parse_json_file(f.schema, "schema");
  if (o.methods->count()) p.methods = f.methods;
  if (o.lambda->count()) p.lambda = f.lambda;
  if (o.subsets_r->count())
    std::tie(p.subset_draws, p.exhaustive) = parse_subsets_r(f.subsets_r);
  if (o.seed->count()) p.seed = f.seed;
  if (o.fixed_k->count()) p.fixed_k = f.fixed_k;
  if (o.cluster->count()) p.cluster = f.cluster;
  if (o.jobs->count()) p.jobs = f.jobs;
  if (o.out->count()) p.out = f.out;
  if (p.data_path.empty()) throw csa::ConfigError("estimate: --data is required");
  if (p.schema_json.is_null())
    throw csa::ConfigError("estimate: --schema is required");
  if (p.jobs < 1) throw csa::ConfigError("--jobs must be at least 1");
  return p;
}

SimulateParams resolve_simulate(const RawFlags& f, const FlagOpts& o) {
  SimulateParams p;
  if (f.config_path.empty())
    throw csa::ConfigError("simulate: --config <sweep.json> is required");
  const json cfg = parse_json_file(f.config_path, "config");
  check_keys(cfg,
             {"designs", "methods", "reps", "subsets_R", "seed", "fixed_k",
              "level", "jobs", "out"},
             "config");
  if (!cfg.contains("designs") || !cfg.at("designs").is_array() ||
      cfg.at("designs").empty())
    throw csa::ConfigError("config: 'designs' must be a non-empty array");
  for (std::size_t i = 0; i < cfg.at("designs").size(); ++i) {
    std::optional<std::uint64_t> cell_seed;
    p.cells.push_back(parse_cell(cfg.at("designs").at(i), i, &cell_seed));
    p.cell_seeds.push_back(cell_seed);
  }
  if (cfg.contains("methods"))
    p.methods = jget<std::vector<std::string>>(cfg, "methods", "config");
  if (cfg.contains("reps")) p.reps = jget<int>(cfg, "reps", "config");
  if (cfg.contains("subsets_R"))
    std::tie(p.subset_draws, p.exhaustive) =
        subsets_r_from_json(cfg.at("subsets_R"), "config");
  if (cfg.contains("seed")) p.seed = jget<std::uint64_t>(cfg, "seed", "config");
  if (cfg.contains("fixed_k")) p.fixed_k = jget<int>(cfg, "fixed_k", "config");
  if (cfg.contains("level")) p.level = jget<double>(cfg, "level", "config");
  if (cfg.contains("jobs")) p.jobs = jget<int>(cfg, "jobs", "config");
  if (cfg.contains("out")) p.out = jget<std::string>(cfg, "out", "config");

  if (o.methods->count()) p.methods = f.methods;
  if (o.reps->count()) p.reps = f.reps;
  if (o.subsets_r->count())
    std::tie(p.subset_draws, p.exhaustive) = parse_subsets_r(f.subsets_r);
  if (o.seed->count()) p.seed = f.seed;
  if (o.fixed_k->count()) p.fixed_k = f.fixed_k;
  if (o.level->count()) p.level = f.level;
  if (o.jobs->count()) p.jobs = f.jobs;
  if (o.out->count()) p.out = f.out;

  if (p.reps < 1) throw csa::ConfigError("reps must be at least 1");
  if (!(p.level > 0.0 && p.level < 1.0))
    throw csa::ConfigError("level must lie in (0,1)");
  if (p.jobs < 1) throw csa::ConfigError("--jobs must be at least 1");
  return p;
}

CriterionParams resolve_criterion(const RawFlags& f, const FlagOpts& o) {
  CriterionParams p;
  if (!f.config_path.empty()) {
    const json cfg = parse_json_file(f.config_path, "config");
    check_keys(cfg,
               {"data", "schema", "lambda", "subsets_R", "seed", "cluster",
                "truth", "jobs", "out"},
               "config");
    if (cfg.contains("data")) p.data_path = jget<std::string>(cfg, "data", "config");
    if (cfg.contains("schema"))
      p.schema_json = schema_from_config(cfg.at("schema"), "config");
    if (cfg.contains("lambda"))
      p.lambda = jget<std::vector<double>>(cfg, "lambda", "config");
    if (cfg.contains("subsets_R"))
      std::tie(p.subset_draws, p.exhaustive) =
          subsets_r_from_json(cfg.at("subsets_R"), "config");
    if (cfg.contains("seed")) p.seed = jget<std::uint64_t>(cfg, "seed", "config");
    if (cfg.contains("cluster"))
      p.cluster = jget<std::string>(cfg, "cluster", "config");
    if (cfg.contains("truth")) p.truth_path = jget<std::string>(cfg, "truth", "config");
    if (cfg.contains("jobs")) p.jobs = jget<int>(cfg, "jobs", "config");
    if (cfg.contains("out")) p.out = jget<std::string>(cfg, "out", "config");
  }
  if (o.data->count()) p.data_path = f.data;
  if (o.schema->count()) p.schema_json = parse_json_file(f.schema, "schema");
  if (o.lambda->count()) p.lambda = f.lambda;
  if (o.subsets_r->count())
    std::tie(p.subset_draws, p.exhaustive) = parse_subsets_r(f.subsets_r);
  if (o.seed->count()) p.seed = f.seed;
  if (o.cluster->count()) p.cluster = f.cluster;
  if (o.truth->count()) p.truth_path = f.truth;
  if (o.jobs->count()) p.jobs = f.jobs;
  if (o.out->count()) p.out = f.out;
  if (p.data_path.empty())
    throw csa::ConfigError("criterion: --data is required");
  if (p.schema_json.is_null())
    throw csa::ConfigError("criterion: --schema is required");
  if (p.jobs < 1) throw csa::ConfigError("--jobs must be at least 1");
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Complete-subset-averaging two-stage least squares"};
  app.set_version_flag("--version", std::string("csa2sls ") + csa::kVersion);
  app.require_subcommand(1);

  RawFlags est_f, sim_f, cri_f;
  FlagOpts est_o, sim_o, cri_o;

  CLI::App* est = app.add_subcommand("estimate", "Fit estimators to a dataset");
  est->add_option("--config", est_f.config_path, "JSON config file; flags win");
  est_o.data = est->add_option("--data", est_f.data, "CSV data file");
  est_o.schema = est->add_option("--schema", est_f.schema, "JSON schema file");
  est_o.methods = est->add_option("--methods", est_f.methods,
                                  "Comma-separated method list")
                      ->delimiter(',');
  est_o.lambda = est->add_option("--lambda", est_f.lambda,
                                 "Criterion direction (comma-separated)")
                     ->delimiter(',');
  est_o.subsets_r = est->add_option("--subsets-R", est_f.subsets_r,
                                    "Subsets per size: integer or 'all'");
  est_o.seed = est->add_option("--seed", est_f.seed, "Master seed");
  est_o.fixed_k = est->add_option("--fixed-k", est_f.fixed_k,
                                  "Pin the CSA subset size");
  est_o.cluster = est->add_option("--cluster-col", est_f.cluster,
                                  "Cluster column (overrides schema)");
  est_o.jobs = est->add_option("--jobs", est_f.jobs, "Worker threads");
  est_o.out = est->add_option("--out", est_f.out, "JSON detail output path");

  CLI::App* sim = app.add_subcommand("simulate", "Monte Carlo design sweep");
  sim->add_option("--config", sim_f.config_path, "JSON sweep file; flags win");
  sim_o.methods = sim->add_option("--methods", sim_f.methods,
                                  "Comma-separated method list")
                      ->delimiter(',');
  sim_o.subsets_r = sim->add_option("--subsets-R", sim_f.subsets_r,
                                    "Subsets per size: integer or 'all'");
  sim_o.seed = sim->add_option("--seed", sim_f.seed, "Master seed");
  sim_o.fixed_k = sim->add_option("--fixed-k", sim_f.fixed_k,
                                  "Pin the CSA subset size");
  sim_o.reps = sim->add_option("--reps", sim_f.reps, "Replications per design");
  sim_o.level = sim->add_option("--level", sim_f.level,
                                "Confidence level for coverage");
  sim_o.jobs = sim->add_option("--jobs", sim_f.jobs, "Worker threads");
  sim_o.out = sim->add_option("--out", sim_f.out,
                              "Artifact base path (writes .csv and .txt)");

  CLI::App* cri = app.add_subcommand("criterion", "Export the selection curve");
  cri->add_option("--config", cri_f.config_path, "JSON config file; flags win");
  cri_o.data = cri->add_option("--data", cri_f.data, "CSV data file");
  cri_o.schema = cri->add_option("--schema", cri_f.schema, "JSON schema file");
  cri_o.lambda = cri->add_option("--lambda", cri_f.lambda,
                                 "Criterion direction (comma-separated)")
                     ->delimiter(',');
  cri_o.subsets_r = cri->add_option("--subsets-R", cri_f.subsets_r,
                                    "Subsets per size: integer or 'all'");
  cri_o.seed = cri->add_option("--seed", cri_f.seed, "Master seed");
  cri_o.cluster = cri->add_option("--cluster-col", cri_f.cluster,
                                  "Cluster column (overrides schema)");
  cri_o.truth = cri->add_option("--truth", cri_f.truth,
                                "Truth JSON for the oracle column");
  cri_o.jobs = cri->add_option("--jobs", cri_f.jobs, "Worker threads");
  cri_o.out = cri->add_option("--out", cri_f.out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "csa2sls: config error: %s\n",
                 one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (est->parsed()) return cmd_estimate(resolve_estimate(est_f, est_o));
    if (sim->parsed()) return cmd_simulate(resolve_simulate(sim_f, sim_o));
    if (cri->parsed()) return cmd_criterion(resolve_criterion(cri_f, cri_o));
  } catch (const csa::ConfigError& e) {
    std::fprintf(stderr, "csa2sls: config error: %s\n",
                 one_line(e.what()).c_str());
    return 2;
  } catch (const csa::DataError& e) {
    std::fprintf(stderr, "csa2sls: data error: %s\n",
                 one_line(e.what()).c_str());
    return 3;
  } catch (const csa::NumericError& e) {
    std::fprintf(stderr, "csa2sls: numeric error: %s\n",
                 one_line(e.what()).c_str());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "csa2sls: internal error: %s\n",
                 one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
