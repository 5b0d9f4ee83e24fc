#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "csa/errors.hpp"

namespace csa {

// Maps CSV columns to model roles.  Column order inside each role list is the
// coefficient order used everywhere downstream (endogenous first, then
// exogenous).
struct DatasetSchema {
  std::string outcome;
  std::vector<std::string> endogenous;
  std::vector<std::string> exogenous;
  std::vector<std::string> instruments;
  std::optional<std::string> cluster;

  void check() const {
    if (outcome.empty()) throw ConfigError("schema: outcome column is required");
    if (endogenous.empty())
      throw ConfigError("schema: at least one endogenous column is required");
    if (static_cast<int>(instruments.size()) < static_cast<int>(endogenous.size()))
      throw ConfigError("schema: needs at least " +
                        std::to_string(endogenous.size()) +
                        " instruments for " + std::to_string(endogenous.size()) +
                        " endogenous columns");
    std::set<std::string> seen;
    auto add = [&](const std::string& name, const char* role) {
      if (name.empty()) throw ConfigError(std::string("schema: empty name in ") + role);
      if (!seen.insert(name).second)
        throw ConfigError("schema: column '" + name + "' appears in more than one role");
    };
    add(outcome, "outcome");
    for (const auto& n : endogenous) add(n, "endogenous");
    for (const auto& n : exogenous) add(n, "exogenous");
    for (const auto& n : instruments) add(n, "instruments");
    if (cluster) add(*cluster, "cluster");
  }

  static DatasetSchema from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("schema: expected a JSON object");
    DatasetSchema s;
    auto list = [&](const char* key) {
      std::vector<std::string> out;
      if (j.contains(key)) {
        if (!j.at(key).is_array())
          throw ConfigError(std::string("schema: '") + key + "' must be an array");
        for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
      }
      return out;
    };
    if (!j.contains("outcome")) throw ConfigError("schema: missing 'outcome'");
    s.outcome = j.at("outcome").get<std::string>();
    s.endogenous = list("endogenous");
    s.exogenous = list("exogenous");
    s.instruments = list("instruments");
    if (j.contains("cluster") && !j.at("cluster").is_null())
      s.cluster = j.at("cluster").get<std::string>();
    s.check();
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"outcome", outcome},
                     {"endogenous", endogenous},
                     {"exogenous", exogenous},
                     {"instruments", instruments}};
    if (cluster) j["cluster"] = *cluster;
    return j;
  }
};

struct Diagnostic {
  std::string code;
  std::string message;
};

// In-memory design: y (N), endogenous block (N x d1), included exogenous
// block (N x d2, may be empty), excluded instruments (N x K), optional
// cluster ids (contiguous, first-appearance order).
struct DataSet {
  Eigen::VectorXd y;
  Eigen::MatrixXd Y_endo;
  Eigen::MatrixXd X_exog;
  Eigen::MatrixXd Z_excl;
  std::vector<int> cluster;
  std::vector<std::string> cluster_labels;

  std::string y_name = "y";
  std::vector<std::string> endo_names;
  std::vector<std::string> exog_names;
  std::vector<std::string> instr_names;

  int n() const { return static_cast<int>(y.size()); }
  int d1() const { return static_cast<int>(Y_endo.cols()); }
  int d2() const { return static_cast<int>(X_exog.cols()); }
  int K() const { return static_cast<int>(Z_excl.cols()); }
  int d() const { return d1() + d2(); }

  // Regressor matrix in coefficient order: endogenous, then exogenous.
  Eigen::MatrixXd X() const {
    Eigen::MatrixXd x(n(), d());
    x.leftCols(d1()) = Y_endo;
    if (d2() > 0) x.rightCols(d2()) = X_exog;
    return x;
  }

  std::vector<std::string> coef_names() const {
    std::vector<std::string> names(endo_names);
    names.insert(names.end(), exog_names.begin(), exog_names.end());
    return names;
  }

  void default_names() {
    y_name = "y";
    endo_names.resize(d1());
    for (int j = 0; j < d1(); ++j) endo_names[j] = "endo" + std::to_string(j + 1);
    exog_names.resize(d2());
    for (int j = 0; j < d2(); ++j) exog_names[j] = "exog" + std::to_string(j + 1);
    instr_names.resize(K());
    for (int j = 0; j < K(); ++j) instr_names[j] = "z" + std::to_string(j + 1);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_cell(const std::string& cell, int file_line,
                         const std::string& col) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw DataError("line " + std::to_string(file_line) + ", column '" + col +
                    "': cell '" + cell + "' is not numeric");
  if (!std::isfinite(v))
    throw DataError("line " + std::to_string(file_line) + ", column '" + col +
                    "': cell '" + cell + "' is not finite");
  return v;
}

}  // namespace detail

// Strict CSV reader: header required, comma-separated, no quoting.  Cells for
// every schema column must parse as finite doubles; anything else is an error
// naming the line and column.  Unlisted file columns are ignored.
inline DataSet load_csv(const std::string& path, const DatasetSchema& schema) {
  schema.check();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  const auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, int> col_of;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) col_of.emplace(header[i], i);

  auto find_col = [&](const std::string& name) {
    const auto it = col_of.find(name);
    if (it == col_of.end())
      throw ConfigError("schema column '" + name + "' not present in '" + path + "'");
    return it->second;
  };

  const int y_col = find_col(schema.outcome);
  std::vector<int> endo_cols, exog_cols, instr_cols;
  for (const auto& c : schema.endogenous) endo_cols.push_back(find_col(c));
  for (const auto& c : schema.exogenous) exog_cols.push_back(find_col(c));
  for (const auto& c : schema.instruments) instr_cols.push_back(find_col(c));
  const int cl_col = schema.cluster ? find_col(*schema.cluster) : -1;

  std::vector<std::vector<std::string>> rows;
  int file_line = 1;
  while (std::getline(in, line)) {
    ++file_line;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError("line " + std::to_string(file_line) + ": expected " +
                      std::to_string(header.size()) + " cells, found " +
                      std::to_string(cells.size()));
    rows.push_back(std::move(cells));
  }

  const int N = static_cast<int>(rows.size());
  const int d = static_cast<int>(endo_cols.size() + exog_cols.size());
  if (N <= d)
    throw DataError("'" + path + "': N=" + std::to_string(N) +
                    " rows cannot identify d=" + std::to_string(d) + " coefficients");

  DataSet ds;
  ds.y.resize(N);
  ds.Y_endo.resize(N, static_cast<int>(endo_cols.size()));
  ds.X_exog.resize(N, static_cast<int>(exog_cols.size()));
  ds.Z_excl.resize(N, static_cast<int>(instr_cols.size()));
  std::unordered_map<std::string, int> cluster_ids;
  if (cl_col >= 0) ds.cluster.resize(N);

  for (int i = 0; i < N; ++i) {
    const int fl = i + 2;  // header is line 1, but blank lines may shift this
    const auto& r = rows[i];
    ds.y[i] = detail::parse_cell(r[y_col], fl, schema.outcome);
    for (std::size_t j = 0; j < endo_cols.size(); ++j)
      ds.Y_endo(i, j) = detail::parse_cell(r[endo_cols[j]], fl, schema.endogenous[j]);
    for (std::size_t j = 0; j < exog_cols.size(); ++j)
      ds.X_exog(i, j) = detail::parse_cell(r[exog_cols[j]], fl, schema.exogenous[j]);
    for (std::size_t j = 0; j < instr_cols.size(); ++j)
      ds.Z_excl(i, j) = detail::parse_cell(r[instr_cols[j]], fl, schema.instruments[j]);
    if (cl_col >= 0) {
      const std::string& label = r[cl_col];
      auto [it, fresh] =
          cluster_ids.emplace(label, static_cast<int>(ds.cluster_labels.size()));
      if (fresh) ds.cluster_labels.push_back(label);
      ds.cluster[i] = it->second;
    }
  }

  ds.y_name = schema.outcome;
  ds.endo_names = schema.endogenous;
  ds.exog_names = schema.exogenous;
  ds.instr_names = schema.instruments;
  return ds;
}

// Full-precision writer; the exact inverse of load_csv for finite data.
inline void write_csv(const DataSet& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write data file '" + path + "'");
  out << ds.y_name;
  for (const auto& c : ds.endo_names) out << ',' << c;
  for (const auto& c : ds.exog_names) out << ',' << c;
  for (const auto& c : ds.instr_names) out << ',' << c;
  const bool has_cl = !ds.cluster.empty();
  if (has_cl) out << ",cluster";
  out << '\n';
  char buf[40];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (int i = 0; i < ds.n(); ++i) {
    put(ds.y[i]);
    for (int j = 0; j < ds.d1(); ++j) { out << ','; put(ds.Y_endo(i, j)); }
    for (int j = 0; j < ds.d2(); ++j) { out << ','; put(ds.X_exog(i, j)); }
    for (int j = 0; j < ds.K(); ++j) { out << ','; put(ds.Z_excl(i, j)); }
    if (has_cl) out << ',' << ds.cluster_labels.at(ds.cluster[i]);
    out << '\n';
  }
}

// Structural checks; returns every violation rather than stopping at the
// first so a caller can report them all.
inline std::vector<Diagnostic> validate(const DataSet& ds) {
  std::vector<Diagnostic> out;
  const int N = ds.n();
  auto rows_ok = [&](const Eigen::MatrixXd& m, const char* name) {
    if (m.rows() != N && !(m.size() == 0 && N >= 0))
      out.push_back({"row_mismatch", std::string(name) + " has " +
                                         std::to_string(m.rows()) +
                                         " rows, expected " + std::to_string(N)});
  };
  rows_ok(ds.Y_endo, "endogenous block");
  rows_ok(ds.X_exog, "exogenous block");
  rows_ok(ds.Z_excl, "instrument block");
  if (ds.d1() == 0) out.push_back({"no_endogenous", "no endogenous columns"});
  if (N <= ds.d())
    out.push_back({"too_few_rows", "N=" + std::to_string(N) +
                                       " rows for d=" + std::to_string(ds.d()) +
                                       " coefficients"});
  if (ds.K() < ds.d1())
    out.push_back({"order_condition",
                   "K=" + std::to_string(ds.K()) + " excluded instruments < d1=" +
                       std::to_string(ds.d1()) + " endogenous columns"});
  auto finite = [](const Eigen::MatrixXd& m) { return m.allFinite(); };
  if (!ds.y.allFinite() || !finite(ds.Y_endo) || !finite(ds.X_exog) ||
      !finite(ds.Z_excl))
    out.push_back({"non_finite", "data contains non-finite entries"});
  if (!ds.cluster.empty()) {
    if (static_cast<int>(ds.cluster.size()) != N)
      out.push_back({"cluster_mismatch", "cluster ids do not cover every row"});
    int max_id = -1;
    std::set<int> distinct;
    for (int c : ds.cluster) {
      max_id = std::max(max_id, c);
      distinct.insert(c);
      if (c < 0) {
        out.push_back({"cluster_ids", "negative cluster id"});
        break;
      }
    }
    if (max_id + 1 != static_cast<int>(distinct.size()))
      out.push_back({"cluster_ids", "cluster ids are not contiguous"});
  }
  return out;
}

}  // namespace csa
