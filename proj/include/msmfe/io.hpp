#pragma once

// CSV ingestion, the JSON run configuration, report tables and the
// orchestrator behind the command-line subcommands.

#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "msmfe/balance.hpp"
#include "msmfe/pipeline.hpp"
#include "msmfe/sensitivity.hpp"

#ifndef MSMFE_VERSION
#define MSMFE_VERSION "0.1.0"
#endif

namespace msmfe {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kVersion = MSMFE_VERSION;

namespace fs = std::filesystem;

struct ColumnRoles {
  std::string treatment = "T";
  std::vector<std::string> covariates;
  std::vector<std::string> binary;  // further 0/1 columns, usually binary outcomes
  std::string cluster;              // bootstrap clusters; units when empty
  std::string group;                // grouping column for group-level fixed effects
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (header[k] == name) return k;
    }
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, const std::string& where) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError(where + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

}  // namespace detail

inline Table read_table(std::istream& in, const std::string& source) {
  Table t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line, source + ", line " + std::to_string(line_no));
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw ParseError(source + ", line " + std::to_string(line_no) + ": expected " +
                       std::to_string(t.header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ParseError(source + ": no header row");
  return t;
}

inline Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return read_table(in, path.string());
}

// Builds a typed panel from a table with unit and time columns; every other
// column is numeric and an empty field is missing. Data lines are numbered
// from 2 in messages, counting the header as line 1.
inline PanelDataset panel_from_table(const Table& t, const ColumnRoles& roles, const std::string& source) {
  const auto unit_col = t.find(kUnitColumn);
  const auto time_col = t.find(kTimeColumn);
  for (const auto& [col, name] : {std::pair{unit_col, kUnitColumn}, std::pair{time_col, kTimeColumn}}) {
    if (!col) throw ParseError(source + ": missing required column '" + std::string(name) + "'");
  }
  std::set<std::string> seen;
  for (const auto& h : t.header) {
    if (h.empty()) throw ParseError(source + ": empty column name in header");
    if (!seen.insert(h).second) throw ParseError(source + ": duplicate column '" + h + "'");
  }
  std::set<std::string> binary(roles.binary.begin(), roles.binary.end());
  if (!roles.treatment.empty()) binary.insert(roles.treatment);

  const std::size_t n = t.rows.size();
  std::vector<std::string> units(n);
  std::vector<int> times(n);
  std::vector<std::pair<std::string, Column>> cols;
  std::vector<std::size_t> src;
  for (std::size_t k = 0; k < t.header.size(); ++k) {
    if (k == *unit_col || k == *time_col) continue;
    cols.emplace_back(t.header[k], Column{std::vector<Value>(n), binary.count(t.header[k]) > 0});
    src.push_back(k);
  }
  auto fail = [&](std::size_t r, const std::string& col, const std::string& text, const char* what) {
    throw ParseError(source + ", line " + std::to_string(r + 2) + ", column '" + col + "': cannot parse '" +
                     text + "' as " + what);
  };
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = t.rows[r];
    units[r] = row[*unit_col];
    if (units[r].empty()) fail(r, kUnitColumn, "", "a unit identifier");
    const std::string& ts = row[*time_col];
    int tv = 0;
    auto [p, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), tv);
    if (ts.empty() || ec != std::errc() || p != ts.data() + ts.size()) fail(r, kTimeColumn, ts, "an integer period");
    times[r] = tv;
    for (std::size_t c = 0; c < src.size(); ++c) {
      const std::string& cell = row[src[c]];
      if (cell.empty()) continue;
      auto v = detail::parse_double(cell);
      if (!v) fail(r, cols[c].first, cell, "a number");
      cols[c].second.values[r] = *v;
    }
  }
  PanelDataset d = PanelDataset::from_long(units, times, std::move(cols));
  std::vector<std::string> required = roles.covariates;
  required.insert(required.end(), roles.binary.begin(), roles.binary.end());
  for (const auto& c : {roles.treatment, roles.cluster, roles.group}) {
    if (!c.empty()) required.push_back(c);
  }
  for (const auto& c : required) {
    if (!d.has_column(c)) throw ValidationError(source + ": configured column '" + c + "' not found");
  }
  d = d.with_cluster_col(roles.cluster).with_group_col(roles.group);
  validate_panel(d);
  return d;
}

inline PanelDataset ingest_csv(std::istream& in, const ColumnRoles& roles, const std::string& source = "<stream>") {
  return panel_from_table(read_table(in, source), roles, source);
}

inline PanelDataset ingest_csv(const fs::path& path, const ColumnRoles& roles) {
  return panel_from_table(read_table(path), roles, path.string());
}

// Report tables. A monostate cell is missing and prints as an empty field.
using Cell = std::variant<std::monostate, double, std::string>;

struct ReportTable {
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;
};

inline std::string format_number(double v, int digits) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_table(std::ostream& out, const ReportTable& t, int digits) {
  auto line = [&](const auto& cells, auto&& render) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) out << ',';
      out << render(cells[k]);
    }
    out << '\n';
  };
  line(t.header, [](const std::string& s) { return csv_field(s); });
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) throw ValidationError("report row does not match its header");
    line(row, [&](const Cell& c) -> std::string {
      if (auto d = std::get_if<double>(&c)) return format_number(*d, digits);
      if (auto s = std::get_if<std::string>(&c)) return csv_field(*s);
      return "";
    });
  }
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

// Writes <stem>.csv at 6 significant digits and <stem>.full.csv at full precision.
inline std::vector<fs::path> write_report(const fs::path& dir, const std::string& stem, const ReportTable& t) {
  std::vector<fs::path> files;
  for (auto [suffix, digits] : {std::pair{".csv", 6}, std::pair{".full.csv", 17}}) {
    std::ostringstream s;
    write_table(s, t, digits);
    files.push_back(dir / (stem + suffix));
    write_text_file(files.back(), s.str());
  }
  return files;
}

inline ReportTable panel_table(const PanelDataset& d) {
  ReportTable t;
  t.header = {kUnitColumn, kTimeColumn};
  for (const auto& c : d.column_names()) t.header.push_back(c);
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    std::vector<Cell> row{d.unit_name(r), static_cast<double>(d.time(r))};
    for (const auto& c : d.column_names()) {
      const Value& v = d.column(c).values[r];
      row.push_back(v ? Cell{*v} : Cell{});
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void write_panel_csv(const PanelDataset& d, const fs::path& path) {
  std::ostringstream s;
  write_table(s, panel_table(d), 17);
  write_text_file(path, s.str());
}

inline const char* significance_stars(double p) {
  if (p < 0.01) return "***";
  if (p < 0.05) return "**";
  if (p < 0.1) return "*";
  return "";
}

inline ReportTable weights_table(const PanelDataset& d, const WeightSeries& w) {
  ReportTable t{{"unit", "time", "raw", "truncated"}, {}};
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    t.rows.push_back({d.unit_name(r), static_cast<double>(d.time(r)), w.raw[r] ? Cell{*w.raw[r]} : Cell{},
                      w.truncated[r] ? Cell{*w.truncated[r]} : Cell{}});
  }
  return t;
}

inline ReportTable balance_table(const BalanceReport& rep) {
  ReportTable t{{"covariate", "smd_unweighted", "smd_weighted_raw", "smd_weighted_truncated",
                 "smd_squared_unweighted", "smd_squared_weighted", "balanced"},
                {}};
  for (const auto& r : rep.rows) {
    t.rows.push_back({r.name, r.smd_unweighted, r.smd_weighted_raw, r.smd_weighted_truncated,
                      r.smd_squared_unweighted, r.smd_squared_covariate,
                      std::string(r.smd_weighted_truncated < rep.threshold ? "yes" : "no")});
  }
  return t;
}

inline ReportTable balance_summary_table(const BalanceReport& rep, const WeightProvenance& prov) {
  ReportTable t{{"metric", "value"}, {}};
  auto add = [&](const char* name, double v) { t.rows.push_back({std::string(name), v}); };
  add("ess_percent", rep.ess_percent);
  add("overlap_percent", rep.overlap_percent);
  add("raw_mean", rep.raw_stats.mean);
  add("raw_min", rep.raw_stats.min);
  add("raw_max", rep.raw_stats.max);
  add("truncated_mean", rep.truncated_stats.mean);
  add("truncated_min", rep.truncated_stats.min);
  add("truncated_max", rep.truncated_stats.max);
  add("n_weighted", static_cast<double>(rep.truncated_stats.n));
  add("window", prov.window);
  add("lower_pct", prov.lower_pct);
  add("upper_pct", prov.upper_pct);
  add("lower_quantile", prov.lower_quantile);
  add("upper_quantile", prov.upper_quantile);
  add("pct_clamped_low", prov.pct_clamped_low);
  add("pct_clamped_high", prov.pct_clamped_high);
  return t;
}

inline ReportTable results_table(const InferenceResult& inf, const PipelineConfig& cfg) {
  ReportTable t{{"spec", "term", "family", "horizon", "weighted", "coefficient", "se", "ci_low", "ci_high",
                 "ci_low_normal", "ci_high_normal", "p_value", "stars", "effect", "effect_se", "effect_ci_low",
                 "effect_ci_high", "n_obs", "n_units", "ess_percent", "replicates", "failed"},
                {}};
  std::size_t k = 0;
  for (const auto& spec : cfg.outcomes) {
    for (std::size_t j = 0; j < spec.treatment_terms.size(); ++j, ++k) {
      const EffectEstimate& e = inf.estimates.at(k);
      t.rows.push_back({e.spec, e.term, std::string(to_string(e.family)), static_cast<double>(spec.horizon),
                        std::string(spec.weighted ? "yes" : "no"), e.coefficient, e.se, e.ci_low, e.ci_high,
                        e.ci_low_normal, e.ci_high_normal, e.p_value, std::string(significance_stars(e.p_value)),
                        e.incremental_effect, e.ie_se, e.ie_ci_low, e.ie_ci_high, static_cast<double>(e.n_obs),
                        static_cast<double>(e.n_units), e.ess_percent,
                        static_cast<double>(inf.boot.replicates.size()), static_cast<double>(inf.boot.n_failed)});
    }
  }
  return t;
}

inline ReportTable sensitivity_table(const SensitivityCurve& c) {
  ReportTable t{{"phi", "estimate", "incremental_effect", "ci_low", "ci_high", "ie_ci_low", "ie_ci_high", "error"},
                {}};
  for (std::size_t i = 0; i < c.phis.size(); ++i) {
    t.rows.push_back({c.phis[i], c.estimates[i], c.incremental[i], c.ci_low[i], c.ci_high[i], c.ie_ci_low[i],
                      c.ie_ci_high[i], c.errors[i]});
  }
  return t;
}

inline std::string positivity_text(const PositivityDiagnostic& p, const std::string& spec, const std::string& term) {
  std::ostringstream s;
  auto num = [](double v) { return format_number(v, 6); };
  s << "spec: " << spec << '\n'
    << "term: " << term << '\n'
    << "estimate: " << num(p.estimate) << '\n'
    << "truth_in_fitted_world: " << num(p.truth) << '\n'
    << "mean_replicate: " << num(p.mean_replicate) << '\n'
    << "replicate_sd: " << num(p.replicate_sd) << '\n'
    << "bias: " << num(p.bias) << '\n'
    << "se_reference: " << num(p.se_reference) << '\n'
    << "flag: " << (p.flag ? "true" : "false") << '\n'
    << "base_ci: [" << num(p.base_ci_low) << ", " << num(p.base_ci_high) << "]\n"
    << "bias_corrected_ci: [" << num(p.corrected_ci_low) << ", " << num(p.corrected_ci_high) << "]\n"
    << "replicates: " << p.replicates << '\n'
    << "failed: " << p.n_failed << '\n';
  if (p.flag) {
    s << "note: |bias| is at least one standard error; estimates for this spec are sensitive to "
         "positivity or model misspecification\n";
  }
  return s.str();
}

inline ReportTable windows_table(const std::vector<std::pair<std::string, WindowEffect>>& ws) {
  ReportTable t{{"window", "sum", "se", "ci_low", "ci_high"}, {}};
  for (const auto& [name, w] : ws) t.rows.push_back({name, w.sum, w.se, w.ci_low, w.ci_high});
  return t;
}

struct SensitivityConfig {
  std::vector<double> phis = default_phi_grid();
  KhmEngine engine = KhmEngine::fractional_logistic;
  std::size_t spec = 0;
  bool bootstrap = true;
  int petersen_replicates = 200;
  int truth_draws = 20;
};

struct WindowGroup {
  std::string name;
  std::vector<std::size_t> specs;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  fs::path input;
  ColumnRoles columns;
  PipelineConfig pipeline;
  BootstrapOptions bootstrap;
  SensitivityConfig sensitivity;
  std::vector<WindowGroup> windows;
  fs::path output_dir = "msmfe_out";

  void validate() const {
    if (schema_version != kSchemaVersion) {
      throw ValidationError("unsupported schema_version " + std::to_string(schema_version) + " (expected " +
                            std::to_string(kSchemaVersion) + ")");
    }
    if (input.empty()) throw ValidationError("no input file configured");
    pipeline.validate();
    if (bootstrap.replicates < 1) throw ValidationError("bootstrap replicates must be positive");
    if (bootstrap.threads < 0) throw ValidationError("threads must be nonnegative");
    if (sensitivity.spec >= pipeline.outcomes.size()) throw ValidationError("sensitivity spec index out of range");
    if (sensitivity.phis.empty()) throw ValidationError("empty phi grid");
    if (sensitivity.petersen_replicates < 1 || sensitivity.truth_draws < 1) {
      throw ValidationError("positivity check needs positive replicate and draw counts");
    }
    for (const auto& w : windows) {
      for (std::size_t s : w.specs) {
        if (s >= pipeline.outcomes.size()) throw ValidationError("window '" + w.name + "' refers to a missing spec");
      }
    }
  }
};

namespace detail {

// Reads keys from one JSON object and rejects keys it was never asked about.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ValidationError("config: " + where_ + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config: " + path(key) + ": " + e.what());
    }
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw ValidationError("config: missing required key " + path(key));
    T out{};
    get(key, out);
    return out;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("config: unknown key " + path(k));
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Family parse_family(const std::string& s) {
  if (s == "logistic") return Family::logistic;
  if (s == "gaussian") return Family::gaussian;
  throw ValidationError("config: unknown family '" + s + "' (logistic, gaussian)");
}

inline FeLevel parse_fe_level(const std::string& s) {
  for (FeLevel f : {FeLevel::unit, FeLevel::group, FeLevel::none}) {
    if (s == to_string(f)) return f;
  }
  throw ValidationError("config: unknown fe_level '" + s + "' (unit, group, none)");
}

inline KhmEngine parse_engine(const std::string& s) {
  if (s == "fractional_logistic") return KhmEngine::fractional_logistic;
  if (s == "gaussian") return KhmEngine::gaussian;
  throw ValidationError("config: unknown engine '" + s + "' (fractional_logistic, gaussian)");
}

inline const char* engine_name(KhmEngine e) {
  return e == KhmEngine::fractional_logistic ? "fractional_logistic" : "gaussian";
}

}  // namespace detail

// Relative input and output paths are taken relative to base_dir.
inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir = {}) {
  RunConfig c;
  detail::JsonFields top(j, "");
  c.schema_version = top.require<int>("schema_version");
  if (c.schema_version != kSchemaVersion) {
    throw ValidationError("unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
  }
  c.input = base_dir / top.require<std::string>("input");
  if (top.has("output")) c.output_dir = base_dir / top.require<std::string>("output");
  top.get("threads", c.bootstrap.threads);

  auto& w = c.pipeline.weights;
  if (top.has("columns")) {
    detail::JsonFields f(top.raw("columns"), "columns");
    f.get("treatment", c.columns.treatment);
    f.get("covariates", c.columns.covariates);
    f.get("binary", c.columns.binary);
    f.get("cluster", c.columns.cluster);
    f.get("group", c.columns.group);
    f.finish();
  }
  w.treatment = c.columns.treatment;
  w.covariates = c.columns.covariates;
  w.group_col = c.columns.group;

  if (top.has("weights")) {
    detail::JsonFields f(top.raw("weights"), "weights");
    f.get("window", w.window);
    if (f.has("truncation")) {
      const auto pct = f.require<std::vector<double>>("truncation");
      if (pct.size() != 2) throw ValidationError("config: weights.truncation must be [lower, upper]");
      w.lower_pct = pct[0];
      w.upper_pct = pct[1];
    }
    if (f.has("fe_level")) w.fe_level = detail::parse_fe_level(f.require<std::string>("fe_level"));
    f.get("treatment_lags", w.treatment_lags);
    if (f.has("numerator_lags")) w.numerator_lags = f.require<int>("numerator_lags");
    f.get("numerator_unit_effects", w.numerator_unit_effects);
    f.get("time_trend", w.time_trend);
    f.get("stabilized", w.stabilized);
    f.finish();
  }

  if (!top.has("outcomes") || !top.raw("outcomes").is_array()) {
    throw ValidationError("config: outcomes must be a non-empty array");
  }
  std::size_t k = 0;
  for (const auto& item : top.raw("outcomes")) {
    detail::JsonFields f(item, "outcomes[" + std::to_string(k++) + "]");
    OutcomeSpec s;
    s.name = f.require<std::string>("name");
    s.outcome = f.require<std::string>("outcome");
    s.treatment_terms = f.require<std::vector<std::string>>("terms");
    if (f.has("family")) s.family = detail::parse_family(f.require<std::string>("family"));
    f.get("horizon", s.horizon);
    f.get("weighted", s.weighted);
    f.get("future_aligned_weights", s.future_aligned_weights);
    f.get("focal", s.focal_term);
    f.finish();
    c.pipeline.outcomes.push_back(std::move(s));
  }

  {
    if (!top.has("bootstrap")) throw ValidationError("config: missing required key bootstrap (with a seed)");
    detail::JsonFields f(top.raw("bootstrap"), "bootstrap");
    c.bootstrap.seed = f.require<std::uint64_t>("seed");
    f.get("replicates", c.bootstrap.replicates);
    f.get("max_failure_share", c.bootstrap.max_failure_share);
    f.finish();
  }

  if (top.has("sensitivity")) {
    detail::JsonFields f(top.raw("sensitivity"), "sensitivity");
    if (f.has("phi_grid") && f.has("phi_step")) {
      throw ValidationError("config: give sensitivity.phi_grid or sensitivity.phi_step, not both");
    }
    f.get("phi_grid", c.sensitivity.phis);
    if (f.has("phi_step")) c.sensitivity.phis = default_phi_grid(f.require<double>("phi_step"));
    if (f.has("engine")) c.sensitivity.engine = detail::parse_engine(f.require<std::string>("engine"));
    f.get("spec", c.sensitivity.spec);
    f.get("bootstrap", c.sensitivity.bootstrap);
    f.get("petersen_replicates", c.sensitivity.petersen_replicates);
    f.get("truth_draws", c.sensitivity.truth_draws);
    f.finish();
  }

  if (top.has("windows")) {
    std::size_t i = 0;
    for (const auto& item : top.raw("windows")) {
      detail::JsonFields f(item, "windows[" + std::to_string(i++) + "]");
      WindowGroup g;
      g.name = f.require<std::string>("name");
      g.specs = f.require<std::vector<std::size_t>>("specs");
      f.finish();
      c.windows.push_back(std::move(g));
    }
  }
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

// The effective configuration, in the same schema the loader reads.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& w = c.pipeline.weights;
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["input"] = c.input.string();
  j["output"] = c.output_dir.string();
  j["threads"] = c.bootstrap.threads;
  j["columns"] = {{"treatment", c.columns.treatment}, {"covariates", c.columns.covariates},
                  {"binary", c.columns.binary},       {"cluster", c.columns.cluster},
                  {"group", c.columns.group}};
  j["weights"] = {{"window", w.window},
                  {"truncation", {w.lower_pct, w.upper_pct}},
                  {"fe_level", to_string(w.fe_level)},
                  {"treatment_lags", w.treatment_lags},
                  {"numerator_lags", w.num_lags()},
                  {"numerator_unit_effects", w.numerator_unit_effects},
                  {"time_trend", w.time_trend},
                  {"stabilized", w.stabilized}};
  j["outcomes"] = nlohmann::json::array();
  for (const auto& s : c.pipeline.outcomes) {
    j["outcomes"].push_back({{"name", s.name},
                             {"outcome", s.outcome},
                             {"terms", s.treatment_terms},
                             {"family", to_string(s.family)},
                             {"horizon", s.horizon},
                             {"weighted", s.weighted},
                             {"future_aligned_weights", s.future_aligned_weights},
                             {"focal", s.focal()}});
  }
  j["bootstrap"] = {{"seed", c.bootstrap.seed},
                    {"replicates", c.bootstrap.replicates},
                    {"max_failure_share", c.bootstrap.max_failure_share}};
  j["sensitivity"] = {{"phi_grid", c.sensitivity.phis},
                      {"engine", detail::engine_name(c.sensitivity.engine)},
                      {"spec", c.sensitivity.spec},
                      {"bootstrap", c.sensitivity.bootstrap},
                      {"petersen_replicates", c.sensitivity.petersen_replicates},
                      {"truth_draws", c.sensitivity.truth_draws}};
  j["windows"] = nlohmann::json::array();
  for (const auto& g : c.windows) j["windows"].push_back({{"name", g.name}, {"specs", g.specs}});
  return j;
}

enum class Stage { fit, balance, sensitivity, positivity, all };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::fit: return "fit";
    case Stage::balance: return "balance";
    case Stage::sensitivity: return "sensitivity";
    case Stage::positivity: return "positivity";
    case Stage::all: return "all";
  }
  return "?";
}

// Streams derived from the configured seed, one per randomized stage.
inline std::uint64_t stage_seed(std::uint64_t seed, Stage s) {
  switch (s) {
    case Stage::sensitivity: return seed + 1;
    case Stage::positivity: return seed + 2;
    default: return seed;
  }
}

struct RunReport {
  std::vector<fs::path> files;
  std::optional<InferenceResult> inference;
  std::optional<BalanceReport> balance;
  std::optional<SensitivityCurve> sensitivity;
  std::optional<PositivityDiagnostic> positivity;
};

// Runs one stage (or all of them) and writes its artifacts plus run.log and
// config.json into the output directory. Tables are written after all
// computation has finished.
inline RunReport run_pipeline(const RunConfig& cfg, Stage stage, std::ostream* progress = nullptr) {
  cfg.validate();
  auto say = [&](const std::string& m) {
    if (progress) *progress << m << std::endl;
  };
  const bool all = stage == Stage::all;
  const PanelDataset raw = ingest_csv(cfg.input, cfg.columns);
  say("read " + std::to_string(raw.n_rows()) + " rows, " + std::to_string(raw.n_units()) + " units from " +
      cfg.input.string());

  RunReport rep;
  std::vector<std::pair<std::string, ReportTable>> tables;
  std::ostringstream log;
  log << "msmfe " << kVersion << '\n'
      << "stage: " << to_string(stage) << '\n'
      << "input: " << cfg.input.string() << '\n'
      << "rows: " << raw.n_rows() << '\n'
      << "units: " << raw.n_units() << '\n'
      << "bootstrap_seed: " << cfg.bootstrap.seed << '\n'
      << "bootstrap_replicates: " << cfg.bootstrap.replicates << '\n'
      << "threads: " << cfg.bootstrap.threads << '\n';

  PipelineResult base;
  if (all || stage == Stage::fit) {
    say("fitting " + std::to_string(cfg.pipeline.outcomes.size()) + " outcome spec(s) with " +
        std::to_string(cfg.bootstrap.replicates) + " bootstrap replicates");
    rep.inference = estimate_with_inference(raw, cfg.pipeline, cfg.bootstrap);
    base = rep.inference->base;
    tables.emplace_back("results", results_table(*rep.inference, cfg.pipeline));
    std::vector<std::pair<std::string, WindowEffect>> ws;
    for (const auto& g : cfg.windows) ws.emplace_back(g.name, window_effect(*rep.inference, cfg.pipeline, g.specs));
    if (!ws.empty()) tables.emplace_back("windows", windows_table(ws));
    log << "bootstrap_failed: " << rep.inference->boot.n_failed << '\n';
    for (const auto& f : rep.inference->boot.failures) log << "  " << f << '\n';
  } else {
    base = run_estimation(raw, cfg.pipeline);
  }
  log << "prepared_rows: " << base.data.n_rows() << '\n' << "removed_rows: " << base.removed << '\n';
  for (const auto& w : base.warnings) log << "warning: " << w << '\n';
  tables.emplace_back("weights", weights_table(base.data, base.weights));

  if (all || stage == Stage::balance) {
    const auto ps = predict(base.models.denominator, base.data);
    rep.balance = balance_report(base.data, cfg.pipeline.weights.treatment, cfg.pipeline.weights.covariates,
                                 base.weights, ps.values);
    tables.emplace_back("balance", balance_table(*rep.balance));
    tables.emplace_back("balance_summary", balance_summary_table(*rep.balance, base.weights.provenance));
  }

  if (all || stage == Stage::sensitivity) {
    SweepOptions opt;
    opt.phis = cfg.sensitivity.phis;
    opt.engine = cfg.sensitivity.engine;
    opt.spec_index = cfg.sensitivity.spec;
    opt.with_bootstrap = cfg.sensitivity.bootstrap;
    opt.bootstrap = cfg.bootstrap;
    opt.bootstrap.seed = stage_seed(cfg.bootstrap.seed, Stage::sensitivity);
    say("sensitivity sweep over " + std::to_string(opt.phis.size()) + " phi values");
    rep.sensitivity = khm_sweep(raw, cfg.pipeline, opt);
    tables.emplace_back("sensitivity", sensitivity_table(*rep.sensitivity));
    log << "sensitivity_seed: " << opt.bootstrap.seed << '\n'
        << "sensitivity_engine: " << detail::engine_name(opt.engine) << '\n'
        << "sensitivity_failed: " << rep.sensitivity->n_failed << '\n';
  }

  std::string positivity;
  if (all || stage == Stage::positivity) {
    const std::size_t idx = cfg.sensitivity.spec;
    const auto& spec = cfg.pipeline.outcomes[idx];
    EffectEstimate ref;
    if (rep.inference) {
      ref = rep.inference->estimates.at(estimate_offset(cfg.pipeline, idx, spec.focal()) / 2);
    } else {
      say("bootstrap for the reference standard error");
      const auto one = detail::single_spec(cfg.pipeline, idx);
      const auto inf = estimate_with_inference(raw, one, cfg.bootstrap);
      ref = inf.estimates.at(estimate_offset(one, 0, spec.focal()) / 2);
    }
    PetersenOptions opt;
    opt.spec_index = idx;
    opt.replicates = cfg.sensitivity.petersen_replicates;
    opt.seed = stage_seed(cfg.bootstrap.seed, Stage::positivity);
    opt.threads = cfg.bootstrap.threads;
    opt.truth_draws = cfg.sensitivity.truth_draws;
    opt.max_failure_share = cfg.bootstrap.max_failure_share;
    say("parametric positivity check with " + std::to_string(opt.replicates) + " replicates");
    rep.positivity = petersen_bootstrap(raw, cfg.pipeline, ref.se, ref.ci_low, ref.ci_high, opt);
    positivity = positivity_text(*rep.positivity, spec.name, spec.focal());
    log << "positivity_seed: " << opt.seed << '\n' << "positivity_failed: " << rep.positivity->n_failed << '\n';
  }

  fs::create_directories(cfg.output_dir);
  for (const auto& [stem, t] : tables) {
    for (auto& f : write_report(cfg.output_dir, stem, t)) rep.files.push_back(std::move(f));
  }
  if (!positivity.empty()) {
    rep.files.push_back(cfg.output_dir / "positivity.txt");
    write_text_file(rep.files.back(), positivity);
  }
  rep.files.push_back(cfg.output_dir / "config.json");
  write_text_file(rep.files.back(), to_json(cfg).dump(2) + "\n");
  rep.files.push_back(cfg.output_dir / "run.log");
  write_text_file(rep.files.back(), log.str());
  return rep;
}

}  // namespace msmfe
