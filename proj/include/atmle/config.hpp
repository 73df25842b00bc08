#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/estimators.hpp"
#include "atmle/nuisance.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace atmle {

inline const std::vector<std::string>& estimator_names() {
  static const std::vector<std::string> names{"atmle", "cv-atmle", "rct-only", "tmle", "pooled-aipw"};
  return names;
}

// Everything a run reads from its config file. Flags override file values
// through `set`, so both paths share one validator.
struct RunConfig {
  AtmleOptions atmle;
  CsvSchema csv;
  std::string estimator = "atmle";

  // simulate
  std::string scenario = "a";
  std::optional<double> alpha;
  int n_rct = 500;
  double ext_multiplier = 3.0;
  int reps = 300;
  double censoring_rate = 0.0;

  void set(const std::string& key, const std::string& value);
  [[nodiscard]] nlohmann::json to_json() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline long long to_integer(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  const auto parsed = parse_double(v);
  if (!parsed) throw ValidationError("config key '" + key + "' expects a number, got '" + v + "'");
  return *parsed;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "' expects true/false, got '" + v + "'");
}

inline int positive(const std::string& key, long long v, long long lo = 1) {
  if (v < lo || v > 1'000'000'000) throw ValidationError("config key '" + key + "' out of range");
  return static_cast<int>(v);
}

inline int spline_order(const std::string& key, const std::string& x) {
  const auto v = to_integer(key, x);
  if (v != 0 && v != 1) throw ValidationError("config key '" + key + "' must be 0 or 1");
  return static_cast<int>(v);
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  using Setter = std::function<void(RunConfig&, const std::string&)>;
  static const std::map<std::string, Setter> setters{
      {"v_folds", [](RunConfig& c, const std::string& x) { c.atmle.v_folds = positive("v_folds", to_integer("v_folds", x), 2); }},
      {"seed",
       [](RunConfig& c, const std::string& x) {
         const long long s = to_integer("seed", x);
         if (s < 0) throw ValidationError("config key 'seed' must be non-negative");
         c.atmle.seed = static_cast<std::uint64_t>(s);
       }},
      {"covariate_columns", [](RunConfig& c, const std::string& x) { c.csv.covariate_columns = split_list(x); }},
      {"external_controls_only",
       [](RunConfig& c, const std::string& x) {
         if (x == "auto") {
           c.csv.external_controls_only.reset();
         } else {
           c.csv.external_controls_only = to_bool("external_controls_only", x);
         }
       }},
      {"estimator",
       [](RunConfig& c, const std::string& x) {
         const auto& names = estimator_names();
         if (std::find(names.begin(), names.end(), x) == names.end()) throw ValidationError("unknown estimator '" + x + "'");
         c.estimator = x;
       }},
      {"pooled",
       [](RunConfig& c, const std::string& x) {
         if (x != "atmle" && x != "regular-tmle") throw ValidationError("config key 'pooled' expects atmle or regular-tmle");
         c.atmle.pooled_regular_tmle = x == "regular-tmle";
       }},
      {"learners",
       [](RunConfig& c, const std::string& x) {
         std::vector<LearnerSpec> lib;
         for (const auto& name : split_list(x)) lib.push_back(learner_from_name(name));
         if (lib.empty()) throw ValidationError("config key 'learners' must name at least one learner");
         c.atmle.nuisance.library = std::move(lib);
       }},
      {"truncation",
       [](RunConfig& c, const std::string& x) {
         const double t = to_real("truncation", x);
         if (!(t >= 1e-4 && t < 0.5)) throw ValidationError("config key 'truncation' must lie in [1e-4, 0.5)");
         c.atmle.nuisance.truncation = t;
       }},
      {"known_trial_propensity",
       [](RunConfig& c, const std::string& x) {
         const double p = to_real("known_trial_propensity", x);
         if (!(p > 0.0 && p < 1.0)) throw ValidationError("config key 'known_trial_propensity' must lie in (0, 1)");
         c.atmle.known_trial_propensity = p;
       }},
      {"tau_a_degree", [](RunConfig& c, const std::string& x) { c.atmle.tau_a.basis.max_degree = positive("tau_a_degree", to_integer("tau_a_degree", x)); }},
      {"tau_a_knots", [](RunConfig& c, const std::string& x) { c.atmle.tau_a.basis.max_knots_per_dim = positive("tau_a_knots", to_integer("tau_a_knots", x)); }},
      {"tau_s_degree", [](RunConfig& c, const std::string& x) { c.atmle.tau_s.basis.max_degree = positive("tau_s_degree", to_integer("tau_s_degree", x)); }},
      {"tau_s_knots", [](RunConfig& c, const std::string& x) { c.atmle.tau_s.basis.max_knots_per_dim = positive("tau_s_knots", to_integer("tau_s_knots", x)); }},
      {"tau_a_order", [](RunConfig& c, const std::string& x) { c.atmle.tau_a.basis.order = spline_order("tau_a_order", x); }},
      {"tau_s_order", [](RunConfig& c, const std::string& x) { c.atmle.tau_s.basis.order = spline_order("tau_s_order", x); }},
      {"undersmooth",
       [](RunConfig& c, const std::string& x) {
         const double u = to_real("undersmooth", x);
         if (!(u > 0.0 && u <= 1.0)) throw ValidationError("config key 'undersmooth' must lie in (0, 1]");
         c.atmle.tau_a.undersmooth = u;
         c.atmle.tau_s.undersmooth = u;
       }},
      {"force_main_terms",
       [](RunConfig& c, const std::string& x) {
         const bool b = to_bool("force_main_terms", x);
         c.atmle.tau_a.force_main_terms = b;
         c.atmle.tau_s.force_main_terms = b;
       }},
      {"max_targeting_iterations",
       [](RunConfig& c, const std::string& x) { c.atmle.max_targeting_iterations = positive("max_targeting_iterations", to_integer("max_targeting_iterations", x)); }},
      {"scenario",
       [](RunConfig& c, const std::string& x) {
         if (x != "a" && x != "b" && x != "c" && x != "d" && x != "positivity") throw ValidationError("unknown scenario '" + x + "'");
         c.scenario = x;
       }},
      {"alpha", [](RunConfig& c, const std::string& x) { c.alpha = to_real("alpha", x); }},
      {"n_rct", [](RunConfig& c, const std::string& x) { c.n_rct = positive("n_rct", to_integer("n_rct", x), 10); }},
      {"ext_multiplier",
       [](RunConfig& c, const std::string& x) {
         const double m = to_real("ext_multiplier", x);
         if (!(m >= 0.0 && m <= 100.0)) throw ValidationError("config key 'ext_multiplier' must lie in [0, 100]");
         c.ext_multiplier = m;
       }},
      {"reps", [](RunConfig& c, const std::string& x) { c.reps = positive("reps", to_integer("reps", x)); }},
      {"censoring_rate",
       [](RunConfig& c, const std::string& x) {
         const double r = to_real("censoring_rate", x);
         if (!(r >= 0.0 && r < 1.0)) throw ValidationError("config key 'censoring_rate' must lie in [0, 1)");
         c.censoring_rate = r;
       }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError("unknown config key '" + key + "'");
  if (v.empty()) throw ValidationError("config key '" + key + "' has no value");
  it->second(*this, v);
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json learners = nlohmann::json::array();
  for (const auto& l : atmle.nuisance.library) learners.push_back(l.name());
  nlohmann::json j{{"v_folds", atmle.v_folds},
                   {"seed", atmle.seed},
                   {"covariate_columns", csv.covariate_columns},
                   {"external_controls_only", csv.external_controls_only ? nlohmann::json(*csv.external_controls_only) : nlohmann::json("auto")},
                   {"estimator", estimator},
                   {"pooled", atmle.pooled_regular_tmle ? "regular-tmle" : "atmle"},
                   {"learners", learners},
                   {"truncation", atmle.nuisance.truncation},
                   {"tau_a_degree", atmle.tau_a.basis.max_degree},
                   {"tau_a_knots", atmle.tau_a.basis.max_knots_per_dim},
                   {"tau_s_degree", atmle.tau_s.basis.max_degree},
                   {"tau_s_knots", atmle.tau_s.basis.max_knots_per_dim},
                   {"tau_a_order", atmle.tau_a.basis.order},
                   {"tau_s_order", atmle.tau_s.basis.order},
                   {"undersmooth", atmle.tau_s.undersmooth},
                   {"force_main_terms", atmle.tau_s.force_main_terms},
                   {"max_targeting_iterations", atmle.max_targeting_iterations},
                   {"scenario", scenario},
                   {"n_rct", n_rct},
                   {"ext_multiplier", ext_multiplier},
                   {"reps", reps},
                   {"censoring_rate", censoring_rate}};
  j["known_trial_propensity"] = atmle.known_trial_propensity ? nlohmann::json(*atmle.known_trial_propensity) : nlohmann::json(nullptr);
  j["alpha"] = alpha ? nlohmann::json(*alpha) : nlohmann::json(nullptr);
  return j;
}

// `key = value` lines; `#` starts a comment. Later lines win.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    base.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  return parse_config(in, std::move(base));
}

}  // namespace atmle
