#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/estimators.hpp"

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace atmle::sim {

struct ScenarioSpec {
  std::string id = "a";            // a | b | c | d | positivity
  std::optional<double> alpha;     // positivity only
  int n_rct = 500;
  int n_external = 1500;           // for positivity: total n = n_rct + n_external
  std::uint64_t seed = 1;
  double censoring_rate = 0.0;     // MCAR outcome missingness
  double bias_scale = 1.0;         // multiplies the external bias term B

  void validate() const {
    if (id != "a" && id != "b" && id != "c" && id != "d" && id != "positivity") {
      throw ValidationError("unknown scenario '" + id + "'");
    }
    if (n_rct <= 0 || n_external <= 0) throw ValidationError("sample sizes must be positive");
    if (alpha.has_value() != (id == "positivity")) throw ValidationError("alpha is required for, and only for, the positivity scenario");
    if (censoring_rate < 0.0 || censoring_rate >= 1.0) throw ValidationError("censoring rate must lie in [0,1)");
  }
  [[nodiscard]] std::string label() const {
    if (id != "positivity") return id;
    char buf[48];
    std::snprintf(buf, sizeof buf, "positivity_alpha%g", *alpha);
    return buf;
  }
  // Effect of A in the outcome equation (the trial-anchored ATE).
  [[nodiscard]] double psi() const { return (id == "c" || id == "d") ? 4.2 : 1.5; }
};

inline ScenarioSpec scenario(const std::string& id, int n_rct = 500, double multiplier = 3.0,
                             std::optional<double> alpha = std::nullopt) {
  ScenarioSpec s;
  s.id = id;
  s.n_rct = n_rct;
  s.n_external = static_cast<int>(std::lround(multiplier * n_rct));
  s.alpha = alpha;
  s.validate();
  return s;
}

namespace detail {

inline double draw_w(const std::string& id, std::mt19937_64& rng) {
  if (id == "a" || id == "b") return std::normal_distribution<double>(0.0, 1.0)(rng);
  if (id == "positivity") return std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double bias_term(const std::string& id, const double* w, int a) {
  const double untreated = a == 0 ? 1.0 : 0.0;
  if (id == "a") return 0.2 + 1.1 * w[0] * untreated;
  if (id == "b") return 0.5 + 3.1 * w[0] * untreated + 0.8 * w[2];
  if (id == "c") return 0.3 + 0.9 * w[1] * untreated + 0.7 * w[2] * (w[1] > 0.5 ? 1.0 : 0.0);
  if (id == "d") return 0.3 + 1.1 * w[0] * untreated + 0.9 * w[1] * w[1] * w[2];
  return 0.2 + 2.1 * w[0] * a;
}

inline double outcome_mean(const std::string& id, const double* w, int a) {
  if (id == "a" || id == "b") return 2.5 + 0.9 * w[0] + 1.1 * w[1] + 2.7 * w[2] + 1.5 * a;
  if (id == "c" || id == "d") return 1.9 + 4.2 * a + 0.9 * w[0] + 1.4 * w[1] + 2.1 * w[2];
  return 1.9 + 1.5 * a + 0.9 * w[0] + 1.4 * w[1] + 2.1 * w[2];
}

inline double noise_sd(const std::string& id) { return id == "positivity" ? 0.2 : 1.0; }

// P(A=1 | S=0, W)
inline double external_propensity(const std::string& id, const double* w) {
  if (id == "a" || id == "b") return expit(0.5 * w[0]);
  if (id == "c" || id == "d") return expit(w[0]);
  return expit(-0.5 * w[0]);
}

inline constexpr double kTrialPropensity = 0.67;

inline double enrollment_probability(double alpha, const double* w) {
  return expit(alpha * (-2.0 + w[0] + w[1] + std::sin(2.0 * w[0]) + std::sin(2.0 * w[1])));
}

}  // namespace detail

inline FusionDataset generate(const ScenarioSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, detail::noise_sd(spec.id));
  const int n = spec.n_rct + spec.n_external;
  std::vector<int> s(static_cast<std::size_t>(n)), a(static_cast<std::size_t>(n)), delta(static_cast<std::size_t>(n), 1);
  Matrix w(n, 3);
  Vector y(n);
  for (int i = 0; i < n; ++i) {
    double wi[3];
    for (double& v : wi) v = detail::draw_w(spec.id, rng);
    int si;
    if (spec.id == "positivity") {
      si = unif(rng) < detail::enrollment_probability(*spec.alpha, wi) ? 1 : 0;
    } else {
      si = i < spec.n_rct ? 1 : 0;
    }
    const double p = si == 1 ? detail::kTrialPropensity : detail::external_propensity(spec.id, wi);
    const int ai = unif(rng) < p ? 1 : 0;
    double yi = detail::outcome_mean(spec.id, wi, ai) + noise(rng);
    if (si == 0) yi += spec.bias_scale * detail::bias_term(spec.id, wi, ai);
    if (spec.censoring_rate > 0.0 && unif(rng) < spec.censoring_rate) {
      delta[static_cast<std::size_t>(i)] = 0;
      yi = std::numeric_limits<double>::quiet_NaN();
    }
    const auto ii = static_cast<std::size_t>(i);
    s[ii] = si;
    a[ii] = ai;
    for (int j = 0; j < 3; ++j) w(i, j) = wi[j];
    y(i) = yi;
  }
  if (spec.censoring_rate > 0.0) return FusionDataset(std::move(s), std::move(w), std::move(a), std::move(y), std::move(delta));
  return FusionDataset(std::move(s), std::move(w), std::move(a), std::move(y));
}

struct TrueValues {
  double psi = 0.0;
  double psi_tilde = 0.0;
  double psi_sharp = 0.0;           // psi_tilde - psi
  double psi_sharp_weighted = 0.0;  // independent draw of the weighted enrollment-effect form
  double mc_se_tilde = 0.0;
  double mc_se_weighted = 0.0;
};

// Population P(S=1 | W, A=a) implied by the design.
inline double enrollment_given_treatment(const ScenarioSpec& spec, const double* w, int a) {
  const double p1 = spec.id == "positivity"
                        ? detail::enrollment_probability(*spec.alpha, w)
                        : static_cast<double>(spec.n_rct) / static_cast<double>(spec.n_rct + spec.n_external);
  const double g1 = a == 1 ? detail::kTrialPropensity : 1.0 - detail::kTrialPropensity;
  const double ge = detail::external_propensity(spec.id, w);
  const double g0 = a == 1 ? ge : 1.0 - ge;
  return p1 * g1 / (p1 * g1 + (1.0 - p1) * g0);
}

inline TrueValues true_values(const ScenarioSpec& spec, long n_oracle = 10'000'000, std::uint64_t seed = 20240101) {
  spec.validate();
  TrueValues t;
  t.psi = spec.psi();
  std::mt19937_64 rng_a(seed), rng_b(seed ^ 0x9e3779b97f4a7c15ULL);
  double s1 = 0.0, s2 = 0.0, u1 = 0.0, u2 = 0.0;
  for (long i = 0; i < n_oracle; ++i) {
    double w[3];
    // pooled conditional-mean contrast E[Qbar(W,1) - Qbar(W,0)]
    for (double& v : w) v = detail::draw_w(spec.id, rng_a);
    double qbar[2];
    for (int a = 0; a < 2; ++a) {
      const double pi1 = enrollment_given_treatment(spec, w, a);
      const double q_trial = detail::outcome_mean(spec.id, w, a);
      const double q_ext = q_trial + spec.bias_scale * detail::bias_term(spec.id, w, a);
      qbar[a] = pi1 * q_trial + (1.0 - pi1) * q_ext;
    }
    const double c = qbar[1] - qbar[0];
    s1 += c;
    s2 += c * c;
    // Pi(0|W,0) tau_S(W,0) - Pi(0|W,1) tau_S(W,1), tau_S = Q(1,W,a) - Q(0,W,a)
    for (double& v : w) v = detail::draw_w(spec.id, rng_b);
    double term = 0.0;
    for (int a = 0; a < 2; ++a) {
      const double tau_s = -spec.bias_scale * detail::bias_term(spec.id, w, a);
      const double pi0 = 1.0 - enrollment_given_treatment(spec, w, a);
      term += (a == 0 ? 1.0 : -1.0) * pi0 * tau_s;
    }
    u1 += term;
    u2 += term * term;
  }
  const auto nd = static_cast<double>(n_oracle);
  t.psi_tilde = s1 / nd;
  t.psi_sharp = t.psi_tilde - t.psi;
  t.psi_sharp_weighted = u1 / nd;
  t.mc_se_tilde = std::sqrt(std::max(0.0, s2 / nd - t.psi_tilde * t.psi_tilde) / nd);
  t.mc_se_weighted = std::sqrt(std::max(0.0, u2 / nd - t.psi_sharp_weighted * t.psi_sharp_weighted) / nd);
  return t;
}

inline const std::vector<std::string>& study_estimators() {
  static const std::vector<std::string> names{"atmle", "rct-only", "tmle", "pooled-aipw"};
  return names;
}

struct RepRecord {
  int rep = 0;
  std::string estimator;
  bool ok = false;
  double estimate = 0.0;
  double se = 0.0;
  double lower = 0.0, upper = 0.0;
  double max_score_residual = 0.0;
  std::string error;
};

struct EstimatorMetrics {
  std::string estimator;
  int successes = 0;
  int failures = 0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double mse = 0.0;
  double relative_mse = 0.0;  // MSE(rct-only) / MSE(estimator)
  double coverage = 0.0;
  double mean_ci_width = 0.0;
  double max_score_residual = 0.0;
};

struct MonteCarloResult {
  ScenarioSpec spec;
  int reps = 0;
  double truth = 0.0;
  std::vector<EstimatorMetrics> metrics;
  std::vector<RepRecord> records;

  [[nodiscard]] const EstimatorMetrics& at(const std::string& name) const {
    for (const auto& m : metrics) {
      if (m.estimator == name) return m;
    }
    throw ValidationError("no metrics for estimator " + name);
  }
};

struct StudyOptions {
  int reps = 300;
  int jobs = 1;
  std::uint64_t master_seed = 1;
  AtmleOptions estimator;
};

// Seed of replicate `rep`: a fixed function of (master, rep), independent of scheduling.
inline std::uint64_t rep_seed(std::uint64_t master, int rep) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(rep)};
  std::mt19937_64 rng(seq);
  return rng();
}

namespace detail {

inline RepRecord record_of(int rep, const std::string& name, const EstimateReport& r) {
  RepRecord rec;
  rec.rep = rep;
  rec.estimator = name;
  rec.ok = std::isfinite(r.psi) && std::isfinite(r.se);
  rec.estimate = r.psi;
  rec.se = r.se;
  rec.lower = r.ci95.first;
  rec.upper = r.ci95.second;
  for (const auto& [k, v] : r.score_residuals) {
    if (k != "d_pooled_mean" && k != "d_sharp_mean") rec.max_score_residual = std::max(rec.max_score_residual, v);
  }
  if (!rec.ok) rec.error = "non-finite estimate";
  return rec;
}

inline RepRecord failed(int rep, const std::string& name, const std::string& what) {
  RepRecord rec;
  rec.rep = rep;
  rec.estimator = name;
  rec.error = what;
  return rec;
}

}  // namespace detail

// One replicate: every estimator on the same draw, sharing cross-fitted nuisances.
inline std::vector<RepRecord> run_replicate(const ScenarioSpec& base, int rep, const StudyOptions& opt) {
  ScenarioSpec spec = base;
  spec.seed = rep_seed(opt.master_seed, rep);
  std::vector<RepRecord> out;
  const auto& names = study_estimators();
  FusionDataset data;
  FoldAssignment folds;
  try {
    data = generate(spec);
    folds = make_folds(data, opt.estimator.v_folds, spec.seed);
  } catch (const std::exception& e) {
    for (const auto& name : names) out.push_back(detail::failed(rep, name, e.what()));
    return out;
  }
  std::optional<NuisanceFit> nuis;
  std::string nuis_error;
  try {
    nuis = fit_nuisances(data, folds, opt.estimator.nuisance);
  } catch (const std::exception& e) {
    nuis_error = e.what();
  }
  std::optional<TrialNuisanceFit> trial;
  std::string trial_error;
  try {
    trial = fit_trial(data, folds, opt.estimator.nuisance);
  } catch (const std::exception& e) {
    trial_error = e.what();
  }
  const Vector gdelta = nuis ? nuis->gdelta : Vector::Ones(data.n());
  for (const auto& name : names) {
    try {
      const bool pooled = name == "atmle" || name == "pooled-aipw";
      if (pooled && !nuis) throw EstimationError(nuis_error);
      if (!pooled && !trial) throw EstimationError(trial_error);
      EstimateReport r;
      if (name == "atmle") r = atmle_with_nuisances(data, *nuis, folds, opt.estimator);
      if (name == "pooled-aipw") r = pooled_aipw_with_nuisances(data, *nuis);
      if (name == "rct-only") r = rct_only_with_nuisances(data, *trial, gdelta);
      if (name == "tmle") r = full_tmle_with_nuisances(data, *trial, gdelta);
      out.push_back(detail::record_of(rep, name, r));
    } catch (const std::exception& e) {
      out.push_back(detail::failed(rep, name, e.what()));
    }
  }
  return out;
}

inline std::vector<EstimatorMetrics> summarize(const std::vector<RepRecord>& records, double truth) {
  std::vector<EstimatorMetrics> out;
  for (const auto& name : study_estimators()) {
    EstimatorMetrics m;
    m.estimator = name;
    double sum = 0.0, sq = 0.0, covered = 0.0, width = 0.0;
    for (const auto& r : records) {
      if (r.estimator != name) continue;
      if (!r.ok) {
        ++m.failures;
        continue;
      }
      ++m.successes;
      sum += r.estimate;
      sq += (r.estimate - truth) * (r.estimate - truth);
      covered += (r.lower <= truth && truth <= r.upper) ? 1.0 : 0.0;
      width += r.upper - r.lower;
      m.max_score_residual = std::max(m.max_score_residual, r.max_score_residual);
    }
    if (m.successes > 0) {
      const double k = m.successes;
      m.mean_estimate = sum / k;
      m.bias = m.mean_estimate - truth;
      double var = 0.0;
      for (const auto& r : records) {
        if (r.estimator == name && r.ok) var += (r.estimate - m.mean_estimate) * (r.estimate - m.mean_estimate);
      }
      m.variance = var / k;
      m.mse = sq / k;
      m.coverage = covered / k;
      m.mean_ci_width = width / k;
    } else {
      m.mean_estimate = m.bias = m.variance = m.mse = m.coverage = m.mean_ci_width = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(m);
  }
  double ref = std::numeric_limits<double>::quiet_NaN();
  for (const auto& m : out) {
    if (m.estimator == "rct-only") ref = m.mse;
  }
  for (auto& m : out) m.relative_mse = ref / m.mse;
  return out;
}

inline MonteCarloResult run_study(const ScenarioSpec& spec, const StudyOptions& opt) {
  spec.validate();
  if (opt.reps < 1) throw ValidationError("reps must be at least 1");
  std::vector<std::vector<RepRecord>> per_rep(static_cast<std::size_t>(opt.reps));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < opt.reps; r = next++) per_rep[static_cast<std::size_t>(r)] = run_replicate(spec, r, opt);
  };
  const int jobs = std::max(1, std::min(opt.jobs, opt.reps));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  MonteCarloResult res;
  res.spec = spec;
  res.reps = opt.reps;
  res.truth = spec.psi();
  for (auto& v : per_rep) {
    for (auto& r : v) res.records.push_back(std::move(r));
  }
  res.metrics = summarize(res.records, res.truth);
  return res;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_results_csv(std::ostream& out, const std::vector<MonteCarloResult>& results) {
  out << "scenario,estimator,metric,value\n";
  for (const auto& res : results) {
    for (const auto& m : res.metrics) {
      const std::pair<const char*, double> rows[] = {
          {"successes", m.successes},   {"failures", m.failures},        {"mean_estimate", m.mean_estimate},
          {"bias", m.bias},             {"variance", m.variance},        {"mse", m.mse},
          {"relative_mse", m.relative_mse}, {"coverage", m.coverage},   {"mean_ci_width", m.mean_ci_width},
          {"max_score_residual", m.max_score_residual}};
      for (const auto& [k, v] : rows) out << res.spec.label() << ',' << m.estimator << ',' << k << ',' << detail::fmt(v) << '\n';
    }
  }
}

inline nlohmann::json to_json(const MonteCarloResult& res) {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : res.metrics) {
    metrics.push_back({{"estimator", m.estimator},
                       {"successes", m.successes},
                       {"failures", m.failures},
                       {"mean_estimate", m.mean_estimate},
                       {"bias", m.bias},
                       {"variance", m.variance},
                       {"mse", m.mse},
                       {"relative_mse", m.relative_mse},
                       {"coverage", m.coverage},
                       {"mean_ci_width", m.mean_ci_width},
                       {"max_score_residual", m.max_score_residual}});
  }
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : res.records) {
    nlohmann::json j = {{"rep", r.rep}, {"estimator", r.estimator}, {"ok", r.ok}};
    if (r.ok) {
      j["estimate"] = r.estimate;
      j["se"] = r.se;
      j["ci95"] = {r.lower, r.upper};
    } else {
      j["error"] = r.error;
    }
    recs.push_back(j);
  }
  nlohmann::json spec = {{"id", res.spec.id},
                         {"n_rct", res.spec.n_rct},
                         {"n_external", res.spec.n_external},
                         {"censoring_rate", res.spec.censoring_rate},
                         {"bias_scale", res.spec.bias_scale}};
  if (res.spec.alpha) spec["alpha"] = *res.spec.alpha;
  return {{"scenario", res.spec.label()}, {"spec", spec}, {"reps", res.reps}, {"truth", res.truth},
          {"metrics", metrics}, {"records", recs}};
}

}  // namespace atmle::sim
