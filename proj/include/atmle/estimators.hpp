#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/eif.hpp"
#include "atmle/hal_basis.hpp"
#include "atmle/nuisance.hpp"
#include "atmle/working_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace atmle {

inline constexpr const char* kReportSchemaVersion = "1.0";
inline constexpr double kScoreTolerance = 1e-8;

struct AtmleOptions {
  int v_folds = 5;
  std::uint64_t seed = 1;
  NuisanceOptions nuisance;
  WorkingModelOptions tau_a{{1, 10}};
  WorkingModelOptions tau_s{{2, 10}};
  bool pooled_regular_tmle = false;
  std::optional<double> known_trial_propensity;
  int max_targeting_iterations = 50;
};

struct EstimateReport {
  std::string estimator;
  Eigen::Index n = 0;
  double psi = 0.0;
  double psi_tilde = 0.0;
  double psi_sharp = 0.0;
  double se = 0.0;
  std::pair<double, double> ci95{0.0, 0.0};
  InfluenceVectors influence;
  nlohmann::json working_models = nlohmann::json::object();
  nlohmann::json nuisance_summary = nlohmann::json::object();
  nlohmann::json targeting_log = nlohmann::json::object();
  std::map<std::string, double> score_residuals;
  nlohmann::json diagnostics = nlohmann::json::object();
  std::vector<std::string> warnings;
};

struct PiTargetingResult {
  Vector pi_star_a0, pi_star_a1;  // targeted P(S=1 | W, a)
  std::vector<double> epsilon_path;
  double score_residual = 0.0;
  bool converged = false;
  int iterations = 0;
};

namespace detail {

inline void finish_report(EstimateReport& r) {
  const auto n = static_cast<double>(r.influence.d_total.size());
  r.se = n > 0 ? std::sqrt(r.influence.d_total.squaredNorm() / n / n) : 0.0;
  r.ci95 = {r.psi - kZ975 * r.se, r.psi + kZ975 * r.se};
}

inline nlohmann::json summarize(const NuisanceFit& nuis) {
  return {{"learner_choice", nuis.learner_choice},
          {"cv_risk", nuis.cv_risks},
          {"truncation_bound", nuis.truncation},
          {"truncation_events", nuis.truncation_events}};
}

// One-dimensional logistic MLE of eps in logit p = offset + eps * x.
inline double fluctuation_mle(const Vector& offset, const Vector& x, const Vector& labels) {
  if (x.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  const auto n = static_cast<double>(x.size());
  auto loglik = [&](double e) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double eta = offset(i) + e * x(i);
      ll += labels(i) * eta - (eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)));
    }
    return ll;
  };
  double eps = 0.0;
  double ll = loglik(eps);
  for (int it = 0; it < 200; ++it) {
    double score = 0.0, info = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double p = expit(offset(i) + eps * x(i));
      score += x(i) * (labels(i) - p);
      info += x(i) * x(i) * p * (1 - p);
    }
    if (std::abs(score) / n < 1e-15 || info <= 0) break;
    double step = score / info;
    double next = eps + step, ll_next = loglik(next);
    for (int h = 0; h < 60 && ll_next < ll; ++h) {
      step *= 0.5;
      next = eps + step;
      ll_next = loglik(next);
    }
    if (next == eps) break;
    eps = next;
    ll = ll_next;
  }
  return eps;
}

}  // namespace detail

// Logistic fluctuation of Pi(1|W,a) along the clever covariate until the
// Pi-score is solved on `rows`. With external controls only, Pi(1|W,1) = 1
// stays fixed and only the control arm moves.
inline PiTargetingResult target_pi(const std::vector<int>& s, const std::vector<int>& a, const IndexVector& rows,
                                   const Vector& pi1_a0, const Vector& pi1_a1, const Vector& g1, const Vector& tau0,
                                   const Vector& tau1, bool external_controls_only, int max_iterations = 50,
                                   double tolerance = kScoreTolerance) {
  PiTargetingResult res{pi1_a0, pi1_a1, {}, 0.0, false, 0};
  const auto nr = static_cast<Eigen::Index>(rows.size());
  auto residual = [&]() {
    double total = 0.0;
    for (int i : rows) {
      const auto ii = static_cast<std::size_t>(i);
      const double p = a[ii] == 1 ? res.pi_star_a1(i) : res.pi_star_a0(i);
      total += sharp_pi_component(s[ii], a[ii], g1(i), tau1(i), tau0(i), p);
    }
    return nr ? std::abs(total / static_cast<double>(nr)) : 0.0;
  };
  res.score_residual = residual();
  for (int it = 0; it < max_iterations; ++it) {
    // A slightly tighter internal target keeps the reported residual well
    // under the contract after rounding.
    if (res.score_residual < tolerance * 1e-2) {
      res.converged = true;
      break;
    }
    IndexVector fit_rows;
    for (int i : rows) {
      if (!external_controls_only || a[static_cast<std::size_t>(i)] == 0) fit_rows.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(fit_rows.size());
    Vector offset(m), x(m), labels(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const int i = fit_rows[static_cast<std::size_t>(k)];
      const int ai = a[static_cast<std::size_t>(i)];
      offset(k) = logit(ai == 1 ? res.pi_star_a1(i) : res.pi_star_a0(i));
      x(k) = sharp_clever_covariate(ai, g1(i), tau1(i), tau0(i));
      labels(k) = s[static_cast<std::size_t>(i)];
    }
    const double eps = m ? detail::fluctuation_mle(offset, x, labels) : 0.0;
    res.epsilon_path.push_back(eps);
    res.iterations = it + 1;
    for (int i : rows) {
      res.pi_star_a0(i) = expit(logit(res.pi_star_a0(i)) + eps * sharp_clever_covariate(0, g1(i), tau1(i), tau0(i)));
      if (!external_controls_only) {
        res.pi_star_a1(i) = expit(logit(res.pi_star_a1(i)) + eps * sharp_clever_covariate(1, g1(i), tau1(i), tau0(i)));
      }
    }
    res.score_residual = residual();
  }
  if (!res.converged && res.score_residual < tolerance) res.converged = true;
  return res;
}

struct PooledEstimate {
  double psi_tilde = 0.0;
  Vector d_pooled;
};

// Plug-in of the relaxed treatment-effect model over the empirical W.
inline PooledEstimate estimate_pooled(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows) {
  const Vector tau = m.predict_rows(td.phi);
  double total = 0.0;
  for (int i : rows) total += tau(i);
  PooledEstimate out;
  out.psi_tilde = rows.empty() ? 0.0 : total / static_cast<double>(rows.size());
  out.d_pooled = d_pooled_projection(td, m, rows, out.psi_tilde);
  return out;
}

struct BiasEstimate {
  double psi_sharp = 0.0;
  SharpGradient gradient;
};

inline BiasEstimate estimate_bias(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows,
                                  const std::vector<int>& s, const std::vector<int>& a, const Vector& g1,
                                  const PiTargetingResult& targeted) {
  const Vector tau0 = m.predict_rows(td.phi_a0);
  const Vector tau1 = m.predict_rows(td.phi_a1);
  double total = 0.0;
  for (int i : rows) {
    total += (1.0 - targeted.pi_star_a0(i)) * tau0(i) - (1.0 - targeted.pi_star_a1(i)) * tau1(i);
  }
  BiasEstimate out;
  out.psi_sharp = rows.empty() ? 0.0 : total / static_cast<double>(rows.size());
  out.gradient = d_sharp_projection(td, m, rows, s, a, g1, targeted.pi_star_a0, targeted.pi_star_a1, out.psi_sharp);
  return out;
}

// Standard TMLE of the pooled ATE, ignoring S (linear fluctuation of Qbar).
inline PooledEstimate pooled_regular_tmle(const FusionDataset& data, const NuisanceFit& nuis, const IndexVector& rows) {
  double num = 0.0, den = 0.0;
  for (int i : rows) {
    if (data.delta(i) == 0) continue;
    const int a = data.a(i);
    const double h = a == 1 ? 1.0 / nuis.g1(i) : -1.0 / (1.0 - nuis.g1(i));
    const double w = 1.0 / nuis.gdelta(i);
    num += w * h * (data.y(i) - nuis.qbar(i, a));
    den += w * h * h;
  }
  const double eps = den > 0 ? num / den : 0.0;
  PooledEstimate out;
  double total = 0.0;
  std::vector<double> q1(rows.size()), q0(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int i = rows[k];
    q1[k] = nuis.qbar1(i) + eps / nuis.g1(i);
    q0[k] = nuis.qbar0(i) - eps / (1.0 - nuis.g1(i));
    total += q1[k] - q0[k];
  }
  out.psi_tilde = rows.empty() ? 0.0 : total / static_cast<double>(rows.size());
  out.d_pooled = Vector(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int i = rows[k];
    const int a = data.a(i);
    double v = q1[k] - q0[k] - out.psi_tilde;
    if (data.delta(i) == 1) {
      const double h = a == 1 ? 1.0 / nuis.g1(i) : -1.0 / (1.0 - nuis.g1(i));
      v += h / nuis.gdelta(i) * (data.y(i) - (a == 1 ? q1[k] : q0[k]));
    }
    out.d_pooled(static_cast<Eigen::Index>(k)) = v;
  }
  return out;
}

// A-TMLE given already cross-fitted nuisances.
inline EstimateReport atmle_with_nuisances(const FusionDataset& data, const NuisanceFit& nuis,
                                           const FoldAssignment& folds, const AtmleOptions& opt = {}) {
  EstimateReport r;
  r.estimator = "atmle";
  r.n = data.n();
  r.warnings = nuis.warnings;
  r.nuisance_summary = detail::summarize(nuis);
  const auto rows = all_rows_of(data.n());

  const BasisSet basis_a = generate_basis(data.w(), BasisDomain::kW, opt.tau_a.basis);
  const auto td_a = cate_design(data, nuis, basis_a);
  const auto model_a = learn_from_design(td_a, folds, opt.tau_a);
  r.score_residuals["cate_beta"] = score_residual(td_a, model_a, rows);
  PooledEstimate pooled;
  if (opt.pooled_regular_tmle) {
    pooled = pooled_regular_tmle(data, nuis, rows);
  } else {
    pooled = estimate_pooled(td_a, model_a, rows);
  }

  const BasisSet basis_s = generate_basis(data.w(), BasisDomain::kWA, opt.tau_s.basis);
  const auto td_s = enroll_design(data, nuis, basis_s);
  const auto model_s = learn_from_design(td_s, folds, opt.tau_s);
  r.score_residuals["enroll_beta"] = score_residual(td_s, model_s, rows);
  const Vector tau0 = model_s.predict_rows(td_s.phi_a0);
  const Vector tau1 = model_s.predict_rows(td_s.phi_a1);
  const auto targeted = target_pi(data.s_column(), data.a_column(), rows, nuis.pi1_a0, nuis.pi1_a1, nuis.g1, tau0,
                                  tau1, data.external_controls_only(), opt.max_targeting_iterations);
  r.score_residuals["pi_targeting"] = targeted.score_residual;
  const auto bias = estimate_bias(td_s, model_s, rows, data.s_column(), data.a_column(), nuis.g1, targeted);

  r.psi_tilde = pooled.psi_tilde;
  r.psi_sharp = bias.psi_sharp;
  r.psi = r.psi_tilde - r.psi_sharp;
  r.influence.d_pooled = pooled.d_pooled;
  r.influence.d_sharp = bias.gradient.total;
  r.influence.d_total = pooled.d_pooled - bias.gradient.total;
  r.influence.components["sharp_w"] = bias.gradient.w_part;
  r.influence.components["sharp_pi"] = bias.gradient.pi_part;
  r.influence.components["sharp_beta"] = bias.gradient.beta_part;
  r.score_residuals["d_pooled_mean"] = std::abs(mean(pooled.d_pooled));
  r.score_residuals["d_sharp_mean"] = std::abs(mean(bias.gradient.total));
  detail::finish_report(r);

  r.working_models = {{"tau_A", to_json(model_a)}, {"tau_S", to_json(model_s)}};
  r.targeting_log = {{"epsilon_path", targeted.epsilon_path},
                     {"iterations", targeted.iterations},
                     {"converged", targeted.converged},
                     {"score_residual", targeted.score_residual}};
  if (!targeted.converged) r.warnings.push_back("pi targeting did not reach the score tolerance");
  for (const auto& [name, value] : r.score_residuals) {
    if (name != "pi_targeting" && value > kScoreTolerance) r.warnings.push_back("score equation '" + name + "' residual above tolerance");
  }
  if (opt.known_trial_propensity) {
    double treated = 0.0, trial = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      if (data.s(i) == 1) {
        trial += 1;
        treated += data.a(i);
      }
    }
    if (std::abs(treated / trial - *opt.known_trial_propensity) > 0.1) {
      r.warnings.push_back("trial treatment proportion departs from the declared randomization probability");
    }
  }
  return r;
}

inline EstimateReport atmle(const FusionDataset& data, const AtmleOptions& opt = {}) {
  const auto folds = make_folds(data, opt.v_folds, opt.seed);
  const auto nuis = fit_nuisances(data, folds, opt.nuisance);
  return atmle_with_nuisances(data, nuis, folds, opt);
}

// Cross-validated variant: working-model supports are selected on each
// training split, while the relaxed refit, Pi targeting and plug-in run on
// the matching validation split.
inline EstimateReport cv_atmle_with_nuisances(const FusionDataset& data, const NuisanceFit& nuis,
                                              const FoldAssignment& folds, const AtmleOptions& opt = {}) {
  if (folds.v < 2) throw ValidationError("cv-atmle needs at least two folds");
  EstimateReport r;
  r.estimator = "cv-atmle";
  r.n = data.n();
  r.warnings = nuis.warnings;
  r.nuisance_summary = detail::summarize(nuis);
  const BasisSet basis_a = generate_basis(data.w(), BasisDomain::kW, opt.tau_a.basis);
  const BasisSet basis_s = generate_basis(data.w(), BasisDomain::kWA, opt.tau_s.basis);
  const auto td_a = cate_design(data, nuis, basis_a);
  const auto td_s = enroll_design(data, nuis, basis_s);
  const auto inner = folds.rotated(1);

  r.influence.d_pooled = Vector::Zero(data.n());
  r.influence.d_sharp = Vector::Zero(data.n());
  r.influence.d_total = Vector::Zero(data.n());
  std::vector<double> psi_tilde_v, psi_sharp_v, sigma_v;
  nlohmann::json fold_log = nlohmann::json::array();
  double worst_cate = 0.0, worst_enroll = 0.0, worst_pi = 0.0;
  for (int f = 0; f < folds.v; ++f) {
    const auto train = folds.training(f);
    const auto valid = folds.validation(f);
    try {
      if (valid.empty()) throw EstimationError("empty validation split");
      const auto sup_a = select_support(td_a, train, inner, opt.tau_a);
      const auto model_a = refit(td_a, valid, sup_a);
      const auto sup_s = select_support(td_s, train, inner, opt.tau_s);
      const auto model_s = refit(td_s, valid, sup_s);
      if (model_a.design_columns.empty() || model_s.design_columns.empty()) throw EstimationError("degenerate refit");
      const auto pooled = opt.pooled_regular_tmle ? pooled_regular_tmle(data, nuis, valid) : estimate_pooled(td_a, model_a, valid);
      const Vector tau0 = model_s.predict_rows(td_s.phi_a0);
      const Vector tau1 = model_s.predict_rows(td_s.phi_a1);
      const auto targeted = target_pi(data.s_column(), data.a_column(), valid, nuis.pi1_a0, nuis.pi1_a1, nuis.g1, tau0,
                                      tau1, data.external_controls_only(), opt.max_targeting_iterations);
      const auto bias = estimate_bias(td_s, model_s, valid, data.s_column(), data.a_column(), nuis.g1, targeted);
      const Vector d = pooled.d_pooled - bias.gradient.total;
      for (std::size_t k = 0; k < valid.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        r.influence.d_pooled(valid[k]) = pooled.d_pooled(kk);
        r.influence.d_sharp(valid[k]) = bias.gradient.total(kk);
        r.influence.d_total(valid[k]) = d(kk);
      }
      psi_tilde_v.push_back(pooled.psi_tilde);
      psi_sharp_v.push_back(bias.psi_sharp);
      sigma_v.push_back(std::sqrt(d.squaredNorm() / static_cast<double>(d.size())));
      worst_cate = std::max(worst_cate, score_residual(td_a, model_a, valid));
      worst_enroll = std::max(worst_enroll, score_residual(td_s, model_s, valid));
      worst_pi = std::max(worst_pi, targeted.score_residual);
      fold_log.push_back({{"fold", f},
                          {"psi_tilde", pooled.psi_tilde},
                          {"psi_sharp", bias.psi_sharp},
                          {"epsilon_path", targeted.epsilon_path},
                          {"tau_A_terms", model_a.support.size()},
                          {"tau_S_terms", model_s.support.size()}});
    } catch (const std::exception& e) {
      r.warnings.push_back("fold " + std::to_string(f) + " skipped: " + e.what());
    }
  }
  if (psi_tilde_v.size() < 2) throw EstimationError("fewer than two usable folds");
  const auto k = static_cast<double>(psi_tilde_v.size());
  double pt = 0.0, ps = 0.0, sg = 0.0;
  for (std::size_t j = 0; j < psi_tilde_v.size(); ++j) {
    pt += psi_tilde_v[j];
    ps += psi_sharp_v[j];
    sg += sigma_v[j];
  }
  r.psi_tilde = pt / k;
  r.psi_sharp = ps / k;
  r.psi = r.psi_tilde - r.psi_sharp;
  r.se = sg / k / std::sqrt(static_cast<double>(data.n()));
  r.ci95 = {r.psi - kZ975 * r.se, r.psi + kZ975 * r.se};
  r.score_residuals["cate_beta"] = worst_cate;
  r.score_residuals["enroll_beta"] = worst_enroll;
  r.score_residuals["pi_targeting"] = worst_pi;
  r.targeting_log = {{"folds", fold_log}};
  return r;
}

inline EstimateReport cv_atmle(const FusionDataset& data, const AtmleOptions& opt = {}) {
  const auto folds = make_folds(data, opt.v_folds, opt.seed);
  const auto nuis = fit_nuisances(data, folds, opt.nuisance);
  return cv_atmle_with_nuisances(data, nuis, folds, opt);
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// P(Delta = 1 | S, W, A) cross-fitted, or ones when nothing is censored.
inline Vector fit_censoring(const FusionDataset& data, const FoldAssignment& folds, const NuisanceOptions& opt = {}) {
  const auto n = data.n();
  if (!data.has_delta() || !data.any_censored()) return Vector::Ones(n);
  Matrix ws(n, data.d() + 1);
  Vector s(n), d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s(i) = data.s(i);
    d(i) = data.delta(i);
  }
  ws << data.w(), s;
  RegressionTask t{"gdelta", Family::kBinomial, ws, data.a_column(), d, std::vector<bool>(static_cast<std::size_t>(n), true)};
  auto r = cross_fit(t, folds, opt.library);
  detail::truncate(r.factual, opt.truncation);
  return r.factual;
}

inline EstimateReport rct_only_with_nuisances(const FusionDataset& data, const TrialNuisanceFit& tn, const Vector& gdelta) {
  EstimateReport r;
  r.estimator = "rct-only";
  r.n = data.n();
  IndexVector trial;
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    if (data.s(i) == 1) trial.push_back(static_cast<int>(i));
  }
  double num = 0.0, den = 0.0;
  for (int i : trial) {
    if (data.delta(i) == 0) continue;
    const int a = data.a(i);
    const double h = a == 1 ? 1.0 / tn.g_trial(i) : -1.0 / (1.0 - tn.g_trial(i));
    num += h / gdelta(i) * (data.y(i) - (a == 1 ? tn.q1_a1(i) : tn.q1_a0(i)));
    den += h * h / gdelta(i);
  }
  const double eps = den > 0 ? num / den : 0.0;
  const auto m = static_cast<Eigen::Index>(trial.size());
  Vector q1(m), q0(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const int i = trial[static_cast<std::size_t>(k)];
    q1(k) = tn.q1_a1(i) + eps / tn.g_trial(i);
    q0(k) = tn.q1_a0(i) - eps / (1.0 - tn.g_trial(i));
  }
  r.psi = mean(q1 - q0);
  r.psi_tilde = r.psi;
  Vector ic(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const int i = trial[static_cast<std::size_t>(k)];
    const int a = data.a(i);
    const double g_a = a == 1 ? tn.g_trial(i) : 1.0 - tn.g_trial(i);
    const double ipcw = data.delta(i) == 1 ? 1.0 / gdelta(i) : 0.0;
    // Gradient over the trial sample, i.e. the S=1 rows of d_psi2 scaled by P(S=1).
    ic(k) = d_psi2(1, a, data.delta(i) == 1 ? data.y(i) : 0.0, q1(k), q0(k), g_a, 1.0, r.psi, ipcw);
  }
  r.influence.d_pooled = ic;
  r.influence.d_sharp = Vector::Zero(m);
  r.influence.d_total = ic;
  r.score_residuals["ic_mean"] = std::abs(mean(ic));
  r.nuisance_summary = {{"learner_choice", tn.learner_choice}, {"truncation_events", tn.truncation_events}};
  r.warnings = tn.warnings;
  detail::finish_report(r);
  return r;
}

// TMLE of E[Q(1,W,1) - Q(1,W,0)] over the pooled W, weighting trial
// residuals by 1 / P(S=1|W).
inline EstimateReport full_tmle_with_nuisances(const FusionDataset& data, const TrialNuisanceFit& tn, const Vector& gdelta) {
  EstimateReport r;
  r.estimator = "tmle";
  r.n = data.n();
  const auto n = data.n();
  auto clever = [&](Eigen::Index i, int a) {
    const double g_a = a == 1 ? tn.g_trial(i) : 1.0 - tn.g_trial(i);
    return (2.0 * a - 1.0) / (tn.pibar(i) * g_a);
  };
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (data.s(i) != 1 || data.delta(i) == 0) continue;
    const int a = data.a(i);
    const double h = clever(i, a);
    num += h / gdelta(i) * (data.y(i) - (a == 1 ? tn.q1_a1(i) : tn.q1_a0(i)));
    den += h * h / gdelta(i);
  }
  const double eps = den > 0 ? num / den : 0.0;
  Vector q1(n), q0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    q1(i) = tn.q1_a1(i) + eps * clever(i, 1);
    q0(i) = tn.q1_a0(i) + eps * clever(i, 0);
  }
  r.psi = mean(q1 - q0);
  r.psi_tilde = r.psi;
  Vector ic(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = data.a(i);
    const double g_a = a == 1 ? tn.g_trial(i) : 1.0 - tn.g_trial(i);
    const double ipcw = data.delta(i) == 1 ? 1.0 / gdelta(i) : 0.0;
    ic(i) = d_psi(data.s(i), a, data.delta(i) == 1 ? data.y(i) : 0.0, q1(i), q0(i), g_a, tn.pibar(i), r.psi, ipcw);
  }
  r.influence.d_pooled = ic;
  r.influence.d_sharp = Vector::Zero(n);
  r.influence.d_total = ic;
  r.score_residuals["ic_mean"] = std::abs(mean(ic));
  r.nuisance_summary = {{"learner_choice", tn.learner_choice}, {"truncation_events", tn.truncation_events}};
  r.warnings = tn.warnings;
  const auto ev = tn.truncation_events.find("pibar");
  if (ev != tn.truncation_events.end() && ev->second > 0) {
    r.warnings.push_back("P(S=1|W) truncated for " + std::to_string(ev->second) + " rows");
  }
  detail::finish_report(r);
  return r;
}

// AIPW of the pooled ATE ignoring S.
inline EstimateReport pooled_aipw_with_nuisances(const FusionDataset& data, const NuisanceFit& nuis) {
  EstimateReport r;
  r.estimator = "pooled-aipw";
  r.n = data.n();
  const auto n = data.n();
  Vector term(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = data.a(i);
    double v = nuis.qbar1(i) - nuis.qbar0(i);
    if (data.delta(i) == 1) {
      const double h = a == 1 ? 1.0 / nuis.g1(i) : -1.0 / (1.0 - nuis.g1(i));
      v += h / nuis.gdelta(i) * (data.y(i) - nuis.qbar(i, a));
    }
    term(i) = v;
  }
  r.psi = mean(term);
  r.psi_tilde = r.psi;
  const Vector ic = term.array() - r.psi;
  r.influence.d_pooled = ic;
  r.influence.d_sharp = Vector::Zero(n);
  r.influence.d_total = ic;
  r.nuisance_summary = detail::summarize(nuis);
  r.warnings = nuis.warnings;
  detail::finish_report(r);
  return r;
}

inline TrialNuisanceFit fit_trial(const FusionDataset& data, const FoldAssignment& folds, const NuisanceOptions& opt) {
  return fit_trial_nuisances(data, folds, opt);
}

inline EstimateReport baseline_rct_only(const FusionDataset& data, const AtmleOptions& opt = {}) {
  const auto folds = make_folds(data, opt.v_folds, opt.seed);
  return rct_only_with_nuisances(data, fit_trial(data, folds, opt.nuisance), fit_censoring(data, folds, opt.nuisance));
}

inline EstimateReport baseline_full_tmle(const FusionDataset& data, const AtmleOptions& opt = {}) {
  const auto folds = make_folds(data, opt.v_folds, opt.seed);
  return full_tmle_with_nuisances(data, fit_trial(data, folds, opt.nuisance), fit_censoring(data, folds, opt.nuisance));
}

inline EstimateReport baseline_pooled_aipw(const FusionDataset& data, const AtmleOptions& opt = {}) {
  const auto folds = make_folds(data, opt.v_folds, opt.seed);
  return pooled_aipw_with_nuisances(data, fit_nuisances(data, folds, opt.nuisance));
}

// ---------------------------------------------------------------------------
// Variance decomposition of the two trial-anchored gradients.
// ---------------------------------------------------------------------------

struct EfficiencyDiagnostics {
  double p_trial = 0.0;
  double w_component_psi = 0.0, y_component_psi = 0.0;
  double w_component_psi2 = 0.0, y_component_psi2 = 0.0;
  double w_ratio = 0.0;  // W-component of the pooled-W gradient over the trial-W one
  double pibar_sd = 0.0;
  bool s_independent_of_w = false;
};

inline EfficiencyDiagnostics efficiency_diagnostics(const FusionDataset& data, const TrialNuisanceFit& tn,
                                                    const Vector& gdelta) {
  EfficiencyDiagnostics e;
  const auto n = data.n();
  const auto nd = static_cast<double>(n);
  double trial = 0.0, psi = 0.0, psi2 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double cate = tn.q1_a1(i) - tn.q1_a0(i);
    psi += cate;
    if (data.s(i) == 1) {
      trial += 1;
      psi2 += cate;
    }
  }
  psi /= nd;
  psi2 /= trial;
  e.p_trial = trial / nd;
  const double p = e.p_trial;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double cate = tn.q1_a1(i) - tn.q1_a0(i);
    e.w_component_psi += (cate - psi) * (cate - psi);
    if (data.s(i) != 1) continue;
    e.w_component_psi2 += (cate - psi2) * (cate - psi2) / (p * p);
    if (data.delta(i) == 0) continue;
    const int a = data.a(i);
    const double g_a = a == 1 ? tn.g_trial(i) : 1.0 - tn.g_trial(i);
    const double resid = data.y(i) - (a == 1 ? tn.q1_a1(i) : tn.q1_a0(i));
    const double ipcw = 1.0 / gdelta(i);
    e.y_component_psi += ipcw * ipcw * resid * resid / (tn.pibar(i) * tn.pibar(i) * g_a * g_a);
    e.y_component_psi2 += ipcw * ipcw * resid * resid / (p * p * g_a * g_a);
  }
  e.w_component_psi /= nd;
  e.w_component_psi2 /= nd;
  e.y_component_psi /= nd;
  e.y_component_psi2 /= nd;
  e.w_ratio = e.w_component_psi2 > 0 ? e.w_component_psi / e.w_component_psi2 : 0.0;
  const double pm = mean(tn.pibar);
  e.pibar_sd = std::sqrt((tn.pibar.array() - pm).square().sum() / nd);
  e.s_independent_of_w = e.pibar_sd < 0.05;
  return e;
}

// Runs the estimator called `name` (atmle, cv-atmle, rct-only, tmle, pooled-aipw).
inline EstimateReport estimate(const std::string& name, const FusionDataset& data, const AtmleOptions& opt = {}) {
  if (name == "atmle") return atmle(data, opt);
  if (name == "cv-atmle") return cv_atmle(data, opt);
  if (name == "rct-only") return baseline_rct_only(data, opt);
  if (name == "tmle") return baseline_full_tmle(data, opt);
  if (name == "pooled-aipw") return baseline_pooled_aipw(data, opt);
  throw ValidationError("unknown estimator '" + name + "'");
}

inline nlohmann::json to_json(const EfficiencyDiagnostics& e) {
  return {{"p_trial", e.p_trial},
          {"w_component_psi", e.w_component_psi},
          {"y_component_psi", e.y_component_psi},
          {"w_component_psi2", e.w_component_psi2},
          {"y_component_psi2", e.y_component_psi2},
          {"w_ratio", e.w_ratio},
          {"pibar_sd", e.pibar_sd},
          {"s_approximately_independent_of_w", e.s_independent_of_w}};
}

inline nlohmann::json to_json(const EstimateReport& r) {
  return {{"schema_version", kReportSchemaVersion},
          {"estimator", r.estimator},
          {"n", r.n},
          {"psi", r.psi},
          {"psi_tilde", r.psi_tilde},
          {"psi_sharp", r.psi_sharp},
          {"se", r.se},
          {"ci95", {r.ci95.first, r.ci95.second}},
          {"score_residuals", r.score_residuals},
          {"working_models", r.working_models},
          {"nuisance_summary", r.nuisance_summary},
          {"targeting_log", r.targeting_log},
          {"diagnostics", r.diagnostics},
          {"warnings", r.warnings}};
}

inline void write_influence_csv(std::ostream& out, const EstimateReport& r) {
  out << "row,d_pooled,d_sharp,d_total\n";
  char buf[128];
  for (Eigen::Index i = 0; i < r.influence.d_total.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(i), r.influence.d_pooled(i),
                  r.influence.d_sharp(i), r.influence.d_total(i));
    out << buf;
  }
}

}  // namespace atmle
