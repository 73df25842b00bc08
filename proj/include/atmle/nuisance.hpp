#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/hal_basis.hpp"
#include "atmle/solvers.hpp"

#include <json.hpp>

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace atmle {

enum class Family { kGaussian, kBinomial };

enum class LearnerKind { kIntercept, kGlm, kHal };

struct LearnerSpec {
  LearnerKind kind = LearnerKind::kIntercept;
  BasisOptions hal{1, 10};
  int hal_grid_size = 20;
  double hal_lambda_min_ratio = 1e-3;

  [[nodiscard]] std::string name() const {
    switch (kind) {
      case LearnerKind::kIntercept: return "intercept";
      case LearnerKind::kGlm: return "glm";
      case LearnerKind::kHal: return hal.order == 1 ? "hal1" : "hal";
    }
    return "?";
  }
};

inline std::vector<LearnerSpec> default_library() {
  return {{LearnerKind::kIntercept}, {LearnerKind::kGlm}, {LearnerKind::kHal}};
}

inline LearnerSpec learner_from_name(const std::string& name) {
  if (name == "intercept") return {LearnerKind::kIntercept};
  if (name == "glm") return {LearnerKind::kGlm};
  if (name == "hal") return {LearnerKind::kHal};
  if (name == "hal1") {
    LearnerSpec s{LearnerKind::kHal};
    s.hal.order = 1;
    return s;
  }
  throw ValidationError("unknown learner '" + name + "'");
}

// A regression task: outcome on covariates `x`, optionally with a binary
// treatment column that can be set counterfactually at prediction time.
struct RegressionTask {
  std::string name;
  Family family = Family::kGaussian;
  Matrix x;
  std::optional<std::vector<int>> treatment;
  Vector outcome;
  std::vector<bool> trainable;  // rows usable for training and risk
};

struct CrossFitResult {
  Vector factual;
  Vector at_a0;  // filled when the task has a treatment column
  Vector at_a1;
  int chosen = -1;
  std::vector<double> cv_risk;  // per library candidate, +inf when disqualified
  std::vector<std::string> warnings;
};

namespace detail {

inline constexpr double kInfRisk = std::numeric_limits<double>::infinity();

inline Matrix glm_design(const Matrix& x, const std::vector<int>* a, std::optional<int> a_override, const IndexVector& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const bool with_a = a != nullptr || a_override.has_value();
  Matrix d(n, 1 + x.cols() + (with_a ? 1 : 0));
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = rows[static_cast<std::size_t>(k)];
    d(k, 0) = 1.0;
    d.row(k).segment(1, x.cols()) = x.row(i);
    if (with_a) d(k, x.cols() + 1) = a_override ? *a_override : (*a)[static_cast<std::size_t>(i)];
  }
  return d;
}

inline double pointwise_risk(Family f, double y, double pred) {
  if (f == Family::kGaussian) return (y - pred) * (y - pred);
  const double p = clip(pred, 1e-6, 1 - 1e-6);
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

inline IndexVector rows_where(const std::vector<bool>& mask, const IndexVector& candidates) {
  IndexVector out;
  for (int i : candidates) {
    if (mask[static_cast<std::size_t>(i)]) out.push_back(i);
  }
  return out;
}

inline Vector gather(const Vector& v, const IndexVector& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(rows[k]);
  return out;
}

inline Matrix gather_rows(const Matrix& m, const IndexVector& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  return out;
}

// Columns of `x` with distinct content, keeping first occurrences.
inline IndexVector distinct_columns(const Matrix& x) {
  IndexVector keep;
  std::map<std::size_t, IndexVector> by_hash;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    std::size_t h = 1469598103934665603ull;
    for (Eigen::Index i = 0; i < x.rows(); ++i) h = (h ^ (x(i, j) != 0.0 ? 0x9e37u : 0x1u)) * 1099511628211ull + static_cast<std::size_t>(i & 7);
    bool dup = false;
    for (int k : by_hash[h]) {
      if (x.col(k) == x.col(j)) {
        dup = true;
        break;
      }
    }
    if (!dup) {
      by_hash[h].push_back(static_cast<int>(j));
      keep.push_back(static_cast<int>(j));
    }
  }
  return keep;
}

struct Predictions {
  Vector factual, a0, a1;
};

// Parametric candidates fitted on `train`, evaluated on `test`.
inline Predictions fit_parametric(const RegressionTask& task, LearnerKind kind, const IndexVector& train,
                                  const IndexVector& test, std::vector<std::string>& warnings) {
  const auto* a = task.treatment ? &*task.treatment : nullptr;
  const Vector y = gather(task.outcome, train);
  Predictions out;
  const auto nt = static_cast<Eigen::Index>(test.size());
  if (kind == LearnerKind::kIntercept) {
    double m = y.size() ? y.mean() : 0.0;
    if (task.family == Family::kBinomial) m = clip(m, kSolverProbabilityClip, 1 - kSolverProbabilityClip);
    out.factual = Vector::Constant(nt, m);
    out.a0 = out.factual;
    out.a1 = out.factual;
    return out;
  }
  const Matrix x = glm_design(task.x, a, std::nullopt, train);
  auto design_at = [&](std::optional<int> av) { return glm_design(task.x, a, av, test); };
  if (task.family == Family::kGaussian) {
    IndexVector all(static_cast<std::size_t>(x.cols()));
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
    const auto fit = relaxed_ols(x, y, Vector::Ones(y.size()), all);
    const Vector beta = fit.full_coefficients(x.cols());
    out.factual = design_at(std::nullopt) * beta;
    if (a) {
      out.a0 = design_at(0) * beta;
      out.a1 = design_at(1) * beta;
    }
  } else {
    const auto fit = logistic_irls(x, y);
    if (!fit.converged) warnings.push_back(task.name + ": glm did not converge");
    out.factual = fit.predict(design_at(std::nullopt));
    if (a) {
      out.a0 = fit.predict(design_at(0));
      out.a1 = fit.predict(design_at(1));
    }
  }
  return out;
}

// HAL candidate: one basis over all rows, lasso paths per fold, penalty
// chosen by pooled held-out risk on the same folds.
inline void cross_fit_hal(const RegressionTask& task, const LearnerSpec& spec, const FoldAssignment& folds,
                          Predictions& out, double& risk, std::vector<std::string>& warnings) {
  const auto* a = task.treatment ? &*task.treatment : nullptr;
  const auto domain = a ? BasisDomain::kWA : BasisDomain::kW;
  const BasisSet basis = generate_basis(task.x, domain, spec.hal);
  const Matrix full = design_matrix(basis, task.x, a);
  const IndexVector cols = distinct_columns(full);
  auto select = [&](const Matrix& m) {
    Matrix r(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) r.col(static_cast<Eigen::Index>(k)) = m.col(cols[k]);
    return r;
  };
  const Matrix x = select(full);
  Matrix x0, x1;
  if (a) {
    x0 = select(design_matrix(basis, task.x, nullptr, 0));
    x1 = select(design_matrix(basis, task.x, nullptr, 1));
  }
  const IndexVector unpen{0};
  const auto n = x.rows();
  IndexVector all(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);
  const IndexVector trainable = rows_where(task.trainable, all);
  const Matrix xt = gather_rows(x, trainable);
  const Vector yt = gather(task.outcome, trainable);
  const Vector wt = Vector::Ones(static_cast<Eigen::Index>(trainable.size()));

  std::vector<double> grid;
  if (task.family == Family::kGaussian) {
    GramLassoSolver s(gram_stats(xt, yt, wt), penalty_factors(xt.cols(), unpen));
    grid = lambda_grid(s.lambda_max(1e-10, 100000), spec.hal_grid_size, spec.hal_lambda_min_ratio);
  } else {
    grid = lambda_grid(logistic_lambda_max(xt, yt, wt, unpen), spec.hal_grid_size, spec.hal_lambda_min_ratio);
  }
  const auto g = grid.size();
  std::vector<double> risk_path(g, 0.0);
  double count = 0;
  std::vector<Matrix> fold_coefs(static_cast<std::size_t>(folds.v));
  for (int f = 0; f < folds.v; ++f) {
    const IndexVector train = rows_where(task.trainable, folds.training(f));
    const IndexVector test = rows_where(task.trainable, folds.validation(f));
    const Matrix xf = gather_rows(x, train);
    const Vector yf = gather(task.outcome, train);
    Matrix coefs(x.cols(), static_cast<Eigen::Index>(g));
    if (task.family == Family::kGaussian) {
      GramLassoSolver s(gram_stats(xf, yf, Vector::Ones(yf.size())), penalty_factors(xf.cols(), unpen));
      s.lambda_max(1e-10, 100000);
      for (std::size_t k = 0; k < g; ++k) {
        s.solve(grid[k], 1e-9, 100000, nullptr);
        coefs.col(static_cast<Eigen::Index>(k)) = s.coefficients();
      }
    } else {
      const auto path = logistic_lasso_path(xf, yf, Vector::Ones(yf.size()), grid, unpen);
      for (std::size_t k = 0; k < g; ++k) coefs.col(static_cast<Eigen::Index>(k)) = path[k];
    }
    const Matrix eta = gather_rows(x, test) * coefs;
    for (std::size_t r = 0; r < test.size(); ++r) {
      const double y = task.outcome(test[r]);
      for (std::size_t k = 0; k < g; ++k) {
        double pred = eta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
        if (task.family == Family::kBinomial) pred = expit(pred);
        risk_path[k] += pointwise_risk(task.family, y, pred);
      }
    }
    count += static_cast<double>(test.size());
    fold_coefs[static_cast<std::size_t>(f)] = std::move(coefs);
  }
  std::size_t best = 0;
  for (std::size_t k = 0; k < g; ++k) {
    if (!std::isfinite(risk_path[k])) continue;
    if (!std::isfinite(risk_path[best]) || risk_path[k] < risk_path[best]) best = k;
  }
  risk = count > 0 ? risk_path[best] / count : kInfRisk;
  out.factual = Vector::Zero(n);
  out.a0 = Vector::Zero(n);
  out.a1 = Vector::Zero(n);
  auto link = [&](double eta) {
    return task.family == Family::kBinomial ? clip(expit(eta), kSolverProbabilityClip, 1 - kSolverProbabilityClip) : eta;
  };
  for (int f = 0; f < folds.v; ++f) {
    const Vector beta = fold_coefs[static_cast<std::size_t>(f)].col(static_cast<Eigen::Index>(best));
    for (int i : folds.validation(f)) {
      out.factual(i) = link(x.row(i).dot(beta));
      if (a) {
        out.a0(i) = link(x0.row(i).dot(beta));
        out.a1(i) = link(x1.row(i).dot(beta));
      }
    }
  }
  if (best + 1 == g) warnings.push_back(task.name + ": hal selected the smallest penalty on its grid");
}

}  // namespace detail

// Mean held-out risk of one candidate; +inf when the candidate fails.
inline double cv_risk(const LearnerSpec& candidate, const RegressionTask& task, const FoldAssignment& folds,
                      detail::Predictions* predictions = nullptr, std::vector<std::string>* warnings = nullptr) {
  std::vector<std::string> local;
  auto& warn = warnings ? *warnings : local;
  const auto n = task.x.rows();
  detail::Predictions out{Vector::Zero(n), Vector::Zero(n), Vector::Zero(n)};
  double risk = 0.0;
  try {
    if (candidate.kind == LearnerKind::kHal) {
      detail::cross_fit_hal(task, candidate, folds, out, risk, warn);
    } else {
      double total = 0.0, count = 0.0;
      for (int f = 0; f < folds.v; ++f) {
        const IndexVector train = detail::rows_where(task.trainable, folds.training(f));
        const IndexVector test = folds.validation(f);
        if (train.empty()) throw EstimationError("empty training split");
        const auto p = detail::fit_parametric(task, candidate.kind, train, test, warn);
        for (std::size_t k = 0; k < test.size(); ++k) {
          const int i = test[k];
          const auto kk = static_cast<Eigen::Index>(k);
          out.factual(i) = p.factual(kk);
          if (task.treatment) {
            out.a0(i) = p.a0(kk);
            out.a1(i) = p.a1(kk);
          }
          if (task.trainable[static_cast<std::size_t>(i)]) {
            total += detail::pointwise_risk(task.family, task.outcome(i), p.factual(kk));
            count += 1;
          }
        }
      }
      risk = count > 0 ? total / count : detail::kInfRisk;
    }
  } catch (const std::exception& e) {
    warn.push_back(task.name + ": candidate " + candidate.name() + " failed (" + e.what() + ")");
    return detail::kInfRisk;
  }
  if (!std::isfinite(risk) || !out.factual.allFinite()) return detail::kInfRisk;
  if (predictions) *predictions = std::move(out);
  return risk;
}

// Discrete super learner: out-of-fold predictions of the candidate with the
// lowest cross-validated risk (ties go to the lower library index).
inline CrossFitResult cross_fit(const RegressionTask& task, const FoldAssignment& folds,
                                const std::vector<LearnerSpec>& library) {
  if (library.empty()) throw ValidationError("empty learner library");
  CrossFitResult res;
  std::vector<detail::Predictions> preds(library.size());
  for (std::size_t c = 0; c < library.size(); ++c) {
    res.cv_risk.push_back(cv_risk(library[c], task, folds, &preds[c], &res.warnings));
    if (res.chosen < 0 || res.cv_risk[c] < res.cv_risk[static_cast<std::size_t>(res.chosen)]) {
      if (std::isfinite(res.cv_risk[c])) res.chosen = static_cast<int>(c);
    }
  }
  if (res.chosen < 0) throw EstimationError(task.name + ": every library candidate failed");
  auto& best = preds[static_cast<std::size_t>(res.chosen)];
  res.factual = std::move(best.factual);
  res.at_a0 = std::move(best.a0);
  res.at_a1 = std::move(best.a1);
  return res;
}

struct NuisanceOptions {
  std::vector<LearnerSpec> library = default_library();
  double truncation = 0.01;
};

struct NuisanceFit {
  Vector theta;       // E(Y | W)
  Vector g1;          // P(A = 1 | W)
  Vector qbar0, qbar1;  // E(Y | W, A = a)
  Vector pi1_a0, pi1_a1;  // P(S = 1 | W, A = a)
  Vector gdelta;       // P(Delta = 1 | S, W, A)
  Vector gtilde_delta; // P(Delta = 1 | W, A)
  std::map<std::string, std::string> learner_choice;
  std::map<std::string, std::vector<double>> cv_risks;
  std::map<std::string, int> truncation_events;
  double truncation = 0.01;
  bool external_controls_only = false;
  std::vector<std::string> warnings;

  [[nodiscard]] double qbar(Eigen::Index i, int a) const { return a == 1 ? qbar1(i) : qbar0(i); }
  [[nodiscard]] double pi1(Eigen::Index i, int a) const { return a == 1 ? pi1_a1(i) : pi1_a0(i); }
  [[nodiscard]] double g(Eigen::Index i, int a) const { return a == 1 ? g1(i) : 1.0 - g1(i); }
};

namespace detail {

inline int truncate(Vector& v, double eps) {
  int events = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double c = clip(v(i), eps, 1.0 - eps);
    if (c != v(i)) {
      ++events;
      v(i) = c;
    }
  }
  return events;
}

inline std::vector<bool> all_rows(Eigen::Index n) { return std::vector<bool>(static_cast<std::size_t>(n), true); }

inline std::vector<bool> observed_rows(const FusionDataset& data) {
  std::vector<bool> m(static_cast<std::size_t>(data.n()));
  for (Eigen::Index i = 0; i < data.n(); ++i) m[static_cast<std::size_t>(i)] = data.delta(i) == 1;
  return m;
}

inline Vector outcome_or_zero(const FusionDataset& data) {
  Vector y = data.y();
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (data.delta(i) == 0 || !std::isfinite(y(i))) y(i) = 0.0;
  }
  return y;
}

inline Vector as_vector(const std::vector<int>& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

inline void record(NuisanceFit& fit, const std::string& key, const CrossFitResult& r,
                   const std::vector<LearnerSpec>& lib) {
  fit.learner_choice[key] = lib[static_cast<std::size_t>(r.chosen)].name();
  fit.cv_risks[key] = r.cv_risk;
  fit.warnings.insert(fit.warnings.end(), r.warnings.begin(), r.warnings.end());
}

}  // namespace detail

inline NuisanceFit fit_nuisances(const FusionDataset& data, const FoldAssignment& folds,
                                 const NuisanceOptions& opt = {}) {
  if (static_cast<Eigen::Index>(folds.fold_of.size()) != data.n()) throw ValidationError("folds do not cover dataset");
  const auto n = data.n();
  const double eps = opt.truncation;
  NuisanceFit fit;
  fit.truncation = eps;
  fit.external_controls_only = data.external_controls_only();
  const Vector y = detail::outcome_or_zero(data);
  const auto observed = detail::observed_rows(data);
  const Vector s_vec = detail::as_vector(data.s_column());
  const Vector a_vec = detail::as_vector(data.a_column());
  const auto& lib = opt.library;

  {
    RegressionTask t{"theta", Family::kGaussian, data.w(), std::nullopt, y, observed};
    const auto r = cross_fit(t, folds, lib);
    fit.theta = r.factual;
    detail::record(fit, "theta", r, lib);
  }
  {
    RegressionTask t{"g", Family::kBinomial, data.w(), std::nullopt, a_vec, detail::all_rows(n)};
    const auto r = cross_fit(t, folds, lib);
    fit.g1 = r.factual;
    detail::record(fit, "g", r, lib);
    fit.truncation_events["g"] = detail::truncate(fit.g1, eps);
  }
  {
    RegressionTask t{"qbar", Family::kGaussian, data.w(), data.a_column(), y, observed};
    const auto r = cross_fit(t, folds, lib);
    fit.qbar0 = r.at_a0;
    fit.qbar1 = r.at_a1;
    detail::record(fit, "qbar", r, lib);
  }
  if (data.external_controls_only()) {
    // P(S = 0 | W, A = 1) = 0 by design; only the control arm is estimated.
    std::vector<bool> controls(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) controls[static_cast<std::size_t>(i)] = data.a(i) == 0;
    RegressionTask t{"pi", Family::kBinomial, data.w(), std::nullopt, s_vec, controls};
    const auto r = cross_fit(t, folds, lib);
    fit.pi1_a0 = r.factual;
    fit.pi1_a1 = Vector::Ones(n);
    detail::record(fit, "pi", r, lib);
    fit.truncation_events["pi"] = detail::truncate(fit.pi1_a0, eps);
  } else {
    RegressionTask t{"pi", Family::kBinomial, data.w(), data.a_column(), s_vec, detail::all_rows(n)};
    const auto r = cross_fit(t, folds, lib);
    fit.pi1_a0 = r.at_a0;
    fit.pi1_a1 = r.at_a1;
    detail::record(fit, "pi", r, lib);
    fit.truncation_events["pi"] = detail::truncate(fit.pi1_a0, eps) + detail::truncate(fit.pi1_a1, eps);
  }
  if (data.has_delta() && data.any_censored()) {
    const Vector d_vec = detail::as_vector(data.delta_column());
    Matrix ws(n, data.d() + 1);
    ws << data.w(), s_vec;
    RegressionTask t{"gdelta", Family::kBinomial, ws, data.a_column(), d_vec, detail::all_rows(n)};
    const auto r = cross_fit(t, folds, lib);
    fit.gdelta = r.factual;
    detail::record(fit, "gdelta", r, lib);
    fit.truncation_events["gdelta"] = detail::truncate(fit.gdelta, eps);
    RegressionTask tt{"gtilde_delta", Family::kBinomial, data.w(), data.a_column(), d_vec, detail::all_rows(n)};
    const auto rt = cross_fit(tt, folds, lib);
    fit.gtilde_delta = rt.factual;
    detail::record(fit, "gtilde_delta", rt, lib);
    fit.truncation_events["gtilde_delta"] = detail::truncate(fit.gtilde_delta, eps);
  } else {
    fit.gdelta = Vector::Ones(n);
    fit.gtilde_delta = Vector::Ones(n);
  }
  return fit;
}

// Nuisances of the trial-only estimands: E(Y | S=1, W, A=a), P(A=1 | S=1, W)
// and P(S=1 | W). Trained on trial rows, predicted for every row.
struct TrialNuisanceFit {
  Vector q1_a0, q1_a1;
  Vector g_trial;
  Vector pibar;
  std::map<std::string, std::string> learner_choice;
  std::map<std::string, int> truncation_events;
  std::vector<std::string> warnings;
};

inline TrialNuisanceFit fit_trial_nuisances(const FusionDataset& data, const FoldAssignment& folds,
                                            const NuisanceOptions& opt = {}) {
  const auto n = data.n();
  TrialNuisanceFit fit;
  const Vector y = detail::outcome_or_zero(data);
  std::vector<bool> trial_observed(static_cast<std::size_t>(n)), trial(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    trial[static_cast<std::size_t>(i)] = data.s(i) == 1;
    trial_observed[static_cast<std::size_t>(i)] = data.s(i) == 1 && data.delta(i) == 1;
  }
  const auto& lib = opt.library;
  auto note = [&](const std::string& key, const CrossFitResult& r) {
    fit.learner_choice[key] = lib[static_cast<std::size_t>(r.chosen)].name();
    fit.warnings.insert(fit.warnings.end(), r.warnings.begin(), r.warnings.end());
  };
  {
    RegressionTask t{"q_trial", Family::kGaussian, data.w(), data.a_column(), y, trial_observed};
    const auto r = cross_fit(t, folds, lib);
    fit.q1_a0 = r.at_a0;
    fit.q1_a1 = r.at_a1;
    note("q_trial", r);
  }
  {
    RegressionTask t{"g_trial", Family::kBinomial, data.w(), std::nullopt, detail::as_vector(data.a_column()), trial};
    const auto r = cross_fit(t, folds, lib);
    fit.g_trial = r.factual;
    note("g_trial", r);
    fit.truncation_events["g_trial"] = detail::truncate(fit.g_trial, opt.truncation);
  }
  {
    RegressionTask t{"pibar", Family::kBinomial, data.w(), std::nullopt, detail::as_vector(data.s_column()),
                     detail::all_rows(n)};
    const auto r = cross_fit(t, folds, lib);
    fit.pibar = r.factual;
    note("pibar", r);
    fit.truncation_events["pibar"] = detail::truncate(fit.pibar, opt.truncation);
  }
  return fit;
}

}  // namespace atmle
