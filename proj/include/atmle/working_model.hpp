#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/hal_basis.hpp"
#include "atmle/nuisance.hpp"
#include "atmle/solvers.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <vector>

namespace atmle {

// Working-model regressions in division-free form: the response r is
// regressed on the columns f_i * phi_j(x_i), where f is the residualized
// treatment (A - g) or enrollment (S - Pi) indicator.
struct TransformedDesign {
  BasisSet basis;
  IndexVector columns;  // basis indices kept after collapsing duplicate columns
  Matrix phi;           // basis at the observed (W, A); one column per entry of `columns`
  Matrix phi_a0, phi_a1;  // basis at (W, 0) and (W, 1); same as `phi` for W-only bases
  Vector factor;
  Vector response;
  Vector weights;
  IndexVector main_terms;  // positions (into `columns`) of first-degree terms

  [[nodiscard]] Eigen::Index n() const { return phi.rows(); }
  [[nodiscard]] Matrix design(const IndexVector& rows) const {
    Matrix x(static_cast<Eigen::Index>(rows.size()), phi.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) x.row(static_cast<Eigen::Index>(k)) = factor(rows[k]) * phi.row(rows[k]);
    return x;
  }
};

struct WorkingModelOptions {
  BasisOptions basis{1, 10};
  double undersmooth = 1.0;
  bool force_main_terms = false;
  bool intercept_only = false;
  int grid_size = 100;
  double lambda_min_ratio = 1e-4;
};

struct WorkingModel {
  BasisSet basis;        // all candidate functions
  IndexVector support;   // basis indices with a relaxed coefficient
  IndexVector design_columns;  // positions of `support` within the transformed design
  Vector beta;
  Matrix gram_inverse;
  double lambda = 0.0;
  IndexVector dropped_columns;  // collinear support members removed by the refit

  [[nodiscard]] double predict(const Vector& w, std::optional<int> a = std::nullopt) const {
    if (w.size() != basis.dimension) throw ValidationError("covariate dimension mismatch");
    if (a.has_value() != (basis.domain == BasisDomain::kWA)) throw ValidationError("working model domain mismatch");
    double out = 0.0;
    for (std::size_t k = 0; k < support.size(); ++k) {
      out += beta(static_cast<Eigen::Index>(k)) *
             basis.functions[static_cast<std::size_t>(support[k])].evaluate(w.data(), a.value_or(0));
    }
    return out;
  }

  // tau at every row of a transformed design, with the basis evaluated at `phi`.
  [[nodiscard]] Vector predict_rows(const Matrix& phi) const {
    Vector out = Vector::Zero(phi.rows());
    for (std::size_t k = 0; k < design_columns.size(); ++k) out += beta(static_cast<Eigen::Index>(k)) * phi.col(design_columns[k]);
    return out;
  }
};

inline double predict_tau(const WorkingModel& model, const Vector& w, std::optional<int> a = std::nullopt) {
  return model.predict(w, a);
}

namespace detail {

inline TransformedDesign build_design(const BasisSet& basis, const Matrix& w, const std::vector<int>* a, Vector factor,
                                      Vector response, Vector weights) {
  TransformedDesign td;
  td.basis = basis;
  const bool wa = basis.domain == BasisDomain::kWA;
  const Matrix full = design_matrix(basis, w, wa ? a : nullptr);
  td.columns = distinct_columns(full);
  auto pick = [&](const Matrix& m) {
    Matrix r(m.rows(), static_cast<Eigen::Index>(td.columns.size()));
    for (std::size_t k = 0; k < td.columns.size(); ++k) r.col(static_cast<Eigen::Index>(k)) = m.col(td.columns[k]);
    return r;
  };
  td.phi = pick(full);
  if (wa) {
    td.phi_a0 = pick(design_matrix(basis, w, nullptr, 0));
    td.phi_a1 = pick(design_matrix(basis, w, nullptr, 1));
  } else {
    td.phi_a0 = td.phi;
    td.phi_a1 = td.phi;
  }
  for (std::size_t k = 0; k < td.columns.size(); ++k) {
    if (basis.functions[static_cast<std::size_t>(td.columns[k])].subset.size() <= 1) td.main_terms.push_back(static_cast<int>(k));
  }
  td.factor = std::move(factor);
  td.response = std::move(response);
  td.weights = std::move(weights);
  return td;
}

inline Vector gather_vec(const Vector& v, const IndexVector& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(rows[k]);
  return out;
}

}  // namespace detail

// Design for the conditional treatment effect: (A - g(1|W)) phi(W) against
// Y - theta(W), with weights Delta / g~Delta(1|W,A) when outcomes are missing.
inline TransformedDesign cate_design(const FusionDataset& data, const NuisanceFit& nuis, const BasisSet& basis) {
  if (basis.domain != BasisDomain::kW) throw ValidationError("treatment-effect basis must be over W");
  const auto n = data.n();
  Vector factor(n), response(n), weights(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    factor(i) = data.a(i) - nuis.g1(i);
    const bool observed = data.delta(i) == 1;
    response(i) = observed ? data.y(i) - nuis.theta(i) : 0.0;
    weights(i) = observed ? 1.0 / nuis.gtilde_delta(i) : 0.0;
  }
  return detail::build_design(basis, data.w(), nullptr, std::move(factor), std::move(response), std::move(weights));
}

// Design for the trial-enrollment effect: (S - Pi(1|W,A)) phi(W,A) against
// Y - Qbar(W,A), with weights Delta / g^Delta(1|S,W,A).
inline TransformedDesign enroll_design(const FusionDataset& data, const NuisanceFit& nuis, const BasisSet& basis) {
  if (basis.domain != BasisDomain::kWA) throw ValidationError("enrollment-effect basis must be over (W,A)");
  const auto n = data.n();
  Vector factor(n), response(n), weights(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = data.a(i);
    factor(i) = data.s(i) - nuis.pi1(i, a);
    const bool observed = data.delta(i) == 1;
    response(i) = observed ? data.y(i) - nuis.qbar(i, a) : 0.0;
    weights(i) = observed ? 1.0 / nuis.gdelta(i) : 0.0;
  }
  return detail::build_design(basis, data.w(), &data.a_column(), std::move(factor), std::move(response),
                              std::move(weights));
}

// Lasso support (positions into the design columns) selected on `rows`.
// Unpenalized columns are always part of the returned support.
inline IndexVector select_support(const TransformedDesign& td, const IndexVector& rows, const FoldAssignment& folds,
                                  const WorkingModelOptions& opt, double* lambda_out = nullptr) {
  IndexVector unpen{0};
  if (opt.force_main_terms) {
    for (int j : td.main_terms) {
      if (j != 0) unpen.push_back(j);
    }
  }
  if (opt.intercept_only) return {0};
  const Matrix x = td.design(rows);
  const Vector y = detail::gather_vec(td.response, rows);
  const Vector w = detail::gather_vec(td.weights, rows);
  LassoOptions lo;
  lo.unpenalized = unpen;
  lo.undersmooth = opt.undersmooth;
  lo.grid_size = opt.grid_size;
  lo.lambda_min_ratio = opt.lambda_min_ratio;
  const auto fit = cv_lasso(x, y, w, folds.restricted(rows), lo);
  if (lambda_out) *lambda_out = fit.lambda;
  IndexVector support = fit.support;
  for (int j : unpen) support.push_back(j);
  std::sort(support.begin(), support.end());
  support.erase(std::unique(support.begin(), support.end()), support.end());
  return support;
}

// Relaxed least-squares refit of a support on `rows`.
inline WorkingModel refit(const TransformedDesign& td, const IndexVector& rows, const IndexVector& support) {
  const Matrix x = td.design(rows);
  const Vector y = detail::gather_vec(td.response, rows);
  const Vector w = detail::gather_vec(td.weights, rows);
  const auto rf = relaxed_ols(x, y, w, support);
  WorkingModel m;
  m.basis = td.basis;
  m.design_columns = rf.retained;
  for (int k : rf.retained) m.support.push_back(td.columns[static_cast<std::size_t>(k)]);
  for (int k : rf.dropped_columns) m.dropped_columns.push_back(td.columns[static_cast<std::size_t>(k)]);
  m.beta = rf.coefficients.size() ? rf.coefficients : Vector();
  m.gram_inverse = rf.gram_inverse;
  return m;
}

inline IndexVector all_rows_of(Eigen::Index n) {
  IndexVector rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = static_cast<int>(i);
  return rows;
}

inline WorkingModel learn_from_design(const TransformedDesign& td, const FoldAssignment& folds,
                                      const WorkingModelOptions& opt) {
  const auto rows = all_rows_of(td.n());
  double lambda = 0.0;
  const auto support = select_support(td, rows, folds.rotated(1), opt, &lambda);
  auto m = refit(td, rows, support);
  m.lambda = lambda;
  return m;
}

inline WorkingModel learn_tau_A(const FusionDataset& data, const NuisanceFit& nuis, const BasisSet& basis,
                                const FoldAssignment& folds, const WorkingModelOptions& opt = {}) {
  return learn_from_design(cate_design(data, nuis, basis), folds, opt);
}

inline WorkingModel learn_tau_S(const FusionDataset& data, const NuisanceFit& nuis, const BasisSet& basis,
                                const FoldAssignment& folds, const WorkingModelOptions& opt = {}) {
  if (data.cell_count(0, 0) + data.cell_count(0, 1) == 0) throw ValidationError("no external rows");
  return learn_from_design(enroll_design(data, nuis, basis), folds, opt);
}

// Per-row weighted scores w_i x_i (r_i - x_i beta) over the retained columns.
inline Matrix score_rows(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows) {
  const auto r = static_cast<Eigen::Index>(m.design_columns.size());
  Matrix out(static_cast<Eigen::Index>(rows.size()), r);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int i = rows[k];
    double fit = 0.0;
    for (Eigen::Index c = 0; c < r; ++c) fit += m.beta(c) * td.phi(i, m.design_columns[static_cast<std::size_t>(c)]);
    const double resid = td.response(i) - td.factor(i) * fit;
    for (Eigen::Index c = 0; c < r; ++c) {
      out(static_cast<Eigen::Index>(k), c) =
          td.weights(i) * td.factor(i) * td.phi(i, m.design_columns[static_cast<std::size_t>(c)]) * resid;
    }
  }
  return out;
}

// Largest |mean score| over retained columns.
inline double score_residual(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows) {
  if (m.design_columns.empty() || rows.empty()) return 0.0;
  const Matrix s = score_rows(td, m, rows);
  return (s.colwise().sum() / static_cast<double>(rows.size())).cwiseAbs().maxCoeff();
}

inline nlohmann::json to_json(const WorkingModel& m) {
  nlohmann::json fs = nlohmann::json::array();
  for (std::size_t k = 0; k < m.support.size(); ++k) {
    auto f = to_json(m.basis.functions[static_cast<std::size_t>(m.support[k])]);
    f["coefficient"] = m.beta(static_cast<Eigen::Index>(k));
    fs.push_back(f);
  }
  return {{"domain", m.basis.domain == BasisDomain::kW ? "W" : "WA"},
          {"candidate_functions", m.basis.size()},
          {"lambda", m.lambda},
          {"dropped_columns", m.dropped_columns},
          {"terms", fs}};
}

}  // namespace atmle
