#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"

#include <json.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace atmle {

// ---------------------------------------------------------------------------
// Weighted lasso by covariance-update coordinate descent.
//
// Objective on the standardized scale (columns scaled to unit weighted second
// moment, no centering):
//   (1 / 2 sw) sum_i w_i (y_i - x_i b)^2 + lambda * sum_j pf_j |b_j|
// Columns with pf_j = 0 are unpenalized.
// ---------------------------------------------------------------------------

struct LassoOptions {
  IndexVector unpenalized;       // column indices with zero penalty
  int grid_size = 100;
  double lambda_min_ratio = 1e-4;
  double undersmooth = 1.0;      // multiplier (<= 1) applied to the CV-selected lambda
  double tolerance = 1e-11;
  int max_sweeps = 200000;
  std::optional<double> fixed_lambda;
  int early_stop_patience = 10;  // stop the CV path after this many grid points without a new minimum; 0 = full grid
  std::vector<double>* objective_trace = nullptr;  // per full sweep, for diagnostics
};

struct LassoFit {
  Vector coefficients;  // original scale, one per design column
  double lambda = 0.0;  // standardized-scale penalty actually used
  IndexVector support;
  std::vector<std::pair<double, double>> cv_risk_path;
  std::vector<double> lambda_grid;
  int selected_index = -1;
  IndexVector dropped_columns;  // degenerate columns removed before fitting
};

namespace detail {

// Sufficient statistics of a weighted least-squares problem.
struct GramStats {
  Matrix gram;  // X' W X
  Vector xty;   // X' W y
  double yty = 0.0;
  double sw = 0.0;

  GramStats& operator+=(const GramStats& o) {
    gram += o.gram;
    xty += o.xty;
    yty += o.yty;
    sw += o.sw;
    return *this;
  }
  GramStats operator-(const GramStats& o) const {
    GramStats r{gram - o.gram, xty - o.xty, yty - o.yty, sw - o.sw};
    return r;
  }
};

inline GramStats gram_stats(const Matrix& x, const Vector& y, const Vector& w) {
  const Vector sqw = w.array().sqrt();
  Matrix xs = x.array().colwise() * sqw.array();
  GramStats s;
  s.gram = Matrix::Zero(x.cols(), x.cols());
  if (x.rows() == 0) {
    s.xty = Vector::Zero(x.cols());
    return s;
  }
  s.gram.selfadjointView<Eigen::Lower>().rankUpdate(xs.transpose());
  s.gram = s.gram.selfadjointView<Eigen::Lower>();
  s.xty = x.transpose() * (w.array() * y.array()).matrix();
  s.yty = (w.array() * y.array().square()).sum();
  s.sw = w.sum();
  return s;
}

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

// Coordinate descent on one standardized problem. State kept between calls
// so that a decreasing lambda sequence is solved with warm starts.
class GramLassoSolver {
 public:
  GramLassoSolver(const GramStats& stats, std::vector<double> penalty_factor)
      : pf_(std::move(penalty_factor)) {
    const auto p = stats.gram.rows();
    scale_ = Vector::Zero(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      const double m2 = stats.gram(j, j) / stats.sw;
      scale_(j) = m2 > 0 ? std::sqrt(m2) : 0.0;
    }
    g_ = Matrix::Zero(p, p);
    c_ = Vector::Zero(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      if (scale_(j) == 0) continue;
      c_(j) = stats.xty(j) / (stats.sw * scale_(j));
      for (Eigen::Index k = 0; k < p; ++k) {
        if (scale_(k) == 0) continue;
        g_(j, k) = stats.gram(j, k) / (stats.sw * scale_(j) * scale_(k));
      }
    }
    yy_ = stats.yty / stats.sw;
    b_ = Vector::Zero(p);
    grad_ = c_;
  }

  // Largest penalty at which all penalized coefficients are zero.
  double lambda_max(double tol, int max_sweeps) {
    solve(std::numeric_limits<double>::infinity(), tol, max_sweeps, nullptr);
    double lm = 0.0;
    for (Eigen::Index j = 0; j < b_.size(); ++j) {
      if (pf_[static_cast<std::size_t>(j)] > 0 && scale_(j) > 0) {
        lm = std::max(lm, std::abs(grad_(j)) / pf_[static_cast<std::size_t>(j)]);
      }
    }
    return lm;
  }

  double objective(double lambda) const {
    double pen = 0.0;
    for (Eigen::Index j = 0; j < b_.size(); ++j) pen += pf_[static_cast<std::size_t>(j)] * std::abs(b_(j));
    const double quad = 0.5 * yy_ - c_.dot(b_) + 0.5 * b_.dot(g_ * b_);
    return quad + (std::isfinite(lambda) ? lambda * pen : 0.0);
  }

  void solve(double lambda, double tol, int max_sweeps, std::vector<double>* trace) {
    const auto p = b_.size();
    const double scale = std::sqrt(std::max(yy_, 1e-300));
    auto sweep = [&](bool active_only) {
      double max_change = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (scale_(j) == 0) continue;
        if (active_only && b_(j) == 0.0) continue;
        const double pf = pf_[static_cast<std::size_t>(j)];
        const double z = grad_(j) + g_(j, j) * b_(j);
        double nb;
        if (pf == 0.0) {
          nb = z / g_(j, j);
        } else if (!std::isfinite(lambda)) {
          nb = 0.0;
        } else {
          nb = soft_threshold(z, lambda * pf) / g_(j, j);
        }
        const double delta = nb - b_(j);
        if (delta != 0.0) {
          grad_ -= g_.col(j) * delta;
          b_(j) = nb;
          max_change = std::max(max_change, std::abs(delta) * std::sqrt(g_(j, j)));
        }
      }
      return max_change;
    };
    for (int it = 0; it < max_sweeps; ++it) {
      const double full = sweep(false);
      if (trace) trace->push_back(objective(lambda));
      if (full < tol * scale) break;
      if (active_set_step(lambda)) {
        if (trace) trace->push_back(objective(lambda));
        continue;
      }
      for (int inner = 0; inner < max_sweeps; ++inner) {
        if (sweep(true) < tol * scale) break;
      }
    }
  }

  // Feature-sign step on the current active set: minimize the quadratic on the
  // orthant face of the current signs, moving only as far as the first
  // coordinate that would cross zero; that coordinate leaves the set and the
  // step repeats. Each move stays on one face, so the objective cannot rise.
  bool active_set_step(double lambda) {
    if (!std::isfinite(lambda)) return false;
    IndexVector act;
    for (Eigen::Index j = 0; j < b_.size(); ++j) {
      if (scale_(j) > 0 && b_(j) != 0.0) act.push_back(static_cast<int>(j));
    }
    bool moved = false;
    while (!act.empty()) {
      const auto m = static_cast<Eigen::Index>(act.size());
      Matrix gaa(m, m);
      Vector rhs(m), cur(m);
      for (Eigen::Index r = 0; r < m; ++r) {
        const int j = act[static_cast<std::size_t>(r)];
        const double pf = pf_[static_cast<std::size_t>(j)];
        cur(r) = b_(j);
        rhs(r) = c_(j) - (pf > 0 ? lambda * pf * (b_(j) > 0 ? 1.0 : -1.0) : 0.0);
        for (Eigen::Index k = 0; k < m; ++k) gaa(r, k) = g_(j, act[static_cast<std::size_t>(k)]);
      }
      Eigen::LDLT<Matrix> ldlt(gaa);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-12) break;
      const Vector x = ldlt.solve(rhs);
      if (!x.allFinite()) break;
      double t = 1.0;
      Eigen::Index hit = -1;
      for (Eigen::Index r = 0; r < m; ++r) {
        if (pf_[static_cast<std::size_t>(act[static_cast<std::size_t>(r)])] == 0.0) continue;
        if (x(r) * cur(r) <= 0.0) {
          const double tr = cur(r) / (cur(r) - x(r));
          if (tr < t) {
            t = tr;
            hit = r;
          }
        }
      }
      const Vector next = cur + t * (x - cur);
      for (Eigen::Index r = 0; r < m; ++r) {
        const int j = act[static_cast<std::size_t>(r)];
        const double nb = r == hit ? 0.0 : next(r);
        const double delta = nb - b_(j);
        if (delta != 0.0) grad_ -= g_.col(j) * delta;
        b_(j) = nb;
      }
      moved = true;
      if (hit < 0) break;
      act.erase(act.begin() + hit);
    }
    return moved;
  }

  // Original-scale coefficients.
  [[nodiscard]] Vector coefficients() const {
    Vector out = Vector::Zero(b_.size());
    for (Eigen::Index j = 0; j < b_.size(); ++j) {
      if (scale_(j) > 0) out(j) = b_(j) / scale_(j);
    }
    return out;
  }

  [[nodiscard]] const Vector& gradient() const { return grad_; }
  [[nodiscard]] const Vector& standardized() const { return b_; }

 private:
  std::vector<double> pf_;
  Vector scale_;
  Matrix g_;
  Vector c_;
  double yy_ = 0.0;
  Vector b_;
  Vector grad_;
};

inline std::vector<double> penalty_factors(Eigen::Index p, const IndexVector& unpenalized) {
  std::vector<double> pf(static_cast<std::size_t>(p), 1.0);
  for (int j : unpenalized) {
    if (j >= 0 && j < p) pf[static_cast<std::size_t>(j)] = 0.0;
  }
  return pf;
}

// Penalized columns that are constant over positively weighted rows, when a
// constant unpenalized column is present to absorb them.
inline IndexVector degenerate_columns(const Matrix& x, const Vector& w, const std::vector<double>& pf) {
  IndexVector out;
  const auto p = x.cols();
  std::vector<bool> constant(static_cast<std::size_t>(p), true);
  std::vector<bool> zero(static_cast<std::size_t>(p), true);
  for (Eigen::Index j = 0; j < p; ++j) {
    std::optional<double> first;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (w(i) <= 0) continue;
      const double v = x(i, j);
      if (v != 0.0) zero[static_cast<std::size_t>(j)] = false;
      if (!first) first = v;
      else if (v != *first) constant[static_cast<std::size_t>(j)] = false;
    }
  }
  bool has_unpenalized_constant = false;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (pf[static_cast<std::size_t>(j)] == 0 && constant[static_cast<std::size_t>(j)] && !zero[static_cast<std::size_t>(j)]) {
      has_unpenalized_constant = true;
    }
  }
  for (Eigen::Index j = 0; j < p; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    if (zero[jj] || (pf[jj] > 0 && constant[jj] && has_unpenalized_constant)) out.push_back(static_cast<int>(j));
  }
  return out;
}

inline void check_finite(const Matrix& x, const Vector& y, const Vector& w) {
  if (!x.allFinite() || !y.allFinite() || !w.allFinite()) throw ValidationError("non-finite solver input");
  if ((w.array() < 0).any()) throw ValidationError("negative weights");
  if (w.sum() <= 0) throw ValidationError("weights are all zero");
}

}  // namespace detail

inline std::vector<double> lambda_grid(double lambda_max, int size, double min_ratio) {
  std::vector<double> grid;
  if (lambda_max <= 0 || size < 1) return {0.0};
  if (size == 1) return {lambda_max};
  const double step = std::log(min_ratio) / (size - 1);
  for (int k = 0; k < size; ++k) grid.push_back(lambda_max * std::exp(step * k));
  return grid;
}

// Lasso over `folds` with the lambda-min rule. With `fixed_lambda` set the
// CV step is skipped and the full-data fit at that penalty is returned.
inline LassoFit cv_lasso(const Matrix& design, const Vector& response, const Vector& weights,
                         const FoldAssignment& folds, const LassoOptions& opt = {}) {
  detail::check_finite(design, response, weights);
  if (design.rows() != response.size() || design.rows() != weights.size()) {
    throw ValidationError("design, response and weights disagree in length");
  }
  const auto p = design.cols();
  auto pf = detail::penalty_factors(p, opt.unpenalized);
  LassoFit fit;
  fit.dropped_columns = detail::degenerate_columns(design, weights, pf);
  std::vector<bool> keep(static_cast<std::size_t>(p), true);
  for (int j : fit.dropped_columns) keep[static_cast<std::size_t>(j)] = false;
  IndexVector kept;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (keep[static_cast<std::size_t>(j)]) kept.push_back(static_cast<int>(j));
  }
  Matrix x(design.rows(), static_cast<Eigen::Index>(kept.size()));
  std::vector<double> pf_kept;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    x.col(static_cast<Eigen::Index>(k)) = design.col(kept[k]);
    pf_kept.push_back(pf[static_cast<std::size_t>(kept[k])]);
  }

  fit.coefficients = Vector::Zero(p);
  if (kept.empty()) return fit;

  const bool use_cv = !opt.fixed_lambda.has_value();
  std::vector<detail::GramStats> per_fold;
  detail::GramStats full;
  std::vector<IndexVector> fold_rows;
  if (use_cv) {
    for (int f = 0; f < folds.v; ++f) {
      fold_rows.push_back(folds.validation(f));
      const auto& rows = fold_rows.back();
      Matrix xf(static_cast<Eigen::Index>(rows.size()), x.cols());
      Vector yf(static_cast<Eigen::Index>(rows.size())), wf(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t k = 0; k < rows.size(); ++k) {
        xf.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
        yf(static_cast<Eigen::Index>(k)) = response(rows[k]);
        wf(static_cast<Eigen::Index>(k)) = weights(rows[k]);
      }
      per_fold.push_back(detail::gram_stats(xf, yf, wf));
      if (f == 0) full = per_fold.back();
      else full += per_fold.back();
    }
  } else {
    full = detail::gram_stats(x, response, weights);
  }

  detail::GramLassoSolver solver(full, pf_kept);
  const double lmax = solver.lambda_max(opt.tolerance, opt.max_sweeps);
  double chosen = 0.0;
  if (use_cv) {
    fit.lambda_grid = lambda_grid(lmax, opt.grid_size, opt.lambda_min_ratio);
    std::vector<detail::GramLassoSolver> fold_solvers;
    std::vector<int> usable;
    double held_weight = 0.0;
    for (int f = 0; f < folds.v; ++f) {
      const auto train = full - per_fold[static_cast<std::size_t>(f)];
      if (train.sw <= 0 || fold_rows[static_cast<std::size_t>(f)].empty()) continue;
      fold_solvers.emplace_back(train, pf_kept);
      fold_solvers.back().lambda_max(opt.tolerance, opt.max_sweeps);
      usable.push_back(f);
      for (int i : fold_rows[static_cast<std::size_t>(f)]) held_weight += weights(i);
    }
    std::size_t best = 0;
    int since_best = 0;
    for (std::size_t k = 0; k < fit.lambda_grid.size(); ++k) {
      double risk = 0.0;
      for (std::size_t u = 0; u < usable.size(); ++u) {
        fold_solvers[u].solve(fit.lambda_grid[k], opt.tolerance, opt.max_sweeps, nullptr);
        const Vector beta = fold_solvers[u].coefficients();
        for (int i : fold_rows[static_cast<std::size_t>(usable[u])]) {
          const double r = response(i) - x.row(i).dot(beta);
          risk += weights(i) * r * r;
        }
      }
      risk /= held_weight;
      fit.cv_risk_path.emplace_back(fit.lambda_grid[k], risk);
      if (risk < fit.cv_risk_path[best].second) {
        best = k;
        since_best = 0;
      } else if (opt.early_stop_patience > 0 && ++since_best >= opt.early_stop_patience) {
        break;
      }
    }
    fit.selected_index = static_cast<int>(best);
    chosen = fit.lambda_grid[best] * opt.undersmooth;
    for (double l : fit.lambda_grid) {
      if (l <= chosen) break;
      solver.solve(l, opt.tolerance, opt.max_sweeps, nullptr);
    }
  } else {
    chosen = *opt.fixed_lambda;
    if (chosen < lmax) {
      for (double l : lambda_grid(lmax, 20, std::max(chosen / lmax, 1e-8))) {
        if (l <= chosen) break;
        solver.solve(l, opt.tolerance, opt.max_sweeps, nullptr);
      }
    }
  }
  solver.solve(chosen, opt.tolerance, opt.max_sweeps, opt.objective_trace);
  fit.lambda = chosen;
  const Vector beta = solver.coefficients();
  for (std::size_t k = 0; k < kept.size(); ++k) {
    fit.coefficients(kept[k]) = beta(static_cast<Eigen::Index>(k));
    if (beta(static_cast<Eigen::Index>(k)) != 0.0) fit.support.push_back(kept[k]);
  }
  return fit;
}

// Largest KKT violation of a lasso fit, measured on the standardized scale.
inline double lasso_kkt_residual(const Matrix& design, const Vector& response, const Vector& weights,
                                 const LassoFit& fit, const LassoOptions& opt = {}) {
  const auto pf = detail::penalty_factors(design.cols(), opt.unpenalized);
  const double sw = weights.sum();
  const Vector resid = response - design * fit.coefficients;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < design.cols(); ++j) {
    if (std::find(fit.dropped_columns.begin(), fit.dropped_columns.end(), j) != fit.dropped_columns.end()) continue;
    const double m2 = (weights.array() * design.col(j).array().square()).sum() / sw;
    if (m2 <= 0) continue;
    const double s = std::sqrt(m2);
    const double grad = (weights.array() * design.col(j).array() * resid.array()).sum() / (sw * s);
    const double bstd = fit.coefficients(j) * s;
    const double pen = fit.lambda * pf[static_cast<std::size_t>(j)];
    double v;
    if (bstd != 0.0) v = std::abs(grad - pen * (bstd > 0 ? 1.0 : -1.0));
    else v = std::max(0.0, std::abs(grad) - pen);
    worst = std::max(worst, v);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Relaxed (unpenalized) weighted least squares on a column subset.
// ---------------------------------------------------------------------------

struct RelaxedFit {
  IndexVector retained;      // design column indices actually used
  Vector coefficients;       // aligned with `retained`
  Matrix gram_inverse;       // ((1/n) X_R' W X_R)^{-1}
  IndexVector dropped_columns;

  [[nodiscard]] Vector full_coefficients(Eigen::Index p) const {
    Vector out = Vector::Zero(p);
    for (std::size_t k = 0; k < retained.size(); ++k) out(retained[k]) = coefficients(static_cast<Eigen::Index>(k));
    return out;
  }
};

inline constexpr double kCollinearityThreshold = 1e-10;

inline RelaxedFit relaxed_ols(const Matrix& design, const Vector& response, const Vector& weights,
                              const IndexVector& support) {
  detail::check_finite(design, response, weights);
  RelaxedFit fit;
  if (support.empty()) return fit;
  const auto n = static_cast<double>(design.rows());
  const auto m = static_cast<Eigen::Index>(support.size());
  Matrix xs(design.rows(), m);
  for (Eigen::Index k = 0; k < m; ++k) xs.col(k) = design.col(support[static_cast<std::size_t>(k)]);
  const Vector sqw = weights.array().sqrt();
  Matrix xw = xs.array().colwise() * sqw.array();
  const Matrix gram = xw.transpose() * xw / n;

  // In-order elimination: a column is kept when its residual pivot, after
  // projecting out the columns kept before it, is not negligible.
  const double leading = gram.diagonal().maxCoeff();
  Matrix l = Matrix::Zero(m, m);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index k = 0; k < m; ++k) {
    Vector row(static_cast<Eigen::Index>(kept.size()));
    for (std::size_t a = 0; a < kept.size(); ++a) {
      double s = gram(k, kept[a]);
      for (std::size_t b = 0; b < a; ++b) s -= row(static_cast<Eigen::Index>(b)) * l(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      row(static_cast<Eigen::Index>(a)) = s / l(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a));
    }
    const double pivot = gram(k, k) - row.squaredNorm();
    if (leading <= 0 || pivot <= kCollinearityThreshold * leading) {
      fit.dropped_columns.push_back(support[static_cast<std::size_t>(k)]);
      continue;
    }
    const auto r = static_cast<Eigen::Index>(kept.size());
    l.row(r).head(r) = row.transpose();
    l(r, r) = std::sqrt(pivot);
    kept.push_back(k);
  }
  const auto r = static_cast<Eigen::Index>(kept.size());
  if (r == 0) return fit;
  Matrix xr(design.rows(), r);
  for (Eigen::Index k = 0; k < r; ++k) {
    xr.col(k) = xw.col(kept[static_cast<std::size_t>(k)]);
    fit.retained.push_back(support[static_cast<std::size_t>(kept[static_cast<std::size_t>(k)])]);
  }
  const Vector yw = sqw.array() * response.array();
  Eigen::HouseholderQR<Matrix> qr(xr);
  Vector beta = qr.solve(yw);
  const Vector resid = yw - xr * beta;
  beta += qr.solve(resid);
  fit.coefficients = beta;
  const Matrix rmat = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  const Matrix rinv = rmat.triangularView<Eigen::Upper>().solve(Matrix::Identity(r, r));
  fit.gram_inverse = n * rinv * rinv.transpose();
  return fit;
}

// ---------------------------------------------------------------------------
// Logistic regression by IRLS (Newton) with optional offset and weights.
// ---------------------------------------------------------------------------

inline constexpr double kSolverProbabilityClip = 1e-6;

struct LogisticOptions {
  int max_iterations = 100;
  double score_tolerance = 1e-8;
};

struct LogisticFit {
  Vector coefficients;
  bool converged = false;
  bool separation = false;
  bool offset_supported = true;
  int iterations = 0;
  double score_residual = 0.0;  // sup-norm of the mean score at the solution

  [[nodiscard]] Vector predict(const Matrix& x, const Vector* offset = nullptr) const {
    Vector eta = x * coefficients;
    if (offset) eta += *offset;
    Vector p(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      p(i) = clip(expit(eta(i)), kSolverProbabilityClip, 1.0 - kSolverProbabilityClip);
    }
    return p;
  }
};

inline LogisticFit logistic_irls(const Matrix& x, const Vector& labels, const Vector* offset = nullptr,
                                 const Vector* weights = nullptr, const LogisticOptions& opt = {}) {
  const auto n = x.rows();
  const auto p = x.cols();
  if (!x.allFinite()) throw ValidationError("non-finite design");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels(i) != 0.0 && labels(i) != 1.0) throw ValidationError("labels must be binary");
  }
  const Vector w = weights ? *weights : Vector::Ones(n);
  const Vector off = offset ? *offset : Vector::Zero(n);
  const double sw = static_cast<double>(n);
  LogisticFit fit;
  fit.coefficients = Vector::Zero(p);
  auto loglik = [&](const Vector& beta) {
    const Vector eta = x * beta + off;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = eta(i);
      // log(1 + exp(e)) evaluated stably
      const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      ll += w(i) * (labels(i) * e - log1pexp);
    }
    return ll;
  };
  double ll = loglik(fit.coefficients);
  for (int it = 0; it <= opt.max_iterations; ++it) {
    const Vector eta = x * fit.coefficients + off;
    Vector mu(n), v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu(i) = expit(eta(i));
      v(i) = w(i) * mu(i) * (1.0 - mu(i));
    }
    const Vector score = x.transpose() * (w.array() * (labels - mu).array()).matrix() / sw;
    fit.score_residual = p > 0 ? score.cwiseAbs().maxCoeff() : 0.0;
    fit.iterations = it;
    if (eta.size() > 0 && eta.cwiseAbs().maxCoeff() > 30.0) {
      fit.separation = true;
      break;
    }
    if (fit.score_residual < opt.score_tolerance) {
      fit.converged = true;
      break;
    }
    if (it == opt.max_iterations) break;
    Matrix xv = x.array().colwise() * v.array().sqrt();
    Matrix h = xv.transpose() * xv / sw;
    h.diagonal().array() += 1e-14 * (1.0 + h.diagonal().array());
    const Vector step = h.ldlt().solve(score);
    double t = 1.0;
    Vector next = fit.coefficients + step;
    double ll_next = loglik(next);
    for (int halving = 0; halving < 40 && !(ll_next >= ll - 1e-12 * (1.0 + std::abs(ll))); ++halving) {
      t *= 0.5;
      next = fit.coefficients + t * step;
      ll_next = loglik(next);
    }
    fit.coefficients = next;
    ll = ll_next;
  }
  if (fit.separation) fit.converged = false;
  return fit;
}

// ---------------------------------------------------------------------------
// L1-penalized logistic regression along a decreasing lambda path
// (proximal Newton, Gram-based inner solver). Used by the HAL-GLM learner.
// ---------------------------------------------------------------------------

inline std::vector<Vector> logistic_lasso_path(const Matrix& x, const Vector& labels, const Vector& weights,
                                               const std::vector<double>& lambdas, const IndexVector& unpenalized,
                                               double tol = 1e-8, int max_newton = 25) {
  const auto n = x.rows();
  const auto p = x.cols();
  const auto pf = detail::penalty_factors(p, unpenalized);
  const double sw = weights.sum();
  Vector scale(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double m2 = (weights.array() * x.col(j).array().square()).sum() / sw;
    scale(j) = m2 > 0 ? std::sqrt(m2) : 0.0;
  }
  Matrix xs(n, p);
  for (Eigen::Index j = 0; j < p; ++j) xs.col(j) = scale(j) > 0 ? Vector(x.col(j) / scale(j)) : Vector::Zero(n);
  Vector b = Vector::Zero(p);
  std::vector<Vector> path;
  for (double lambda : lambdas) {
    for (int it = 0; it < max_newton; ++it) {
      const Vector eta = xs * b;
      Vector v(n), z(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = clip(expit(eta(i)), 1e-9, 1 - 1e-9);
        const double var = mu * (1 - mu);
        v(i) = weights(i) * var;
        z(i) = eta(i) + (labels(i) - mu) / var;
      }
      // Quadratic approximation (1/2sw) sum v (z - xs b)^2 + lambda |b|.
      const Vector sqv = v.array().sqrt();
      Matrix xv = xs.array().colwise() * sqv.array();
      Matrix g = Matrix::Zero(p, p);
      g.selfadjointView<Eigen::Lower>().rankUpdate(xv.transpose());
      g = g.selfadjointView<Eigen::Lower>();
      g /= sw;
      const Vector c = xs.transpose() * (v.array() * z.array()).matrix() / sw;
      Vector grad = c - g * b;
      const Vector b_old = b;
      for (int sweep = 0; sweep < 1000; ++sweep) {
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
          if (scale(j) == 0 || g(j, j) <= 0) continue;
          const double zj = grad(j) + g(j, j) * b(j);
          const double pen = pf[static_cast<std::size_t>(j)] * (std::isfinite(lambda) ? lambda : 1e300);
          const double nb = pf[static_cast<std::size_t>(j)] == 0 ? zj / g(j, j)
                                                                    : detail::soft_threshold(zj, pen) / g(j, j);
          const double d = nb - b(j);
          if (d != 0) {
            grad -= g.col(j) * d;
            b(j) = nb;
            max_change = std::max(max_change, std::abs(d) * std::sqrt(g(j, j)));
          }
        }
        if (max_change < tol) break;
      }
      if ((b - b_old).cwiseAbs().maxCoeff() < 1e-6) break;
    }
    Vector orig = Vector::Zero(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      if (scale(j) > 0) orig(j) = b(j) / scale(j);
    }
    path.push_back(orig);
  }
  return path;
}

// Lambda at which all penalized logistic coefficients vanish.
inline double logistic_lambda_max(const Matrix& x, const Vector& labels, const Vector& weights,
                                  const IndexVector& unpenalized) {
  const auto p = x.cols();
  const auto pf = detail::penalty_factors(p, unpenalized);
  Matrix xu(x.rows(), static_cast<Eigen::Index>(unpenalized.size()));
  for (std::size_t k = 0; k < unpenalized.size(); ++k) xu.col(static_cast<Eigen::Index>(k)) = x.col(unpenalized[k]);
  const auto base = logistic_irls(xu, labels, nullptr, &weights);
  const Vector mu = base.predict(xu);
  const double sw = weights.sum();
  double lm = 0.0;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (pf[static_cast<std::size_t>(j)] == 0) continue;
    const double m2 = (weights.array() * x.col(j).array().square()).sum() / sw;
    if (m2 <= 0) continue;
    const double g = (weights.array() * x.col(j).array() * (labels - mu).array()).sum() / (sw * std::sqrt(m2));
    lm = std::max(lm, std::abs(g));
  }
  return lm;
}

inline nlohmann::json to_json(const LassoFit& f) {
  nlohmann::json path = nlohmann::json::array();
  for (const auto& [l, r] : f.cv_risk_path) path.push_back({l, r});
  return {{"lambda", f.lambda}, {"support", f.support}, {"selected_index", f.selected_index}, {"cv_risk_path", path}};
}

inline nlohmann::json to_json(const RelaxedFit& f) {
  return {{"retained", f.retained},
          {"coefficients", std::vector<double>(f.coefficients.data(), f.coefficients.data() + f.coefficients.size())},
          {"dropped_columns", f.dropped_columns}};
}

}  // namespace atmle
