#pragma once

#include "atmle/core.hpp"
#include "atmle/working_model.hpp"

#include <map>
#include <string>

namespace atmle {

// Row-level gradient pieces. `ipcw` is Delta / P(Delta = 1 | ...); rows with
// ipcw == 0 contribute no outcome residual, so a missing y is never read.

// Gradient of the trial-anchored ATE E[Q(1,W,1) - Q(1,W,0)].
inline double d_psi(int s, int a, double y, double q1_a1, double q1_a0, double g_trial_a, double pi_bar, double psi,
                    double ipcw = 1.0) {
  double out = q1_a1 - q1_a0 - psi;
  if (s == 1 && ipcw != 0.0) {
    const double q = a == 1 ? q1_a1 : q1_a0;
    out += ipcw * (2.0 * a - 1.0) / (pi_bar * g_trial_a) * (y - q);
  }
  return out;
}

// Gradient of the ATE over the trial population E[Q(1,W,1) - Q(1,W,0) | S=1].
inline double d_psi2(int s, int a, double y, double q1_a1, double q1_a0, double g_trial_a, double p_s1, double psi2,
                     double ipcw = 1.0) {
  if (s != 1) return 0.0;
  double out = (q1_a1 - q1_a0 - psi2) / p_s1;
  if (ipcw != 0.0) {
    const double q = a == 1 ? q1_a1 : q1_a0;
    out += ipcw * (2.0 * a - 1.0) / (p_s1 * g_trial_a) * (y - q);
  }
  return out;
}

// Coefficient of (S - Pi(1|W,A)) in the bias-projection gradient, evaluated at
// treatment value `a`. Also the fluctuation direction used to target Pi.
inline double sharp_clever_covariate(int a, double g1, double tau_w1, double tau_w0) {
  const double c = a == 1 ? tau_w1 / g1 : -tau_w0 / (1.0 - g1);
#ifdef ATMLE_MUTATE_SHARP_PI_SIGN
  return -c;
#else
  return c;
#endif
}

inline double sharp_w_component(double pi0_a0, double pi0_a1, double tau_w0, double tau_w1, double psi_sharp) {
  return pi0_a0 * tau_w0 - pi0_a1 * tau_w1 - psi_sharp;
}

inline double sharp_pi_component(int s, int a, double g1, double tau_w1, double tau_w0, double pi1_at_a) {
  return sharp_clever_covariate(a, g1, tau_w1, tau_w0) * (s - pi1_at_a);
}

// sum_j D_beta,j * m_j with D_beta = I^{-1} score.
inline double beta_component(const Vector& score, const Matrix& gram_inverse, const Vector& m) {
  return score.dot(gram_inverse * m);
}

struct InfluenceVectors {
  Vector d_pooled;
  Vector d_sharp;
  Vector d_total;
  std::map<std::string, Vector> components;
};

// Gradient of the pooled-ATE projection on `rows`:
// tau(W) - psi~ + sum_j D^r_j * basis_means_j.
inline Vector d_pooled_projection(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows,
                                  double psi_tilde, const Vector& basis_means) {
  const Vector tau = m.predict_rows(td.phi);
  const Matrix scores = score_rows(td, m, rows);
  const Vector proj = m.design_columns.empty() ? Vector() : Vector(m.gram_inverse * basis_means);
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    out(kk) = tau(rows[k]) - psi_tilde + (proj.size() ? scores.row(kk).dot(proj) : 0.0);
  }
  return out;
}

// Empirical means over `rows` of the retained basis columns.
inline Vector basis_means(const Matrix& phi, const WorkingModel& m, const IndexVector& rows, const Vector* weight = nullptr) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(m.design_columns.size()));
  for (int i : rows) {
    const double wt = weight ? (*weight)(i) : 1.0;
    for (std::size_t c = 0; c < m.design_columns.size(); ++c) out(static_cast<Eigen::Index>(c)) += wt * phi(i, m.design_columns[c]);
  }
  return rows.empty() ? out : Vector(out / static_cast<double>(rows.size()));
}

inline Vector d_pooled_projection(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows,
                                  double psi_tilde) {
  return d_pooled_projection(td, m, rows, psi_tilde, basis_means(td.phi, m, rows));
}

struct SharpGradient {
  Vector w_part, pi_part, beta_part, total;
};

// Gradient of the bias projection on `rows`. `pi1_a0`/`pi1_a1` hold the
// (targeted) P(S=1|W,a) for every row; the beta part uses the scores of the
// transformed design, which carries the Pi that the relaxed fit used.
inline SharpGradient d_sharp_projection(const TransformedDesign& td, const WorkingModel& m, const IndexVector& rows,
                                        const std::vector<int>& s, const std::vector<int>& a, const Vector& g1,
                                        const Vector& pi1_a0, const Vector& pi1_a1, double psi_sharp) {
  const Vector tau0 = m.predict_rows(td.phi_a0);
  const Vector tau1 = m.predict_rows(td.phi_a1);
  const Vector pi0_a0 = Vector::Ones(pi1_a0.size()) - pi1_a0;
  const Vector pi0_a1 = Vector::Ones(pi1_a1.size()) - pi1_a1;
  const Vector m0 = basis_means(td.phi_a0, m, rows, &pi0_a0);
  const Vector m1 = basis_means(td.phi_a1, m, rows, &pi0_a1);
  const Matrix scores = score_rows(td, m, rows);
  const Vector proj = m.design_columns.empty() ? Vector() : Vector(m.gram_inverse * (m0 - m1));
  const auto nr = static_cast<Eigen::Index>(rows.size());
  SharpGradient out{Vector(nr), Vector(nr), Vector(nr), Vector(nr)};
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int i = rows[k];
    const auto kk = static_cast<Eigen::Index>(k);
    const auto ii = static_cast<std::size_t>(i);
    out.w_part(kk) = sharp_w_component(pi0_a0(i), pi0_a1(i), tau0(i), tau1(i), psi_sharp);
    const double pi_at_a = a[ii] == 1 ? pi1_a1(i) : pi1_a0(i);
    out.pi_part(kk) = sharp_pi_component(s[ii], a[ii], g1(i), tau1(i), tau0(i), pi_at_a);
    out.beta_part(kk) = proj.size() ? scores.row(kk).dot(proj) : 0.0;
    out.total(kk) = out.w_part(kk) + out.pi_part(kk) + out.beta_part(kk);
  }
  return out;
}

}  // namespace atmle
