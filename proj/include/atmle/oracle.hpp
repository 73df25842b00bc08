#pragma once

#include "atmle/core.hpp"
#include "atmle/eif.hpp"
#include "atmle/hal_basis.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace atmle::oracle {

// One support point (s, w, a, y) with its probability; w indexes `w_points`.
struct Atom {
  int s = 0;
  int w = 0;
  int a = 0;
  double y = 0.0;
  double p = 0.0;
};

struct DiscreteDistribution {
  Matrix w_points;  // one row per covariate value
  std::vector<Atom> atoms;

  [[nodiscard]] int k() const { return static_cast<int>(w_points.rows()); }

  // P_eps = (1 + eps * h) P along a bounded direction h (one entry per atom).
  [[nodiscard]] DiscreteDistribution perturbed(const Vector& h, double eps) const {
    if (h.size() != static_cast<Eigen::Index>(atoms.size())) throw ValidationError("direction length mismatch");
    DiscreteDistribution out = *this;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      out.atoms[i].p *= 1.0 + eps * h(static_cast<Eigen::Index>(i));
      if (!(out.atoms[i].p > 0.0)) throw ValidationError("perturbed distribution is not valid");
    }
    return out;
  }
};

// Conditional quantities of a discrete distribution, by exact enumeration.
struct Factors {
  int k = 0;
  std::vector<double> pw;          // P(W=w)
  std::vector<double> mass[2][2];  // P(S=s, W=w, A=a)
  std::vector<double> q[2][2];     // E(Y | S=s, W=w, A=a)
  std::vector<double> p_s1_w;      // P(S=1 | W)
  std::vector<double> g_trial;     // P(A=1 | S=1, W)
  std::vector<double> g;           // P(A=1 | W)
  std::vector<double> qbar[2];     // E(Y | W, A=a)
  std::vector<double> theta;       // E(Y | W)
  std::vector<double> pi1[2];      // P(S=1 | W, A=a)
  double p_s1 = 0.0;

  [[nodiscard]] double tau_s(int w, int a) const {
    const auto ww = static_cast<std::size_t>(w);
    return mass[0][a][ww] > 0 ? q[1][a][ww] - q[0][a][ww] : 0.0;
  }
};

inline Factors factors(const DiscreteDistribution& d) {
  Factors f;
  f.k = d.k();
  const auto k = static_cast<std::size_t>(f.k);
  f.pw.assign(k, 0.0);
  std::vector<double> ysum[2][2];
  for (int s = 0; s < 2; ++s) {
    for (int a = 0; a < 2; ++a) {
      f.mass[s][a].assign(k, 0.0);
      f.q[s][a].assign(k, 0.0);
      ysum[s][a].assign(k, 0.0);
    }
  }
  double total = 0.0;
  for (const auto& at : d.atoms) {
    const auto w = static_cast<std::size_t>(at.w);
    f.pw[w] += at.p;
    f.mass[at.s][at.a][w] += at.p;
    ysum[at.s][at.a][w] += at.p * at.y;
    total += at.p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("probabilities do not sum to one");
  f.p_s1_w.assign(k, 0.0);
  f.g_trial.assign(k, 0.0);
  f.g.assign(k, 0.0);
  f.theta.assign(k, 0.0);
  for (int a = 0; a < 2; ++a) {
    f.qbar[a].assign(k, 0.0);
    f.pi1[a].assign(k, 0.0);
  }
  for (std::size_t w = 0; w < k; ++w) {
    if (f.mass[1][0][w] <= 0 || f.mass[1][1][w] <= 0) throw ValidationError("trial arm without mass at some w");
    double yw = 0.0;
    for (int s = 0; s < 2; ++s) {
      for (int a = 0; a < 2; ++a) {
        if (f.mass[s][a][w] > 0) f.q[s][a][w] = ysum[s][a][w] / f.mass[s][a][w];
        yw += ysum[s][a][w];
      }
    }
    const double trial = f.mass[1][0][w] + f.mass[1][1][w];
    f.p_s1_w[w] = trial / f.pw[w];
    f.g_trial[w] = f.mass[1][1][w] / trial;
    const double treated = f.mass[0][1][w] + f.mass[1][1][w];
    f.g[w] = treated / f.pw[w];
    f.theta[w] = yw / f.pw[w];
    for (int a = 0; a < 2; ++a) {
      const double m = f.mass[0][a][w] + f.mass[1][a][w];
      f.qbar[a][w] = (ysum[0][a][w] + ysum[1][a][w]) / m;
      f.pi1[a][w] = f.mass[1][a][w] / m;
    }
    f.p_s1 += trial;
  }
  return f;
}

inline double exact_psi(const DiscreteDistribution& d) {
  const auto f = factors(d);
  double out = 0.0;
  for (std::size_t w = 0; w < static_cast<std::size_t>(f.k); ++w) out += f.pw[w] * (f.q[1][1][w] - f.q[1][0][w]);
  return out;
}

// Same estimand as a single pass over atoms with inverse weights.
inline double exact_psi_weighted(const DiscreteDistribution& d) {
  const auto f = factors(d);
  double out = 0.0;
  for (const auto& at : d.atoms) {
    if (at.s != 1) continue;
    const auto w = static_cast<std::size_t>(at.w);
    const double g_a = at.a == 1 ? f.g_trial[w] : 1.0 - f.g_trial[w];
    out += at.p * (2.0 * at.a - 1.0) * at.y / (f.p_s1_w[w] * g_a);
  }
  return out;
}

inline double exact_psi2(const DiscreteDistribution& d) {
  const auto f = factors(d);
  double out = 0.0;
  for (std::size_t w = 0; w < static_cast<std::size_t>(f.k); ++w) {
    out += (f.mass[1][0][w] + f.mass[1][1][w]) * (f.q[1][1][w] - f.q[1][0][w]);
  }
  return out / f.p_s1;
}

inline double exact_psi_tilde(const DiscreteDistribution& d) {
  const auto f = factors(d);
  double out = 0.0;
  for (std::size_t w = 0; w < static_cast<std::size_t>(f.k); ++w) out += f.pw[w] * (f.qbar[1][w] - f.qbar[0][w]);
  return out;
}

// Bias as the difference of the pooled and trial-anchored effects.
inline double exact_psi_sharp(const DiscreteDistribution& d) { return exact_psi_tilde(d) - exact_psi(d); }

// Bias as the enrollment-probability weighted average of tau_S over arms.
inline double exact_psi_sharp_weighted(const DiscreteDistribution& d) {
  const auto f = factors(d);
  double out = 0.0;
  for (int w = 0; w < f.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    out += f.pw[ww] * ((1.0 - f.pi1[0][ww]) * f.tau_s(w, 0) - (1.0 - f.pi1[1][ww]) * f.tau_s(w, 1));
  }
  return out;
}

enum class Target { kTauA, kTauS };

inline Vector basis_at(const BasisSet& basis, const DiscreteDistribution& d, int w, int a) {
  const Vector wv = d.w_points.row(w).transpose();
  return basis.domain == BasisDomain::kWA ? evaluate_basis(basis, wv, a) : evaluate_basis(basis, wv);
}

struct ProjectionResult {
  Vector weighted;      // weighted L2 projection of the effect function
  Vector conditional;   // regression of the conditional mean on the transformed design
  Vector outcome;       // regression of Y on the transformed design
  [[nodiscard]] double discrepancy() const {
    return std::max((weighted - conditional).cwiseAbs().maxCoeff(), (weighted - outcome).cwiseAbs().maxCoeff());
  }
};

namespace detail {

inline Vector solve_normal(const Matrix& gram, const Vector& rhs) {
  Eigen::ColPivHouseholderQR<Matrix> qr(gram);
  if (qr.rank() < gram.rows()) throw ValidationError("basis is not identifiable under this distribution");
  return qr.solve(rhs);
}

// Residualized indicator (A - g or S - Pi) of an atom and its conditional mean.
inline double residual_factor(const Factors& f, const Atom& at, Target t) {
  const auto w = static_cast<std::size_t>(at.w);
  return t == Target::kTauA ? at.a - f.g[w] : at.s - f.pi1[at.a][w];
}

}  // namespace detail

inline ProjectionResult exact_projection_beta(const DiscreteDistribution& d, const BasisSet& basis, Target t) {
  const auto f = factors(d);
  const auto p = static_cast<Eigen::Index>(basis.size());
  Matrix g1 = Matrix::Zero(p, p);
  Vector r1 = Vector::Zero(p);
  if (t == Target::kTauA) {
    for (int w = 0; w < f.k; ++w) {
      const auto ww = static_cast<std::size_t>(w);
      const Vector phi = basis_at(basis, d, w, 0);
      const double wt = f.pw[ww] * f.g[ww] * (1.0 - f.g[ww]);
      g1 += wt * phi * phi.transpose();
      r1 += wt * (f.qbar[1][ww] - f.qbar[0][ww]) * phi;
    }
  } else {
    for (int w = 0; w < f.k; ++w) {
      const auto ww = static_cast<std::size_t>(w);
      for (int a = 0; a < 2; ++a) {
        const double pwa = f.mass[0][a][ww] + f.mass[1][a][ww];
        const double wt = pwa * f.pi1[a][ww] * (1.0 - f.pi1[a][ww]);
        if (wt == 0.0) continue;
        const Vector phi = basis_at(basis, d, w, a);
        g1 += wt * phi * phi.transpose();
        r1 += wt * f.tau_s(w, a) * phi;
      }
    }
  }
  Matrix g2 = Matrix::Zero(p, p), g3 = Matrix::Zero(p, p);
  Vector r2 = Vector::Zero(p), r3 = Vector::Zero(p);
  for (const auto& at : d.atoms) {
    const auto w = static_cast<std::size_t>(at.w);
    const Vector phi = basis_at(basis, d, at.w, at.a);
    const double fac = detail::residual_factor(f, at, t);
    const Vector x = fac * phi;
    const double cond = t == Target::kTauA ? f.qbar[at.a][w] : f.q[at.s][at.a][w];
    g2 += at.p * x * x.transpose();
    r2 += at.p * cond * x;
    g3 += at.p * x * x.transpose();
    r3 += at.p * at.y * x;
  }
  return {detail::solve_normal(g1, r1), detail::solve_normal(g2, r2), detail::solve_normal(g3, r3)};
}

inline double tau_beta(const BasisSet& basis, const Vector& beta, const DiscreteDistribution& d, int w, int a) {
  return basis_at(basis, d, w, a).dot(beta);
}

inline double psi_tilde_projection(const DiscreteDistribution& d, const BasisSet& basis) {
  const auto f = factors(d);
  const Vector beta = exact_projection_beta(d, basis, Target::kTauA).weighted;
  double out = 0.0;
  for (int w = 0; w < f.k; ++w) out += f.pw[static_cast<std::size_t>(w)] * tau_beta(basis, beta, d, w, 0);
  return out;
}

inline double psi_sharp_projection(const DiscreteDistribution& d, const BasisSet& basis) {
  const auto f = factors(d);
  const Vector beta = exact_projection_beta(d, basis, Target::kTauS).weighted;
  double out = 0.0;
  for (int w = 0; w < f.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    out += f.pw[ww] * ((1.0 - f.pi1[0][ww]) * tau_beta(basis, beta, d, w, 0) -
                       (1.0 - f.pi1[1][ww]) * tau_beta(basis, beta, d, w, 1));
  }
  return out;
}

// Bias projection with its three ingredients taken from separate laws: the
// covariate marginal from `dw`, Pi from `dpi` and the working-model
// coefficients from `dbeta`. Perturbing one law at a time isolates one
// gradient component.
inline double psi_sharp_projection_parts(const DiscreteDistribution& dw, const DiscreteDistribution& dpi,
                                         const DiscreteDistribution& dbeta, const BasisSet& basis) {
  const auto fw = factors(dw);
  const auto fp = factors(dpi);
  const Vector beta = exact_projection_beta(dbeta, basis, Target::kTauS).weighted;
  double out = 0.0;
  for (int w = 0; w < fw.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    out += fw.pw[ww] * ((1.0 - fp.pi1[0][ww]) * tau_beta(basis, beta, dw, w, 0) -
                        (1.0 - fp.pi1[1][ww]) * tau_beta(basis, beta, dw, w, 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients evaluated at every atom with the row-level formulas of eif.hpp.
// ---------------------------------------------------------------------------

inline Vector gradient_psi(const DiscreteDistribution& d) {
  const auto f = factors(d);
  const double psi = exact_psi(d);
  Vector out(static_cast<Eigen::Index>(d.atoms.size()));
  for (std::size_t i = 0; i < d.atoms.size(); ++i) {
    const auto& at = d.atoms[i];
    const auto w = static_cast<std::size_t>(at.w);
    const double g_a = at.a == 1 ? f.g_trial[w] : 1.0 - f.g_trial[w];
    out(static_cast<Eigen::Index>(i)) = d_psi(at.s, at.a, at.y, f.q[1][1][w], f.q[1][0][w], g_a, f.p_s1_w[w], psi);
  }
  return out;
}

inline Vector gradient_psi2(const DiscreteDistribution& d) {
  const auto f = factors(d);
  const double psi2 = exact_psi2(d);
  Vector out(static_cast<Eigen::Index>(d.atoms.size()));
  for (std::size_t i = 0; i < d.atoms.size(); ++i) {
    const auto& at = d.atoms[i];
    const auto w = static_cast<std::size_t>(at.w);
    const double g_a = at.a == 1 ? f.g_trial[w] : 1.0 - f.g_trial[w];
    out(static_cast<Eigen::Index>(i)) = d_psi2(at.s, at.a, at.y, f.q[1][1][w], f.q[1][0][w], g_a, f.p_s1, psi2);
  }
  return out;
}

inline Vector gradient_psi_tilde_projection(const DiscreteDistribution& d, const BasisSet& basis) {
  const auto f = factors(d);
  const Vector beta = exact_projection_beta(d, basis, Target::kTauA).weighted;
  const auto p = static_cast<Eigen::Index>(basis.size());
  Matrix info = Matrix::Zero(p, p);
  Vector means = Vector::Zero(p);
  double psi = 0.0;
  for (int w = 0; w < f.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    const Vector phi = basis_at(basis, d, w, 0);
    info += f.pw[ww] * f.g[ww] * (1.0 - f.g[ww]) * phi * phi.transpose();
    means += f.pw[ww] * phi;
    psi += f.pw[ww] * phi.dot(beta);
  }
  const Matrix info_inv = info.inverse();
  Vector out(static_cast<Eigen::Index>(d.atoms.size()));
  for (std::size_t i = 0; i < d.atoms.size(); ++i) {
    const auto& at = d.atoms[i];
    const auto w = static_cast<std::size_t>(at.w);
    const Vector phi = basis_at(basis, d, at.w, 0);
    const double tau = phi.dot(beta);
    const double fac = at.a - f.g[w];
    const Vector score = fac * phi * (at.y - f.theta[w] - fac * tau);
    out(static_cast<Eigen::Index>(i)) = tau - psi + beta_component(score, info_inv, means);
  }
  return out;
}

struct SharpGradientAtoms {
  Vector w_part, pi_part, beta_part;
  [[nodiscard]] Vector total() const { return w_part + pi_part + beta_part; }
};

inline SharpGradientAtoms gradient_psi_sharp_projection(const DiscreteDistribution& d, const BasisSet& basis) {
  const auto f = factors(d);
  const Vector beta = exact_projection_beta(d, basis, Target::kTauS).weighted;
  const auto p = static_cast<Eigen::Index>(basis.size());
  Matrix info = Matrix::Zero(p, p);
  Vector m = Vector::Zero(p);
  double psi = 0.0;
  for (int w = 0; w < f.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    const Vector phi0 = basis_at(basis, d, w, 0), phi1 = basis_at(basis, d, w, 1);
    m += f.pw[ww] * ((1.0 - f.pi1[0][ww]) * phi0 - (1.0 - f.pi1[1][ww]) * phi1);
    psi += f.pw[ww] * ((1.0 - f.pi1[0][ww]) * phi0.dot(beta) - (1.0 - f.pi1[1][ww]) * phi1.dot(beta));
  }
  for (const auto& at : d.atoms) {
    const auto w = static_cast<std::size_t>(at.w);
    const Vector phi = basis_at(basis, d, at.w, at.a);
    const double fac = at.s - f.pi1[at.a][w];
    info += at.p * fac * fac * phi * phi.transpose();
  }
  const Matrix info_inv = info.inverse();
  const auto na = static_cast<Eigen::Index>(d.atoms.size());
  SharpGradientAtoms out{Vector(na), Vector(na), Vector(na)};
  for (std::size_t i = 0; i < d.atoms.size(); ++i) {
    const auto& at = d.atoms[i];
    const auto w = static_cast<std::size_t>(at.w);
    const auto ii = static_cast<Eigen::Index>(i);
    const double tau0 = tau_beta(basis, beta, d, at.w, 0), tau1 = tau_beta(basis, beta, d, at.w, 1);
    out.w_part(ii) = sharp_w_component(1.0 - f.pi1[0][w], 1.0 - f.pi1[1][w], tau0, tau1, psi);
    out.pi_part(ii) = sharp_pi_component(at.s, at.a, f.g[w], tau1, tau0, f.pi1[at.a][w]);
    const Vector phi = basis_at(basis, d, at.w, at.a);
    const double fac = at.s - f.pi1[at.a][w];
    const double tau = at.a == 1 ? tau1 : tau0;
    const Vector score = fac * phi * (at.y - f.qbar[at.a][w] - fac * tau);
    out.beta_part(ii) = beta_component(score, info_inv, m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pathwise derivative checks along P_eps = (1 + eps h) P.
// ---------------------------------------------------------------------------

using Functional = std::function<double(const DiscreteDistribution&)>;

inline double expectation(const DiscreteDistribution& d, const Vector& v) {
  double out = 0.0;
  for (std::size_t i = 0; i < d.atoms.size(); ++i) out += d.atoms[i].p * v(static_cast<Eigen::Index>(i));
  return out;
}

struct PathwiseResult {
  double finite_difference = 0.0;
  double inner_product = 0.0;
  [[nodiscard]] double discrepancy() const { return std::abs(finite_difference - inner_product); }
};

// Central difference at step h refined by one Richardson extrapolation.
inline PathwiseResult pathwise_check(const DiscreteDistribution& d, const Functional& parameter, const Vector& gradient,
                                     const Vector& direction, double h = 1e-5) {
  if (direction.cwiseAbs().maxCoeff() * h >= 1.0) throw ValidationError("direction too large for the step");
  auto central = [&](double step) {
    return (parameter(d.perturbed(direction, step)) - parameter(d.perturbed(direction, -step))) / (2.0 * step);
  };
  PathwiseResult r;
  if (direction.cwiseAbs().maxCoeff() == 0.0) return r;
  r.finite_difference = (4.0 * central(h / 2.0) - central(h)) / 3.0;
  r.inner_product = expectation(d, gradient.cwiseProduct(direction));
  return r;
}

enum class Direction { kAny, kW, kA, kS, kY };

inline const char* to_string(Direction dir) {
  switch (dir) {
    case Direction::kAny: return "any";
    case Direction::kW: return "W";
    case Direction::kA: return "A|W";
    case Direction::kS: return "S|W,A";
    case Direction::kY: return "Y|S,W,A";
  }
  return "?";
}

// Random bounded score restricted to one factor of the likelihood: its
// conditional mean given the parents of that factor is zero.
template <class Rng>
Vector random_direction(const DiscreteDistribution& d, Direction dir, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto na = static_cast<Eigen::Index>(d.atoms.size());
  // key of the conditioning set and of the factor's own variable
  auto parent = [&](const Atom& at) -> long {
    switch (dir) {
      case Direction::kAny: return 0;
      case Direction::kW: return 0;
      case Direction::kA: return at.w;
      case Direction::kS: return (static_cast<long>(at.w) * 2 + at.a);
      case Direction::kY: return (static_cast<long>(at.w) * 2 + at.a) * 2 + at.s;
    }
    return 0;
  };
  auto own = [&](const Atom& at) -> long {
    switch (dir) {
      case Direction::kAny: return -1;
      case Direction::kW: return at.w;
      case Direction::kA: return at.w * 2 + at.a;
      case Direction::kS: return (static_cast<long>(at.w) * 2 + at.a) * 2 + at.s;
      case Direction::kY: return -1;
    }
    return -1;
  };
  std::map<long, double> value_of;
  Vector h(na);
  for (Eigen::Index i = 0; i < na; ++i) {
    const auto& at = d.atoms[static_cast<std::size_t>(i)];
    const long key = own(at);
    if (key < 0) {
      h(i) = u(rng);
    } else {
      auto it = value_of.find(key);
      if (it == value_of.end()) it = value_of.emplace(key, u(rng)).first;
      h(i) = it->second;
    }
  }
  std::map<long, std::pair<double, double>> cond;  // parent -> (sum p h, sum p)
  for (Eigen::Index i = 0; i < na; ++i) {
    const auto& at = d.atoms[static_cast<std::size_t>(i)];
    auto& c = cond[parent(at)];
    c.first += at.p * h(i);
    c.second += at.p;
  }
  for (Eigen::Index i = 0; i < na; ++i) {
    const auto& c = cond[parent(d.atoms[static_cast<std::size_t>(i)])];
    h(i) -= c.first / c.second;
  }
  const double scale = h.cwiseAbs().maxCoeff();
  if (scale > 0) h /= scale;
  return h;
}

struct RandomDistributionOptions {
  int dimension = 2;
  int points_per_dim = 2;
  int y_values = 3;
  bool external_controls_only = false;
};

template <class Rng>
DiscreteDistribution random_distribution(Rng& rng, const RandomDistributionOptions& opt = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DiscreteDistribution d;
  int k = 1;
  for (int j = 0; j < opt.dimension; ++j) k *= opt.points_per_dim;
  std::vector<std::vector<double>> grid(static_cast<std::size_t>(opt.dimension));
  for (auto& g : grid) {
    for (int m = 0; m < opt.points_per_dim; ++m) g.push_back(m + 0.25 + 0.5 * u(rng));
  }
  d.w_points.resize(k, opt.dimension);
  for (int r = 0; r < k; ++r) {
    int rem = r;
    for (int j = 0; j < opt.dimension; ++j) {
      d.w_points(r, j) = grid[static_cast<std::size_t>(j)][static_cast<std::size_t>(rem % opt.points_per_dim)];
      rem /= opt.points_per_dim;
    }
  }
  std::vector<double> ys;
  for (int m = 0; m < opt.y_values; ++m) ys.push_back(4.0 * u(rng) - 2.0);
  double total = 0.0;
  for (int s = 0; s < 2; ++s) {
    for (int w = 0; w < k; ++w) {
      for (int a = 0; a < 2; ++a) {
        if (opt.external_controls_only && s == 0 && a == 1) continue;
        for (double y : ys) {
          const double p = 0.2 + u(rng);
          d.atoms.push_back({s, w, a, y, p});
          total += p;
        }
      }
    }
  }
  for (auto& at : d.atoms) at.p /= total;
  return d;
}

// Greedy random subset of a candidate basis that stays identifiable under the
// weights implied by `target` (intercept always first).
template <class Rng>
BasisSet random_working_basis(const DiscreteDistribution& d, Target target, Rng& rng, int max_terms,
                              const BasisOptions& candidates_opt = {2, 4}) {
  const auto domain = target == Target::kTauA ? BasisDomain::kW : BasisDomain::kWA;
  const BasisSet all = generate_basis(d.w_points, domain, candidates_opt);
  std::vector<std::size_t> order;
  for (std::size_t j = 1; j < all.size(); ++j) order.push_back(j);
  std::shuffle(order.begin(), order.end(), rng);
  const auto f = factors(d);
  // rows of the weighted evaluation matrix: one per (w, a) with positive weight
  std::vector<std::pair<int, int>> cells;
  std::vector<double> weight;
  for (int w = 0; w < f.k; ++w) {
    const auto ww = static_cast<std::size_t>(w);
    if (target == Target::kTauA) {
      cells.emplace_back(w, 0);
      weight.push_back(f.pw[ww] * f.g[ww] * (1.0 - f.g[ww]));
    } else {
      for (int a = 0; a < 2; ++a) {
        const double wt = (f.mass[0][a][ww] + f.mass[1][a][ww]) * f.pi1[a][ww] * (1.0 - f.pi1[a][ww]);
        if (wt > 0) {
          cells.emplace_back(w, a);
          weight.push_back(wt);
        }
      }
    }
  }
  BasisSet out = BasisSet::intercept_only(domain, all.dimension);
  auto column = [&](const BasisFunction& fn) {
    Vector c(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t r = 0; r < cells.size(); ++r) {
      const Vector wv = d.w_points.row(cells[r].first).transpose();
      c(static_cast<Eigen::Index>(r)) = std::sqrt(weight[r]) * fn.evaluate(wv.data(), cells[r].second);
    }
    return c;
  };
  Matrix kept = column(out.functions[0]);
  for (std::size_t j : order) {
    if (static_cast<int>(out.size()) >= max_terms || kept.cols() >= kept.rows()) break;
    Matrix trial(kept.rows(), kept.cols() + 1);
    trial << kept, column(all.functions[j]);
    Eigen::JacobiSVD<Matrix> svd(trial);
    const auto sv = svd.singularValues();
    if (sv(sv.size() - 1) > 1e-3 * sv(0)) {
      kept = trial;
      out.functions.push_back(all.functions[j]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Randomized validation sweep.
// ---------------------------------------------------------------------------

struct Check {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  [[nodiscard]] bool passed() const { return value <= tolerance; }
};

struct SweepResult {
  std::vector<Check> checks;
  [[nodiscard]] bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed(); });
  }
  [[nodiscard]] double worst(const std::string& prefix) const {
    double w = 0.0;
    for (const auto& c : checks) {
      if (c.name.rfind(prefix, 0) == 0) w = std::max(w, c.value / c.tolerance);
    }
    return w;
  }
};

struct SweepOptions {
  int distributions = 50;
  int directions = 5;
  std::uint64_t seed = 1;
  bool identities = true;
  bool gradients = true;
};

inline SweepResult run_sweep(const SweepOptions& opt) {
  SweepResult res;
  std::mt19937_64 rng(opt.seed);
  const Direction dirs[] = {Direction::kAny, Direction::kW, Direction::kA, Direction::kS, Direction::kY};
  for (int t = 0; t < opt.distributions; ++t) {
    RandomDistributionOptions ro;
    ro.dimension = 1 + t % 2;
    ro.points_per_dim = 2 + (t / 2) % 2;
    ro.y_values = 2 + t % 3;
    ro.external_controls_only = t % 5 == 4;
    const auto d = random_distribution(rng, ro);
    const auto basis_a = random_working_basis(d, Target::kTauA, rng, 1 + t % 4);
    const auto basis_s = random_working_basis(d, Target::kTauS, rng, 1 + (t + 1) % 5);
    const std::string tag = "[" + std::to_string(t) + "]";
    if (opt.identities) {
      const double psi = exact_psi(d);
      res.checks.push_back({"decomposition" + tag,
                            std::abs(exact_psi_tilde(d) - exact_psi_sharp_weighted(d) - psi), 1e-10});
      res.checks.push_back({"psi_two_ways" + tag, std::abs(psi - exact_psi_weighted(d)), 1e-10});
      res.checks.push_back({"projection_tau_A" + tag, exact_projection_beta(d, basis_a, Target::kTauA).discrepancy(), 1e-10});
      res.checks.push_back({"projection_tau_S" + tag, exact_projection_beta(d, basis_s, Target::kTauS).discrepancy(), 1e-10});
    }
    if (!opt.gradients) continue;
    const Vector g_psi = gradient_psi(d);
    const Vector g_psi2 = gradient_psi2(d);
    const Vector g_tilde = gradient_psi_tilde_projection(d, basis_a);
    const auto sharp = gradient_psi_sharp_projection(d, basis_s);
    const Vector g_sharp = sharp.total();
    const std::pair<const char*, const Vector*> grads[] = {
        {"psi", &g_psi}, {"psi2", &g_psi2}, {"psi_tilde_projection", &g_tilde}, {"psi_sharp_projection", &g_sharp}};
    for (const auto& [name, g] : grads) {
      res.checks.push_back({std::string("mean_zero_") + name + tag, std::abs(expectation(d, *g)), 1e-10});
    }
    const Functional params[] = {
        [](const DiscreteDistribution& q) { return exact_psi(q); },
        [](const DiscreteDistribution& q) { return exact_psi2(q); },
        [&basis_a](const DiscreteDistribution& q) { return psi_tilde_projection(q, basis_a); },
        [&basis_s](const DiscreteDistribution& q) { return psi_sharp_projection(q, basis_s); }};
    for (int r = 0; r < opt.directions; ++r) {
      const Direction dir = dirs[r % 5];
      const Vector h = random_direction(d, dir, rng);
      for (int j = 0; j < 4; ++j) {
        const auto pr = pathwise_check(d, params[j], *grads[j].second, h);
        res.checks.push_back({std::string("pathwise_") + grads[j].first + "(" + to_string(dir) + ")" + tag,
                              pr.discrepancy(), 1e-6 * (1.0 + std::abs(pr.finite_difference))});
      }
      const std::pair<const char*, Functional> parts[] = {
          {"w", [&](const DiscreteDistribution& q) { return psi_sharp_projection_parts(q, d, d, basis_s); }},
          {"pi", [&](const DiscreteDistribution& q) { return psi_sharp_projection_parts(d, q, d, basis_s); }},
          {"beta", [&](const DiscreteDistribution& q) { return psi_sharp_projection_parts(d, d, q, basis_s); }}};
      const Vector* part_grads[] = {&sharp.w_part, &sharp.pi_part, &sharp.beta_part};
      for (int j = 0; j < 3; ++j) {
        const auto pr = pathwise_check(d, parts[j].second, *part_grads[j], h);
        res.checks.push_back({std::string("pathwise_sharp_component_") + parts[j].first + "(" + to_string(dir) + ")" + tag,
                              pr.discrepancy(), 1e-6 * (1.0 + std::abs(pr.finite_difference))});
      }
    }
  }
  return res;
}

}  // namespace atmle::oracle
