#pragma once

#include "atmle/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

namespace atmle {

enum class BasisDomain { kW, kWA };

// Product of (w_j - knot_j)^order I(w_j >= knot_j) over `subset`, times
// I(a = 1) when `includes_treatment`. Order 0 gives indicators, order 1 hinge
// functions. Empty subset without treatment is the intercept.
struct BasisFunction {
  std::vector<int> subset;
  std::vector<double> knots;
  bool includes_treatment = false;
  int order = 0;

  [[nodiscard]] bool is_intercept() const { return subset.empty() && !includes_treatment; }

  [[nodiscard]] double evaluate(const double* w, int a) const {
    if (includes_treatment && a != 1) return 0.0;
    double out = 1.0;
    for (std::size_t k = 0; k < subset.size(); ++k) {
      if (!(w[subset[k]] >= knots[k])) return 0.0;
      if (order == 1) out *= w[subset[k]] - knots[k];
    }
    return out;
  }

  friend bool operator<(const BasisFunction& l, const BasisFunction& r) {
    return std::tie(l.includes_treatment, l.order, l.subset, l.knots) <
           std::tie(r.includes_treatment, r.order, r.subset, r.knots);
  }
  friend bool operator==(const BasisFunction& l, const BasisFunction& r) {
    return l.includes_treatment == r.includes_treatment && l.order == r.order && l.subset == r.subset &&
           l.knots == r.knots;
  }
};

struct BasisSet {
  std::vector<BasisFunction> functions;  // functions[0] is the intercept
  BasisDomain domain = BasisDomain::kW;
  int dimension = 0;

  [[nodiscard]] std::size_t size() const { return functions.size(); }

  static BasisSet intercept_only(BasisDomain domain, int dimension) {
    BasisSet b;
    b.domain = domain;
    b.dimension = dimension;
    b.functions.push_back({});
    return b;
  }
};

struct BasisOptions {
  int max_degree = 1;
  int max_knots_per_dim = 10;
  int order = 0;  // 0 or 1
};

// Upper bound on the number of functions `generate_basis` may emit.
inline std::size_t basis_count_cap(int d, int max_degree, int max_knots, BasisDomain domain) {
  auto binom = [](int n, int k) {
    double r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return static_cast<std::size_t>(std::llround(r));
  };
  std::size_t total = 1;
  for (int k = 1; k <= std::min(max_degree, d); ++k) {
    std::size_t pk = 1;
    for (int i = 0; i < k; ++i) pk *= static_cast<std::size_t>(max_knots);
    total += binom(d, k) * pk;
  }
  return domain == BasisDomain::kWA ? 2 * total : total;
}

// Knots for one covariate: all distinct observed values when there are at
// most `max_knots`, otherwise observed values at evenly spaced order
// statistics starting at the minimum.
inline std::vector<double> knot_grid(const Vector& column, int max_knots) {
  std::vector<double> v(column.data(), column.data() + column.size());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  if (static_cast<int>(v.size()) <= max_knots) return v;
  std::vector<double> sorted(column.data(), column.data() + column.size());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  const auto n = static_cast<double>(sorted.size());
  for (int k = 0; k < max_knots; ++k) {
    const double p = max_knots == 1 ? 0.0 : static_cast<double>(k) / (max_knots - 1);
    const auto idx = static_cast<std::size_t>(std::floor(p * (n - 1)));
    out.push_back(sorted[idx]);
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline BasisSet generate_basis(const Matrix& w, BasisDomain domain, const BasisOptions& opt) {
  if (opt.max_degree < 1) throw ValidationError("max_degree must be at least 1");
  if (opt.max_knots_per_dim < 1) throw ValidationError("max_knots_per_dim must be at least 1");
  if (opt.order != 0 && opt.order != 1) throw ValidationError("basis order must be 0 or 1");
  const int d = static_cast<int>(w.cols());
  std::vector<std::vector<double>> knots(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) knots[static_cast<std::size_t>(j)] = knot_grid(w.col(j), opt.max_knots_per_dim);

  std::vector<BasisFunction> w_functions;
  const int max_degree = std::min(opt.max_degree, d);
  for (int degree = 1; degree <= max_degree; ++degree) {
    // subsets of size `degree` in lexicographic order
    std::vector<int> subset(static_cast<std::size_t>(degree));
    for (int k = 0; k < degree; ++k) subset[static_cast<std::size_t>(k)] = k;
    while (true) {
      std::vector<std::size_t> pos(static_cast<std::size_t>(degree), 0);
      while (true) {
        BasisFunction f;
        f.subset = subset;
        f.order = opt.order;
        for (int k = 0; k < degree; ++k) {
          f.knots.push_back(knots[static_cast<std::size_t>(subset[static_cast<std::size_t>(k)])][pos[static_cast<std::size_t>(k)]]);
        }
        w_functions.push_back(std::move(f));
        int k = degree - 1;
        while (k >= 0) {
          const auto kk = static_cast<std::size_t>(k);
          if (++pos[kk] < knots[static_cast<std::size_t>(subset[kk])].size()) break;
          pos[kk] = 0;
          --k;
        }
        if (k < 0) break;
      }
      int k = degree - 1;
      while (k >= 0 && subset[static_cast<std::size_t>(k)] == d - degree + k) --k;
      if (k < 0) break;
      ++subset[static_cast<std::size_t>(k)];
      for (int m = k + 1; m < degree; ++m) subset[static_cast<std::size_t>(m)] = subset[static_cast<std::size_t>(m - 1)] + 1;
    }
  }

  BasisSet out = BasisSet::intercept_only(domain, d);
  if (domain == BasisDomain::kWA) {
    BasisFunction treat;
    treat.includes_treatment = true;
    out.functions.push_back(treat);
  }
  std::set<BasisFunction> seen(out.functions.begin(), out.functions.end());
  for (const auto& f : w_functions) {
    if (seen.insert(f).second) out.functions.push_back(f);
    if (domain == BasisDomain::kWA) {
      BasisFunction g = f;
      g.includes_treatment = true;
      if (seen.insert(g).second) out.functions.push_back(std::move(g));
    }
  }
  if (out.size() > basis_count_cap(d, opt.max_degree, opt.max_knots_per_dim, domain)) {
    throw EstimationError("basis generation exceeded its size cap");
  }
  return out;
}

inline Vector evaluate_basis(const BasisSet& basis, const Vector& w, std::optional<int> a = std::nullopt) {
  if (w.size() != basis.dimension) throw ValidationError("covariate dimension mismatch");
  if (a.has_value() != (basis.domain == BasisDomain::kWA)) {
    throw ValidationError("treatment value must be supplied exactly for (W,A) bases");
  }
  Vector out(static_cast<Eigen::Index>(basis.size()));
  for (std::size_t j = 0; j < basis.size(); ++j) {
    out(static_cast<Eigen::Index>(j)) = basis.functions[j].evaluate(w.data(), a.value_or(0));
  }
  return out;
}

// Rows of `w` evaluated against every basis function. `a` must be given for
// (W,A) bases; a single treatment value may be forced with `a_override`.
inline Matrix design_matrix(const BasisSet& basis, const Matrix& w, const std::vector<int>* a = nullptr,
                            std::optional<int> a_override = std::nullopt) {
  if (w.cols() != basis.dimension) throw ValidationError("covariate dimension mismatch");
  const bool need_a = basis.domain == BasisDomain::kWA;
  if (need_a && a == nullptr && !a_override) throw ValidationError("treatment column required");
  const Eigen::Index n = w.rows();
  const auto p = static_cast<Eigen::Index>(basis.size());
  Matrix x(n, p);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wr = w;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int ai = !need_a ? 0 : (a_override ? *a_override : (*a)[static_cast<std::size_t>(i)]);
    const double* wi = wr.row(i).data();
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = basis.functions[static_cast<std::size_t>(j)].evaluate(wi, ai);
  }
  return x;
}

inline nlohmann::json to_json(const BasisFunction& f) {
  return {{"subset", f.subset}, {"knots", f.knots}, {"treatment", f.includes_treatment}, {"order", f.order}};
}

inline nlohmann::json to_json(const BasisSet& b) {
  nlohmann::json fs = nlohmann::json::array();
  for (const auto& f : b.functions) fs.push_back(to_json(f));
  return {{"domain", b.domain == BasisDomain::kW ? "W" : "WA"}, {"dimension", b.dimension}, {"functions", fs}};
}

inline BasisSet basis_from_json(const nlohmann::json& j) {
  BasisSet b;
  b.domain = j.at("domain").get<std::string>() == "W" ? BasisDomain::kW : BasisDomain::kWA;
  b.dimension = j.at("dimension").get<int>();
  for (const auto& f : j.at("functions")) {
    BasisFunction bf;
    bf.subset = f.at("subset").get<std::vector<int>>();
    bf.knots = f.at("knots").get<std::vector<double>>();
    bf.includes_treatment = f.at("treatment").get<bool>();
    bf.order = f.value("order", 0);
    b.functions.push_back(std::move(bf));
  }
  return b;
}

}  // namespace atmle
