// Acceptance suite. `atmle_acceptance <n>` evaluates criterion n (1-11) or
// `all`, printing one PASS/FAIL line per criterion. The exit status is 0
// once every requested criterion was evaluated; `--strict` turns any FAIL
// into exit 1. Monte Carlo studies honour ATMLE_JOBS. Each verdict line is
// also appended to acceptance_results.txt in the build directory, since ctest
// hides the output of tests that exit 0.

#include "atmle/atmle.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace atmle;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

int jobs() {
  if (const char* env = std::getenv("ATMLE_JOBS")) {
    const int j = std::atoi(env);
    if (j >= 1) return j;
  }
  return 1;
}

sim::MonteCarloResult study(sim::ScenarioSpec spec, int reps = 300, std::uint64_t seed = 2024) {
  sim::StudyOptions opt;
  opt.reps = reps;
  opt.jobs = jobs();
  opt.master_seed = seed;
  return sim::run_study(spec, opt);
}

std::string summary(const sim::MonteCarloResult& r) {
  std::string out;
  for (const auto& m : r.metrics) {
    out += format("\n    %-12s bias % .4f  mse %.5f  rel_mse %.3f  coverage %.3f  failures %d", m.estimator.c_str(), m.bias,
                  m.mse, m.relative_mse, m.coverage, m.failures);
  }
  return out;
}

Outcome criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  oracle::SweepOptions opt;
  opt.distributions = 50;
  opt.gradients = false;
  const auto res = oracle::run_sweep(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double worst = std::max({res.worst("decomposition"), res.worst("psi_two_ways"), res.worst("projection_tau_A"),
                                 res.worst("projection_tau_S")});
  return {res.passed() && secs < 60.0,
          format("%zu checks, worst value/tolerance %.3g, %.1f s", res.checks.size(), worst, secs)};
}

Outcome criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  oracle::SweepOptions opt;
  opt.distributions = 20;
  opt.directions = 5;
  opt.identities = false;
  const auto res = oracle::run_sweep(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int pathwise = 0;
  for (const auto& c : res.checks) pathwise += c.name.rfind("pathwise_", 0) == 0;
  return {res.passed() && pathwise >= 20 * 5 * 7 && secs < 120.0,
          format("%d pathwise checks, worst discrepancy/tolerance %.3g, %.1f s", pathwise, res.worst("pathwise"), secs)};
}

Outcome criterion_3() {
  std::vector<sim::ScenarioSpec> specs;
  for (const char* id : {"a", "b", "c", "d"}) specs.push_back(sim::scenario(id, 500, 3.0));
  for (double alpha : {0.5, 1.0}) specs.push_back(sim::scenario("positivity", 500, 3.0, alpha));
  double worst[3] = {0, 0, 0};
  int analyses = 0;
  for (auto spec : specs) {
    for (int rep = 0; rep < 5; ++rep) {
      spec.seed = sim::rep_seed(303, rep);
      const auto r = atmle::atmle(sim::generate(spec));
      worst[0] = std::max(worst[0], r.score_residuals.at("cate_beta"));
      worst[1] = std::max(worst[1], r.score_residuals.at("enroll_beta"));
      worst[2] = std::max(worst[2], r.score_residuals.at("pi_targeting"));
      ++analyses;
    }
  }
  const bool pass = worst[0] < 1e-8 && worst[1] < 1e-8 && worst[2] < 1e-8;
  return {pass, format("%d analyses; max |P_n D^r_beta| %.2e, |P_n D_beta| %.2e, |P_n C(S-Pi*)| %.2e", analyses, worst[0],
                       worst[1], worst[2])};
}

Outcome criterion_4() {
  const auto r = study(sim::scenario("a", 500, 3.0));
  const auto& m = r.at("atmle");
  const bool pass = std::abs(m.bias) < 0.05 && m.coverage >= 0.92 && m.coverage <= 0.97 && m.relative_mse >= 1.2 &&
                    m.relative_mse <= 3.0 && m.failures == 0;
  return {pass, format("atmle bias %.4f coverage %.3f rel_mse %.3f", m.bias, m.coverage, m.relative_mse) + summary(r)};
}

Outcome criterion_5() {
  const auto r = study(sim::scenario("b", 500, 3.0));
  const auto& m = r.at("atmle");
  const auto& pooled = r.at("pooled-aipw");
  const bool pass = m.coverage >= 0.92 && m.coverage <= 0.98 && m.relative_mse >= 1.0 &&
                    std::abs(pooled.bias) > 5.0 * std::abs(m.bias) && m.failures == 0;
  return {pass, format("atmle coverage %.3f rel_mse %.3f |bias| %.4f; pooled-aipw |bias| %.4f", m.coverage, m.relative_mse,
                       std::abs(m.bias), std::abs(pooled.bias)) +
                    summary(r)};
}

Outcome criterion_6() {
  bool pass = true;
  std::string detail;
  for (const char* id : {"c", "d"}) {
    const auto r = study(sim::scenario(id, 500, 3.0));
    const auto& m = r.at("atmle");
    pass = pass && m.coverage >= 0.92 && m.relative_mse >= 1.0 && m.failures == 0;
    detail += format("\n  scenario %s: atmle coverage %.3f rel_mse %.3f", id, m.coverage, m.relative_mse) + summary(r);
  }
  return {pass, detail};
}

Outcome criterion_7() {
  bool pass = true;
  std::string detail;
  for (double alpha : {0.5, 1.0}) {
    const auto r = study(sim::scenario("positivity", 500, 3.0, alpha));
    const double at = r.at("atmle").mse, tm = r.at("tmle").mse, pa = r.at("pooled-aipw").mse;
    pass = pass && at < tm && at < pa;
    detail += format("\n  alpha %.1f: mse atmle %.5f tmle %.5f pooled-aipw %.5f", alpha, at, tm, pa) + summary(r);
  }
  return {pass, detail};
}

// Linear working model for tau_A in w1, fitted by the R-loss with an
// intercept-only outcome regression and a cross-fitted treatment mechanism.
// The target is the g(1-g)-weighted projection of the true pooled CATE.
Outcome criterion_8() {
  auto spec = sim::scenario("a", 12500, 3.0);
  spec.seed = 808;
  const auto data = sim::generate(spec);
  const auto n = data.n();
  const auto folds = make_folds(data, 5, 808);

  Vector a(n);
  for (Eigen::Index i = 0; i < n; ++i) a(i) = data.a(i);
  RegressionTask task{"g", Family::kBinomial, data.w(), std::nullopt, a, std::vector<bool>(static_cast<std::size_t>(n), true)};
  const auto g = cross_fit(task, folds, default_library());
  const double theta = data.y().mean();

  Matrix x(n, 2);
  Vector r(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = a(i) - g.factual(i);
    x(i, 0) = f;
    x(i, 1) = f * data.w()(i, 0);
    r(i) = data.y(i) - theta;
  }
  const auto fit = relaxed_ols(x, r, Vector::Ones(n), {0, 1});
  const double slope = fit.full_coefficients(2)(1);

  // truth by Monte Carlo over w1 ~ N(0, 1)
  std::mt19937_64 rng(99);
  std::normal_distribution<double> z(0.0, 1.0);
  const double p1 = 0.25;
  Eigen::Matrix2d gram = Eigen::Matrix2d::Zero();
  Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
  for (int k = 0; k < 4'000'000; ++k) {
    const double w[3] = {z(rng), 0.0, 0.0};
    const double ge = expit(0.5 * w[0]);
    const double gw = p1 * 0.67 + (1.0 - p1) * ge;
    const double tau = 1.5 + (1.0 - sim::enrollment_given_treatment(spec, w, 1)) * sim::detail::bias_term("a", w, 1) -
                       (1.0 - sim::enrollment_given_treatment(spec, w, 0)) * sim::detail::bias_term("a", w, 0);
    const double wt = gw * (1.0 - gw);
    const Eigen::Vector2d phi(1.0, w[0]);
    gram += wt * phi * phi.transpose();
    rhs += wt * tau * phi;
  }
  const Eigen::Vector2d beta = gram.ldlt().solve(rhs);
  const double rel = std::abs(slope - beta(1)) / std::abs(beta(1));
  return {rel < 0.05, format("n %lld, fitted slope %.4f, true projection slope %.4f, relative error %.3f (g learner %s)",
                             static_cast<long long>(n), slope, beta(1), rel,
                             default_library()[static_cast<std::size_t>(g.chosen)].name().c_str())};
}

Outcome criterion_9() {
  std::mt19937_64 rng(909);
  std::normal_distribution<double> z(0.0, 1.0);
  double worst_kkt = 0.0, worst_ne = 0.0, worst_soft = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 80 + 10 * (t % 7), p = 5 + t % 11;
    Matrix x(n, p);
    Vector y(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      for (Eigen::Index j = 1; j < p; ++j) x(i, j) = j % 2 ? (z(rng) > 0.0 ? 1.0 : 0.0) : z(rng);
      w(i) = 0.5 + std::abs(z(rng));
      y(i) = x(i, 1) - 0.5 * x(i, std::min<Eigen::Index>(2, p - 1)) + z(rng);
    }
    FoldAssignment folds;
    folds.v = 5;
    for (Eigen::Index i = 0; i < n; ++i) folds.fold_of.push_back(static_cast<int>(i % 5));
    LassoOptions opt;
    opt.unpenalized = {0};
    const auto fit = cv_lasso(x, y, w, folds, opt);
    worst_kkt = std::max(worst_kkt, lasso_kkt_residual(x, y, w, fit, opt));

    IndexVector support{0};
    for (int j : fit.support) {
      if (j != 0) support.push_back(j);
    }
    const auto ols = relaxed_ols(x, y, w, support);
    const Vector resid = y - x * ols.full_coefficients(p);
    for (int j : ols.retained) {
      worst_ne = std::max(worst_ne, std::abs((w.array() * x.col(j).array() * resid.array()).sum() / static_cast<double>(n)));
    }

    for (int k = 0; k < 10; ++k) {
      const double v = 3.0 * z(rng), thr = std::abs(z(rng));
      const double closed = v > thr ? v - thr : (v < -thr ? v + thr : 0.0);
      worst_soft = std::max(worst_soft, std::abs(detail::soft_threshold(v, thr) - closed));
    }
  }
  return {worst_kkt < 1e-6 && worst_ne < 1e-8 && worst_soft < 1e-10,
          format("100 problems; max KKT %.2e, normal equations %.2e, soft-threshold %.2e", worst_kkt, worst_ne, worst_soft)};
}

Outcome criterion_10() {
  auto spec = sim::scenario("a", 500, 3.0);
  spec.seed = 1010;
  const auto plain = sim::generate(spec);
  const FusionDataset ones(plain.s_column(), plain.w(), plain.a_column(), plain.y(),
                           std::vector<int>(static_cast<std::size_t>(plain.n()), 1));
  const auto a = atmle::atmle(plain), b = atmle::atmle(ones);
  const bool identical = to_json(a).dump() == to_json(b).dump() && a.influence.d_total == b.influence.d_total;

  auto censored = sim::scenario("a", 500, 3.0);
  censored.censoring_rate = 0.2;
  const auto r = study(censored);
  const auto& m = r.at("atmle");
  return {identical && std::abs(m.bias) < 0.07 && m.failures == 0,
          format("delta=1 bit-identical: %s; 20%% MCAR atmle bias %.4f coverage %.3f", identical ? "yes" : "no", m.bias,
                 m.coverage) +
              summary(r)};
}

Outcome criterion_11() {
  auto csv = [](int threads) {
    sim::StudyOptions opt;
    opt.reps = 4;
    opt.jobs = threads;
    opt.master_seed = 1111;
    std::ostringstream out;
    const auto res = sim::run_study(sim::scenario("b", 200, 3.0), opt);
    sim::write_results_csv(out, {res});
    return out.str() + sim::to_json(res).dump();
  };
  const std::string first = csv(1), second = csv(1), threaded = csv(2);
  const auto data = load_csv(std::string(ATMLE_SOURCE_DIR) + "/data/scenario_a_sample.csv");
  const std::string r1 = to_json(atmle::atmle(data)).dump(), r2 = to_json(atmle::atmle(data)).dump();
  const bool pass = first == second && first == threaded && r1 == r2;
  return {pass, format("results identical across runs: %s, across thread counts: %s; report JSON identical: %s",
                       first == second ? "yes" : "no", first == threaded ? "yes" : "no", r1 == r2 ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  bool strict = false;
  std::vector<int> which;
  for (const auto& a : args) {
    if (a == "--strict") {
      strict = true;
    } else if (a == "all") {
      for (int c = 1; c <= 11; ++c) which.push_back(c);
    } else {
      const int c = std::atoi(a.c_str());
      if (c < 1 || c > 11) {
        std::cerr << "usage: atmle_acceptance [--strict] (all | 1..11)...\n";
        return 2;
      }
      which.push_back(c);
    }
  }
  if (which.empty()) {
    std::cerr << "usage: atmle_acceptance [--strict] (all | 1..11)...\n";
    return 2;
  }
  const std::function<Outcome()> criteria[] = {criterion_1, criterion_2, criterion_3, criterion_4,
                                                criterion_5, criterion_6, criterion_7, criterion_8,
                                                criterion_9, criterion_10, criterion_11};
  bool all_pass = true;
  for (int c : which) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[c - 1]();
    } catch (const std::exception& e) {
      std::cerr << "criterion " << c << ": error: " << e.what() << "\n";
      return 3;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d: %s  (%.0f s)  %s\n", c, o.pass ? "PASS" : "FAIL", secs, o.detail.c_str());
    std::fflush(stdout);
    std::ofstream log(std::string(ATMLE_BINARY_DIR) + "/acceptance_results.txt", std::ios::app);
    log << format("criterion %2d: %s  (%.0f s)  ", c, o.pass ? "PASS" : "FAIL", secs) << o.detail << "\n";
    all_pass = all_pass && o.pass;
  }
  return strict && !all_pass ? 1 : 0;
}
