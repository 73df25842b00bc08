#include "atmle/oracle.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace atmle;
using namespace atmle::oracle;

namespace {

// One covariate value, external controls only:
// trial treated y=3 (0.2), trial control y=1 (0.2), external control y=2 (0.6).
DiscreteDistribution hand_law() {
  DiscreteDistribution d;
  d.w_points = Matrix::Zero(1, 1);
  d.atoms = {{1, 0, 1, 3.0, 0.2}, {1, 0, 0, 1.0, 0.2}, {0, 0, 0, 2.0, 0.6}};
  return d;
}

}  // namespace

TEST(ExactEstimands, HandLawByHand) {
  const auto d = hand_law();
  const auto f = factors(d);
  EXPECT_DOUBLE_EQ(f.pi1[0][0], 0.25);
  EXPECT_DOUBLE_EQ(f.pi1[1][0], 1.0);
  EXPECT_DOUBLE_EQ(f.tau_s(0, 0), -1.0);
  EXPECT_NEAR(exact_psi(d), 2.0, 1e-15);
  EXPECT_NEAR(exact_psi2(d), 2.0, 1e-15);
  EXPECT_NEAR(exact_psi_weighted(d), 2.0, 1e-15);
  // pooled control mean (0.2 * 1 + 0.6 * 2) / 0.8 = 1.75
  EXPECT_NEAR(exact_psi_tilde(d), 1.25, 1e-15);
  EXPECT_NEAR(exact_psi_sharp(d), -0.75, 1e-15);
  EXPECT_NEAR(exact_psi_sharp_weighted(d), -0.75, 1e-15);
}

TEST(ExactEstimands, SaturatedWorkingModelsRecoverTheEstimands) {
  const auto d = hand_law();
  const auto ba = BasisSet::intercept_only(BasisDomain::kW, 1);
  const auto bs = BasisSet::intercept_only(BasisDomain::kWA, 1);
  EXPECT_NEAR(psi_tilde_projection(d, ba), exact_psi_tilde(d), 1e-12);
  EXPECT_NEAR(psi_sharp_projection(d, bs), exact_psi_sharp_weighted(d), 1e-12);
}

TEST(Gradients, HandLawGradientOfTheAte) {
  const auto d = hand_law();
  const Vector g = gradient_psi(d);
  // p(S=1|W) = 0.4 and g = 0.5; every Q equals its y, so only q1 - q0 - psi remains
  for (Eigen::Index i = 0; i < g.size(); ++i) EXPECT_NEAR(g(i), 0.0, 1e-12);
  EXPECT_NEAR(expectation(d, gradient_psi2(d)), 0.0, 1e-12);
}

TEST(Gradients, MatchFiniteDifferencesOnRandomLaws) {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 6; ++t) {
    RandomDistributionOptions ro;
    ro.dimension = 1;
    ro.points_per_dim = 3;
    ro.external_controls_only = t % 2 == 1;
    const auto d = random_distribution(rng, ro);
    const auto bs = random_working_basis(d, Target::kTauS, rng, 3);
    const Vector g = gradient_psi_sharp_projection(d, bs).total();
    const Vector h = random_direction(d, Direction::kAny, rng);
    const auto pr = pathwise_check(d, [&bs](const DiscreteDistribution& q) { return psi_sharp_projection(q, bs); }, g, h);
    EXPECT_LT(pr.discrepancy(), 1e-6 * (1 + std::abs(pr.finite_difference)));
    EXPECT_NE(pr.finite_difference, 0.0);
  }
}

TEST(Distributions, RejectInvalidMass) {
  auto d = hand_law();
  Vector h(3);
  h << -100, 0, 0;
  EXPECT_THROW(d.perturbed(h, 0.1), ValidationError);
  d.atoms[0].p = 0.5;
  EXPECT_THROW(factors(d), ValidationError);
  d = hand_law();
  d.atoms.erase(d.atoms.begin());
  d.atoms[0].p = 0.4;
  EXPECT_THROW(factors(d), ValidationError);
}

TEST(Sweep, AllChecksPassAndCoverEveryFamily) {
  SweepOptions opt;
  opt.distributions = 10;
  const auto res = run_sweep(opt);
  EXPECT_TRUE(res.passed());
  for (const char* family : {"decomposition", "psi_two_ways", "projection_tau_A", "projection_tau_S", "mean_zero_psi",
                             "pathwise_psi_sharp_projection", "pathwise_sharp_component_w",
                             "pathwise_sharp_component_pi", "pathwise_sharp_component_beta"}) {
    bool seen = false;
    for (const auto& c : res.checks) seen = seen || c.name.rfind(family, 0) == 0;
    EXPECT_TRUE(seen) << family;
  }
  EXPECT_LT(res.worst("pathwise"), 1.0);
}
