#include "atmle/eif.hpp"
#include "atmle/estimators.hpp"
#include "atmle/simulation.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace atmle;

TEST(RowGradients, TrialAteByHand) {
  // trial treated row: (q1 - q0 - psi) + (y - q1) / (p * g)
  EXPECT_DOUBLE_EQ(d_psi(1, 1, 3.0, 2.0, 0.5, 0.5, 0.25, 1.0), 0.5 + 1.0 / 0.125);
  // trial control row: residual enters with a minus sign
  EXPECT_DOUBLE_EQ(d_psi(1, 0, 1.0, 2.0, 0.5, 0.5, 0.25, 1.0), 0.5 - 0.5 / 0.125);
  // external rows carry only the covariate part
  EXPECT_DOUBLE_EQ(d_psi(0, 1, 100.0, 2.0, 0.5, 0.5, 0.25, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(d_psi2(0, 1, 100.0, 2.0, 0.5, 0.5, 0.25, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(d_psi2(1, 1, 3.0, 2.0, 0.5, 0.5, 0.25, 1.0), 0.5 / 0.25 + 1.0 / 0.125);
}

TEST(RowGradients, CensoredRowsNeverReadTheOutcome) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_DOUBLE_EQ(d_psi(1, 1, nan, 2.0, 0.5, 0.5, 0.25, 1.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(d_psi2(1, 0, nan, 2.0, 0.5, 0.5, 0.25, 1.0, 0.0), 0.5 / 0.25);
  // observed rows are up-weighted by the inverse observation probability
  EXPECT_DOUBLE_EQ(d_psi(1, 1, 3.0, 2.0, 0.5, 0.5, 0.25, 1.0, 2.0), 0.5 + 2.0 / 0.125);
}

TEST(RowGradients, BiasComponentsByHand) {
  EXPECT_DOUBLE_EQ(sharp_clever_covariate(1, 0.4, 2.0, -1.0), 2.0 / 0.4);
  EXPECT_DOUBLE_EQ(sharp_clever_covariate(0, 0.4, 2.0, -1.0), 1.0 / 0.6);
  EXPECT_DOUBLE_EQ(sharp_pi_component(1, 1, 0.4, 2.0, -1.0, 0.3), 5.0 * 0.7);
  EXPECT_DOUBLE_EQ(sharp_w_component(0.8, 0.6, -1.0, 2.0, 0.1), -0.8 - 1.2 - 0.1);
  Matrix ginv(2, 2);
  ginv << 2, 0, 0, 4;
  Vector score(2), m(2);
  score << 1, -1;
  m << 0.5, 0.25;
  EXPECT_DOUBLE_EQ(beta_component(score, ginv, m), 1.0 - 1.0);
}

class FittedGradients : public ::testing::Test {
 protected:
  void SetUp() override {
    auto spec = sim::scenario("a", 300, 2.0);
    spec.seed = 21;
    data = sim::generate(spec);
    folds = make_folds(data, 5, 21);
    nuis = fit_nuisances(data, folds);
  }
  FusionDataset data;
  FoldAssignment folds;
  NuisanceFit nuis;
};

TEST_F(FittedGradients, PooledGradientHasMeanZeroAtThePlugIn) {
  const auto rows = all_rows_of(data.n());
  const auto td = cate_design(data, nuis, generate_basis(data.w(), BasisDomain::kW, {1, 10}));
  const auto m = learn_from_design(td, folds, {});
  const auto est = estimate_pooled(td, m, rows);
  EXPECT_LT(std::abs(mean(est.d_pooled)), 1e-10);
}

TEST_F(FittedGradients, BiasGradientPartsAddUpAndCenterAfterTargeting) {
  const auto report = atmle_with_nuisances(data, nuis, folds);
  const auto& c = report.influence.components;
  const Vector sum = c.at("sharp_w") + c.at("sharp_pi") + c.at("sharp_beta");
  EXPECT_LT((sum - report.influence.d_sharp).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(std::abs(mean(c.at("sharp_w"))), 1e-10);
  EXPECT_LT(std::abs(mean(c.at("sharp_pi"))), 1e-8);
  EXPECT_LT(std::abs(mean(c.at("sharp_beta"))), 1e-8);
  EXPECT_LT((report.influence.d_total - (report.influence.d_pooled - report.influence.d_sharp)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(FittedGradients, InterceptOnlyBetaPartIsAScaledScore) {
  WorkingModelOptions opt;
  opt.intercept_only = true;
  const auto rows = all_rows_of(data.n());
  const auto td = enroll_design(data, nuis, generate_basis(data.w(), BasisDomain::kWA, {1, 10}));
  const auto m = learn_from_design(td, folds, opt);
  const Vector pi0_a0 = Vector::Ones(data.n()) - nuis.pi1_a0;
  const Vector pi0_a1 = Vector::Ones(data.n()) - nuis.pi1_a1;
  const double contrast = (pi0_a0 - pi0_a1).mean();
  const auto g = d_sharp_projection(td, m, rows, data.s_column(), data.a_column(), nuis.g1, nuis.pi1_a0, nuis.pi1_a1, 0.0);
  const Matrix scores = score_rows(td, m, rows);
  for (Eigen::Index i = 0; i < 10; ++i) EXPECT_NEAR(g.beta_part(i), scores(i, 0) * m.gram_inverse(0, 0) * contrast, 1e-12);
}
