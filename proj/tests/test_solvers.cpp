#include "atmle/solvers.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace atmle;

namespace {

FoldAssignment round_robin(Eigen::Index n, int v) {
  FoldAssignment f;
  f.v = v;
  for (Eigen::Index i = 0; i < n; ++i) f.fold_of.push_back(static_cast<int>(i % v));
  return f;
}

struct Problem {
  Matrix x;
  Vector y, w;
};

// Intercept in column 0, indicator-like and continuous columns after it.
Problem random_problem(std::mt19937_64& rng, Eigen::Index n, Eigen::Index p) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  Problem pr{Matrix(n, p), Vector(n), Vector(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    pr.x(i, 0) = 1.0;
    for (Eigen::Index j = 1; j < p; ++j) pr.x(i, j) = j % 2 ? (z(rng) > 0.3 * j - 1 ? 1.0 : 0.0) : z(rng);
    pr.w(i) = u(rng);
  }
  Vector beta = Vector::Zero(p);
  for (Eigen::Index j = 0; j < std::min<Eigen::Index>(p, 4); ++j) beta(j) = 1.0 - 0.5 * j;
  for (Eigen::Index i = 0; i < n; ++i) pr.y(i) = pr.x.row(i).dot(beta) + z(rng);
  return pr;
}

}  // namespace

TEST(SoftThreshold, MatchesClosedForm) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 2.0);
  for (int k = 0; k < 1000; ++k) {
    const double v = z(rng), t = std::abs(z(rng));
    const double expected = (v > 0 ? 1.0 : -1.0) * std::max(std::abs(v) - t, 0.0);
    EXPECT_NEAR(detail::soft_threshold(v, t), expected, 1e-15);
  }
  EXPECT_EQ(detail::soft_threshold(0.5, 0.5), 0.0);
}

TEST(LambdaGrid, IsGeometricFromLambdaMax) {
  const auto g = lambda_grid(2.0, 100, 1e-4);
  ASSERT_EQ(g.size(), 100u);
  EXPECT_DOUBLE_EQ(g.front(), 2.0);
  EXPECT_NEAR(g.back(), 2e-4, 1e-15);
  for (std::size_t k = 1; k < g.size(); ++k) EXPECT_NEAR(g[k] / g[k - 1], g[1] / g[0], 1e-12);
  EXPECT_EQ(lambda_grid(0.0, 10, 1e-4), std::vector<double>{0.0});
}

TEST(Lasso, SingleColumnMatchesSoftThresholdSolution) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0.0, 1.0);
  const Eigen::Index n = 200;
  Matrix x(n, 1);
  Vector y(n), w = Vector::Ones(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = z(rng);
    y(i) = 0.7 * x(i, 0) + z(rng);
  }
  const double s = std::sqrt(x.col(0).squaredNorm() / n);
  const double c = x.col(0).dot(y) / (n * s);
  for (double lambda : {0.0, 0.1, 0.5, 2.0}) {
    LassoOptions opt;
    opt.fixed_lambda = lambda;
    const auto fit = cv_lasso(x, y, w, round_robin(n, 5), opt);
    EXPECT_NEAR(fit.coefficients(0), detail::soft_threshold(c, lambda) / s, 1e-10) << "lambda " << lambda;
  }
}

TEST(Lasso, KktHoldsAlongRandomProblems) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto pr = random_problem(rng, 150, 12);
    LassoOptions opt;
    opt.unpenalized = {0};
    const auto cv = cv_lasso(pr.x, pr.y, pr.w, round_robin(150, 5), opt);
    EXPECT_LT(lasso_kkt_residual(pr.x, pr.y, pr.w, cv, opt), 1e-6);
    opt.fixed_lambda = 0.05 * (t + 1) / 20.0;
    const auto fixed = cv_lasso(pr.x, pr.y, pr.w, round_robin(150, 5), opt);
    EXPECT_LT(lasso_kkt_residual(pr.x, pr.y, pr.w, fixed, opt), 1e-6);
  }
}

TEST(Lasso, LambdaMaxZeroesPenalizedColumns) {
  std::mt19937_64 rng(2);
  const auto pr = random_problem(rng, 120, 8);
  LassoOptions opt;
  opt.unpenalized = {0};
  const auto cv = cv_lasso(pr.x, pr.y, pr.w, round_robin(120, 5), opt);
  ASSERT_FALSE(cv.lambda_grid.empty());
  opt.fixed_lambda = cv.lambda_grid.front() * (1 + 1e-9);
  const auto top = cv_lasso(pr.x, pr.y, pr.w, round_robin(120, 5), opt);
  for (Eigen::Index j = 1; j < pr.x.cols(); ++j) EXPECT_EQ(top.coefficients(j), 0.0);
  // the unpenalized intercept is the weighted mean
  EXPECT_NEAR(top.coefficients(0), pr.w.dot(pr.y) / pr.w.sum(), 1e-10);
}

TEST(Lasso, CvIsDeterministicAndPicksAGridPoint) {
  std::mt19937_64 rng(8);
  const auto pr = random_problem(rng, 100, 10);
  LassoOptions opt;
  opt.unpenalized = {0};
  const auto a = cv_lasso(pr.x, pr.y, pr.w, round_robin(100, 5), opt);
  const auto b = cv_lasso(pr.x, pr.y, pr.w, round_robin(100, 5), opt);
  EXPECT_EQ(a.coefficients, b.coefficients);
  ASSERT_GE(a.selected_index, 0);
  EXPECT_DOUBLE_EQ(a.lambda, a.lambda_grid[static_cast<std::size_t>(a.selected_index)]);
  EXPECT_EQ(a.lambda_grid.size(), 100u);
}

TEST(Lasso, UndersmoothingNeverShrinksTheSupport) {
  std::mt19937_64 rng(9);
  const auto pr = random_problem(rng, 150, 14);
  LassoOptions opt;
  opt.unpenalized = {0};
  const auto base = cv_lasso(pr.x, pr.y, pr.w, round_robin(150, 5), opt);
  opt.undersmooth = 0.25;
  const auto under = cv_lasso(pr.x, pr.y, pr.w, round_robin(150, 5), opt);
  EXPECT_LE(under.lambda, base.lambda);
  EXPECT_GE(under.support.size(), base.support.size());
}

TEST(Lasso, RejectsBadInput) {
  Matrix x = Matrix::Ones(4, 1);
  Vector y = Vector::Ones(4), w = Vector::Ones(4);
  w(0) = -1;
  EXPECT_THROW(cv_lasso(x, y, w, round_robin(4, 2)), ValidationError);
  y(1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(cv_lasso(x, y, Vector::Ones(4), round_robin(4, 2)), ValidationError);
}

TEST(RelaxedOls, SolvesNormalEquations) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto pr = random_problem(rng, 200, 9);
    const IndexVector support{0, 2, 3, 5, 8};
    const auto fit = relaxed_ols(pr.x, pr.y, pr.w, support);
    ASSERT_EQ(fit.retained, support);
    const Vector b = fit.full_coefficients(pr.x.cols());
    const Vector resid = pr.y - pr.x * b;
    for (int j : support) {
      const double ne = (pr.w.array() * pr.x.col(j).array() * resid.array()).sum() / 200.0;
      EXPECT_LT(std::abs(ne), 1e-8);
    }
    // gram_inverse inverts (1/n) X_R' W X_R
    Matrix xr(200, 5);
    for (int k = 0; k < 5; ++k) xr.col(k) = pr.x.col(support[static_cast<std::size_t>(k)]);
    const Matrix gram = xr.transpose() * pr.w.asDiagonal() * xr / 200.0;
    EXPECT_LT((gram * fit.gram_inverse - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(RelaxedOls, DropsCollinearColumnsInOrder) {
  std::mt19937_64 rng(6);
  auto pr = random_problem(rng, 100, 4);
  pr.x.col(3) = pr.x.col(1) + 2 * pr.x.col(0);
  const auto fit = relaxed_ols(pr.x, pr.y, pr.w, {0, 1, 3, 2});
  EXPECT_EQ(fit.retained, (IndexVector{0, 1, 2}));
  EXPECT_EQ(fit.dropped_columns, (IndexVector{3}));
  EXPECT_TRUE(relaxed_ols(pr.x, pr.y, pr.w, {}).retained.empty());
}

TEST(Logistic, IrlsSolvesTheScoreEquation) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Eigen::Index n = 500;
  Matrix x(n, 3);
  Vector labels(n), offset(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1;
    x(i, 1) = z(rng);
    x(i, 2) = u(rng) < 0.5;
    offset(i) = 0.3 * z(rng);
    labels(i) = u(rng) < expit(-0.4 + 0.8 * x(i, 1) - 0.5 * x(i, 2) + offset(i));
  }
  const auto fit = logistic_irls(x, labels, &offset);
  ASSERT_TRUE(fit.converged);
  const Vector mu = fit.predict(x, &offset);
  const Vector score = x.transpose() * (labels - mu) / static_cast<double>(n);
  EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Logistic, InterceptOnlyIsTheLogitOfTheMean) {
  const Eigen::Index n = 40;
  Vector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) labels(i) = i % 4 == 0;
  const auto fit = logistic_irls(Matrix::Ones(n, 1), labels);
  EXPECT_NEAR(fit.coefficients(0), logit(0.25), 1e-9);
}

TEST(Logistic, FlagsSeparation) {
  Matrix x(6, 2);
  x << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  Vector labels(6);
  labels << 0, 0, 0, 1, 1, 1;
  const auto fit = logistic_irls(x, labels);
  EXPECT_TRUE(fit.separation);
  EXPECT_FALSE(fit.converged);
}

TEST(LogisticLasso, HugeLambdaLeavesOnlyUnpenalizedTerms) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z(0.0, 1.0);
  const Eigen::Index n = 200;
  Matrix x(n, 3);
  Vector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1;
    x(i, 1) = z(rng);
    x(i, 2) = z(rng);
    labels(i) = z(rng) + x(i, 1) > 0;
  }
  const Vector w = Vector::Ones(n);
  const double lm = logistic_lambda_max(x, labels, w, {0});
  const auto path = logistic_lasso_path(x, labels, w, {lm * 1.01, lm * 0.1}, {0});
  EXPECT_EQ(path[0](1), 0.0);
  EXPECT_EQ(path[0](2), 0.0);
  EXPECT_NEAR(path[0](0), logit(labels.mean()), 1e-6);
  EXPECT_NE(path[1](1), 0.0);
}
