#include "atmle/config.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace atmle;

TEST(Config, ParsesKeyValueLinesWithComments) {
  std::stringstream ss(
      "# study settings\n"
      "seed = 42\n"
      "v_folds=3   # fewer folds\n"
      "\n"
      "learners = glm, intercept\n"
      "tau_s_knots = 20\n"
      "covariate_columns = age, bmi\n"
      "external_controls_only = true\n"
      "undersmooth = 0.5\n");
  const auto c = parse_config(ss);
  EXPECT_EQ(c.atmle.seed, 42u);
  EXPECT_EQ(c.atmle.v_folds, 3);
  EXPECT_EQ(c.atmle.nuisance.library.size(), 2u);
  EXPECT_EQ(c.atmle.tau_s.basis.max_knots_per_dim, 20);
  EXPECT_EQ(c.csv.covariate_columns, (std::vector<std::string>{"age", "bmi"}));
  EXPECT_EQ(c.csv.external_controls_only, std::optional<bool>(true));
  EXPECT_DOUBLE_EQ(c.atmle.tau_a.undersmooth, 0.5);
  EXPECT_DOUBLE_EQ(c.atmle.tau_s.undersmooth, 0.5);
}

TEST(Config, LaterValuesWin) {
  std::stringstream ss("seed = 1\nseed = 9\n");
  EXPECT_EQ(parse_config(ss).atmle.seed, 9u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto parse = [](const std::string& text) {
    std::stringstream ss(text);
    return parse_config(ss);
  };
  EXPECT_THROW(parse("sed = 1\n"), ValidationError);
  EXPECT_THROW(parse("seed\n"), ValidationError);
  EXPECT_THROW(parse("seed = \n"), ValidationError);
  EXPECT_THROW(parse("seed = -1\n"), ValidationError);
  EXPECT_THROW(parse("seed = 1.5\n"), ValidationError);
  EXPECT_THROW(parse("v_folds = 1\n"), ValidationError);
  EXPECT_THROW(parse("truncation = 0.5\n"), ValidationError);
  EXPECT_THROW(parse("estimator = ols\n"), ValidationError);
  EXPECT_THROW(parse("learners = forest\n"), ValidationError);
  EXPECT_THROW(parse("scenario = z\n"), ValidationError);
  EXPECT_THROW(parse("censoring_rate = 1\n"), ValidationError);
  EXPECT_THROW(parse("external_controls_only = maybe\n"), ValidationError);
  try {
    parse("seed = 1\n\nbogus line\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Config, JsonEchoesResolvedValues) {
  RunConfig c;
  c.set("estimator", "cv-atmle");
  c.set("alpha", "0.5");
  c.set("pooled", "regular-tmle");
  const auto j = c.to_json();
  EXPECT_EQ(j["estimator"], "cv-atmle");
  EXPECT_EQ(j["alpha"], 0.5);
  EXPECT_EQ(j["pooled"], "regular-tmle");
  EXPECT_EQ(j["external_controls_only"], "auto");
  EXPECT_TRUE(j["known_trial_propensity"].is_null());
}

TEST(Config, EveryEstimatorNameIsAccepted) {
  for (const auto& name : estimator_names()) {
    RunConfig c;
    EXPECT_NO_THROW(c.set("estimator", name));
  }
}

TEST(Config, SplineOrdersAndFirstOrderHal) {
  RunConfig c;
  c.set("tau_s_order", "1");
  c.set("learners", "glm, hal1");
  EXPECT_EQ(c.atmle.tau_s.basis.order, 1);
  EXPECT_EQ(c.atmle.tau_a.basis.order, 0);
  ASSERT_EQ(c.atmle.nuisance.library.size(), 2u);
  EXPECT_EQ(c.atmle.nuisance.library[1].hal.order, 1);
  const auto j = c.to_json();
  EXPECT_EQ(j["tau_s_order"], 1);
  EXPECT_EQ(j["learners"], (nlohmann::json{"glm", "hal1"}));
  EXPECT_THROW(c.set("tau_a_order", "2"), ValidationError);
}
