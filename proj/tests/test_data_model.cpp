#include "atmle/data_model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

using namespace atmle;

namespace {

FusionDataset small_dataset() {
  std::vector<Observation> obs;
  const int cells[][2] = {{1, 1}, {1, 0}, {0, 1}, {0, 0}};
  for (int r = 0; r < 3; ++r) {
    for (const auto& c : cells) {
      Observation o;
      o.s = c[0];
      o.a = c[1];
      o.w = {0.1 * r, -0.5 * r + c[1]};
      o.y = 1.0 + r + 0.5 * c[1] - 0.25 * c[0];
      obs.push_back(o);
    }
  }
  return FusionDataset::from_observations(obs);
}

}  // namespace

TEST(FusionDataset, AccessorsMatchObservations) {
  const auto d = small_dataset();
  EXPECT_EQ(d.n(), 12);
  EXPECT_EQ(d.d(), 2);
  EXPECT_FALSE(d.has_delta());
  EXPECT_FALSE(d.any_censored());
  EXPECT_EQ(d.cell_count(1, 1), 3);
  EXPECT_EQ(d.cell_count(0, 0), 3);
  const auto o = d.observation(5);
  EXPECT_EQ(o.s, 1);
  EXPECT_EQ(o.a, 0);
  EXPECT_DOUBLE_EQ(o.w[1], -0.5);
}

TEST(FusionDataset, RejectsNonBinaryColumns) {
  Matrix w(2, 1);
  w << 0, 1;
  EXPECT_THROW(FusionDataset({1, 2}, w, {0, 1}, Vector::Zero(2)), ValidationError);
  EXPECT_THROW(FusionDataset({1, 1}, w, {0, 3}, Vector::Zero(2)), ValidationError);
}

TEST(FusionDataset, RequiresBothTrialArms) {
  Matrix w = Matrix::Zero(3, 1);
  EXPECT_THROW(FusionDataset({1, 1, 0}, w, {1, 1, 0}, Vector::Zero(3)), ValidationError);
}

TEST(FusionDataset, ExternalControlsOnlyIsDetectedAndCanBeOverridden) {
  Matrix w = Matrix::Zero(3, 1);
  const FusionDataset auto_detected({1, 1, 0}, w, {1, 0, 0}, Vector::Zero(3));
  EXPECT_TRUE(auto_detected.external_controls_only());
  const FusionDataset overridden({1, 1, 0}, w, {1, 0, 0}, Vector::Zero(3), std::nullopt, false);
  EXPECT_FALSE(overridden.external_controls_only());
  EXPECT_THROW(FusionDataset({1, 1, 0}, w, {1, 0, 1}, Vector::Zero(3), std::nullopt, true), ValidationError);
}

TEST(FusionDataset, MissingOutcomeAllowedOnlyWhenCensored) {
  Matrix w = Matrix::Zero(3, 1);
  Vector y(3);
  y << 1.0, std::numeric_limits<double>::quiet_NaN(), 2.0;
  EXPECT_THROW(FusionDataset({1, 1, 0}, w, {1, 0, 0}, y), ValidationError);
  const FusionDataset ok({1, 1, 0}, w, {1, 0, 0}, y, std::vector<int>{1, 0, 1});
  EXPECT_TRUE(ok.any_censored());
  EXPECT_TRUE(ok.without_delta().delta_column() == std::vector<int>(3, 1));
}

TEST(Csv, RoundTripIsBitExact) {
  const auto d = small_dataset();
  std::stringstream ss;
  write_csv(ss, d);
  const auto back = read_csv(ss);
  ASSERT_EQ(back.n(), d.n());
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    EXPECT_EQ(back.s(i), d.s(i));
    EXPECT_EQ(back.a(i), d.a(i));
    EXPECT_EQ(back.y(i), d.y(i));
    for (Eigen::Index j = 0; j < d.d(); ++j) EXPECT_EQ(back.w()(i, j), d.w()(i, j));
  }
}

TEST(Csv, ReadsCensoredRowsAndExplicitCovariates) {
  std::stringstream ss("age,s,a,y,delta,bmi\n40,1,1,2.5,1,20\n50,1,0,NA,0,22\n60,0,0,1.5,1,30\n");
  CsvSchema schema;
  schema.covariate_columns = {"bmi", "age"};
  const auto d = read_csv(ss, schema);
  EXPECT_EQ(d.d(), 2);
  EXPECT_DOUBLE_EQ(d.w()(1, 0), 22.0);
  EXPECT_DOUBLE_EQ(d.w()(1, 1), 50.0);
  EXPECT_TRUE(d.has_delta());
  EXPECT_EQ(d.delta(1), 0);
  EXPECT_TRUE(std::isnan(d.y(1)));
}

TEST(Csv, MalformedInputIsAValidationError) {
  auto bad = [](const std::string& text) {
    std::stringstream ss(text);
    return read_csv(ss);
  };
  EXPECT_THROW(bad(""), ValidationError);
  EXPECT_THROW(bad("s,a,w1\n1,1,0\n"), ValidationError);
  EXPECT_THROW(bad("s,a,y,w1\n1,1,0\n"), ValidationError);
  EXPECT_THROW(bad("s,a,y,w1\n1,1,x,0\n1,0,1,0\n"), ValidationError);
  EXPECT_THROW(bad("s,a,y,w1\n1,1,NA,0\n1,0,1,0\n"), ValidationError);
  EXPECT_THROW(bad("s,a,y\n1,1,1\n1,0,1\n"), ValidationError);
  EXPECT_THROW(bad("s,a,y,w1\n"), ValidationError);
}

TEST(Folds, DeterministicStratifiedAndBalanced) {
  std::vector<int> s, a;
  for (int i = 0; i < 103; ++i) {
    s.push_back(i % 3 == 0);
    a.push_back(i % 2);
  }
  Matrix w = Matrix::Random(103, 1);
  const FusionDataset d(s, w, a, Vector::Zero(103));
  const auto f1 = make_folds(d, 5, 42);
  const auto f2 = make_folds(d, 5, 42);
  EXPECT_EQ(f1.fold_of, f2.fold_of);
  EXPECT_TRUE(f1.stratified);
  for (int sv = 0; sv < 2; ++sv) {
    for (int av = 0; av < 2; ++av) {
      std::vector<int> per(5, 0);
      for (Eigen::Index i = 0; i < d.n(); ++i) {
        if (d.s(i) == sv && d.a(i) == av) ++per[static_cast<std::size_t>(f1.fold_of[static_cast<std::size_t>(i)])];
      }
      const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
      EXPECT_LE(*hi - *lo, 2);
    }
  }
  const auto sizes = f1.sizes();
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}), 103u);
  EXPECT_NE(make_folds(d, 5, 43).fold_of, f1.fold_of);
}

TEST(Folds, TrainingAndValidationPartitionRows) {
  const auto d = small_dataset();
  const auto f = make_folds(d, 3, 1);
  for (int k = 0; k < 3; ++k) {
    auto tr = f.training(k);
    auto va = f.validation(k);
    std::set<int> all(tr.begin(), tr.end());
    all.insert(va.begin(), va.end());
    EXPECT_EQ(all.size(), 12u);
    EXPECT_EQ(tr.size() + va.size(), 12u);
  }
  const auto r = f.rotated(1);
  for (std::size_t i = 0; i < f.fold_of.size(); ++i) EXPECT_EQ(r.fold_of[i], (f.fold_of[i] + 1) % 3);
  const auto sub = f.restricted({0, 4, 7});
  EXPECT_EQ(sub.fold_of, (std::vector<int>{f.fold_of[0], f.fold_of[4], f.fold_of[7]}));
}

TEST(Folds, RejectsTooFewRows) {
  const auto d = small_dataset();
  EXPECT_THROW(make_folds(d, 1, 1), ValidationError);
  EXPECT_THROW(make_folds(d, 13, 1), ValidationError);
}
