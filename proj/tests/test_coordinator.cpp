#include <random>
#include <set>

#include "bsosl/coordinator.hpp"
#include "gtest/gtest.h"
#include "oracles.hpp"

namespace bsosl {
namespace {

SummaryFeatureMatrix rows(const std::vector<std::vector<double>>& xs) {
  SummaryFeatureMatrix f;
  f.features = Matrix(xs.size(), xs.front().size());
  for (std::size_t r = 0; r < xs.size(); ++r) {
    f.client_ids.push_back(r);
    std::copy(xs[r].begin(), xs[r].end(), f.features.row(r).begin());
  }
  return f;
}

TEST(BuildFeatures, ZScoresPerColumn) {
  const std::vector<DistributionSummary> s{{0, {{0.0, 0.0}}}, {1, {{2.0, 0.0}}}};
  const auto f = build_features(s);
  ASSERT_EQ(f.features.rows, 2u);
  ASSERT_EQ(f.features.cols, 2u);
  EXPECT_DOUBLE_EQ(f.features(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(f.features(1, 0), 1.0);
  EXPECT_EQ(f.features(0, 1), 0.0);
  EXPECT_EQ(f.features(1, 1), 0.0);
  EXPECT_EQ(f.client_ids, (std::vector<std::size_t>{0, 1}));
}

TEST(BuildFeatures, SingleClientIsZeroRow) {
  const std::vector<DistributionSummary> s{{5, {{0.3, 1.0}, {-2.0, 0.5}}}};
  const auto f = build_features(s);
  for (double v : f.features.values) EXPECT_EQ(v, 0.0);
}

TEST(BuildFeatures, IdenticalSummariesAreZeroMatrix) {
  const DistributionSummary one{0, {{0.3, 1.0}, {-2.0, 0.5}}};
  std::vector<DistributionSummary> s(4, one);
  for (std::size_t i = 0; i < 4; ++i) s[i].client_id = i;
  for (double v : build_features(s).features.values) EXPECT_EQ(v, 0.0);
}

TEST(BuildFeatures, RejectsInconsistentLengths) {
  const std::vector<DistributionSummary> s{{0, {{0, 0}}}, {1, {{0, 0}, {1, 1}}}};
  EXPECT_THROW(build_features(s), ShapeError);
  EXPECT_THROW(build_features(std::vector<DistributionSummary>{}), std::invalid_argument);
}

TEST(KMeans, KEqualsNIsSingletons) {
  const auto f = rows({{0.0}, {1.0}, {5.0}, {-3.0}});
  const auto r = kmeans_detailed(f, 4, 0);
  EXPECT_EQ(r.objective(), 0.0);
  std::set<std::size_t> used;
  for (const auto& [id, c] : r.assignment.membership) used.insert(c);
  EXPECT_EQ(used.size(), 4u);
}

TEST(KMeans, KOneCentroidIsColumnMean) {
  const auto f = rows({{0.0, 1.0}, {2.0, 3.0}, {4.0, 8.0}});
  const auto r = kmeans_detailed(f, 1, 0);
  EXPECT_DOUBLE_EQ(r.centroids(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.centroids(0, 1), 4.0);
  for (const auto& [id, c] : r.assignment.membership) EXPECT_EQ(c, 0u);
}

TEST(KMeans, OneDimensionalPairsMatchExhaustiveOracle) {
  const auto f = rows({{0.0}, {0.1}, {10.0}, {10.1}});
  std::vector<std::size_t> best;
  const double opt = testing::exhaustive_kmeans_optimum(f.features, 2, &best);
  EXPECT_EQ(best, (std::vector<std::size_t>{0, 0, 1, 1}));
  const auto r = kmeans_detailed(f, 2, 0);
  const auto& m = r.assignment.membership;
  EXPECT_EQ(m.at(0), m.at(1));
  EXPECT_EQ(m.at(2), m.at(3));
  EXPECT_NE(m.at(0), m.at(2));
  EXPECT_NEAR(r.objective(), opt, 1e-12);
}

TEST(KMeans, FarthestPointInitStartsFromLowestId) {
  // Ids are shuffled relative to row order; the lowest id anchors cluster 0.
  SummaryFeatureMatrix f = rows({{10.0}, {0.0}, {10.2}, {0.3}});
  f.client_ids = {7, 2, 9, 4};
  const auto a = kmeans(f, 2, 0);
  EXPECT_EQ(a.membership.at(2), 0u);
  EXPECT_EQ(a.membership.at(4), 0u);
  EXPECT_EQ(a.membership.at(7), 1u);
  EXPECT_EQ(a.membership.at(9), 1u);
}

TEST(KMeans, DuplicatePointsStillFillEveryCluster) {
  const auto f = rows({{1.0}, {1.0}, {1.0}, {1.0}, {1.0}});
  const auto r = kmeans_detailed(f, 3, 0);
  EXPECT_NO_THROW(r.assignment.validate());
  EXPECT_EQ(r.objective(), 0.0);
}

TEST(KMeans, RejectsBadK) {
  const auto f = rows({{0.0}, {1.0}});
  EXPECT_THROW(kmeans(f, 3, 0), ConfigError);
  EXPECT_THROW(kmeans(f, 0, 0), ConfigError);
}

TEST(KMeans, ObjectiveNeverIncreasesAndPartitionValid) {
  std::mt19937_64 gen(31);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + gen() % 30;
    const std::size_t d = 1 + gen() % 5;
    const std::size_t k = 1 + gen() % std::min<std::size_t>(n, 6);
    std::vector<std::vector<double>> xs(n, std::vector<double>(d));
    for (auto& x : xs)
      for (auto& v : x) v = g(gen) + (gen() % 3) * 4.0;
    const auto r = kmeans_detailed(rows(xs), k, trial, 100);
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
      EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1] * (1 + 1e-12) + 1e-12);
    EXPECT_NO_THROW(r.assignment.validate());
    EXPECT_EQ(r.assignment.membership.size(), n);
    EXPECT_LE(r.iterations, 100u);
  }
}

TEST(KMeans, DeterministicPerInput) {
  const auto f = rows({{0.0, 1.0}, {3.0, 1.0}, {0.5, 0.2}, {2.5, 2.0}, {9.0, 9.0}});
  EXPECT_EQ(kmeans(f, 3, 5), kmeans(f, 3, 5));
}

TEST(ClusterAssignment, ValidateCatchesBrokenInvariants) {
  ClusterAssignment a;
  a.k = 2;
  a.membership = {{0, 0}, {1, 0}};
  EXPECT_THROW(a.validate(), std::logic_error);  // cluster 1 empty
  a.membership[1] = 1;
  a.centers = {{0, 1}};
  EXPECT_THROW(a.validate(), std::logic_error);  // center not a member
  a.centers = {{0, 0}, {1, 1}};
  EXPECT_NO_THROW(a.validate());
}

}  // namespace
}  // namespace bsosl
