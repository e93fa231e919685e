#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "bsosl/bsa.hpp"
#include "gtest/gtest.h"
#include "oracles.hpp"

namespace bsosl {
namespace {

/// Client with a given id, train-split size, flat params and val accuracy.
ClientState fake_client(std::size_t id, std::size_t train, std::vector<double> flat,
                        double val = 0.0) {
  auto ds = std::make_shared<ClientDataset>();
  ds->client_id = id;
  ds->train.features = Matrix(train, 1);
  ds->train.labels.assign(train, 0);
  ds->val.features.cols = 1;
  ds->test.features.cols = 1;
  ClientState s;
  s.client_id = id;
  s.dataset = ds;
  const std::vector<LayerShape> shapes{{1, flat.size() / 2}};
  s.params = ParameterVector::unflatten(shapes, flat);
  s.val_accuracy = val;
  return s;
}

ClusterAssignment two_pairs() {
  // {A=0, B=1 | center A} and {C=2, D=3 | center C}
  ClusterAssignment a;
  a.k = 2;
  a.membership = {{0, 0}, {1, 0}, {2, 1}, {3, 1}};
  a.centers = {{0, 0}, {1, 2}};
  return a;
}

TEST(SelectCenters, ArgmaxOfValAccuracy) {
  std::vector<ClientState> cs{fake_client(0, 1, {0, 0}, 0.3), fake_client(1, 1, {0, 0}, 0.7),
                              fake_client(2, 1, {0, 0}, 0.5)};
  ClusterAssignment a;
  a.k = 1;
  a.membership = {{0, 0}, {1, 0}, {2, 0}};
  EXPECT_EQ(select_centers(a, cs).centers.at(0), 1u);
}

TEST(SelectCenters, TiesGoToLowestId) {
  std::vector<ClientState> cs{fake_client(4, 1, {0, 0}, 0.5), fake_client(2, 1, {0, 0}, 0.5)};
  ClusterAssignment a;
  a.k = 1;
  a.membership = {{2, 0}, {4, 0}};
  EXPECT_EQ(select_centers(a, cs).centers.at(0), 2u);
}

TEST(SelectCenters, SingletonIsItsOwnCenter) {
  std::vector<ClientState> cs{fake_client(0, 1, {0, 0}, 0.1), fake_client(1, 1, {0, 0}, 0.9)};
  ClusterAssignment a;
  a.k = 2;
  a.membership = {{0, 0}, {1, 1}};
  const auto out = select_centers(a, cs);
  EXPECT_EQ(out.centers.at(0), 0u);
  EXPECT_EQ(out.centers.at(1), 1u);
}

TEST(DisruptWithin, POneNeverFires) {
  Rng rng(1);
  std::vector<bool> fired;
  for (int i = 0; i < 1000; ++i) {
    const auto out = disrupt_within(two_pairs(), {1.0, 1.0}, rng, &fired);
    EXPECT_EQ(out, two_pairs());
    EXPECT_EQ(std::count(fired.begin(), fired.end(), true), 0);
  }
}

TEST(DisruptWithin, PZeroAlwaysRedraws) {
  Rng rng(2);
  std::vector<bool> fired;
  std::size_t changed = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto out = disrupt_within(two_pairs(), {0.0, 1.0}, rng, &fired);
    EXPECT_EQ(std::count(fired.begin(), fired.end(), true), 2);
    EXPECT_EQ(out.membership, two_pairs().membership);
    EXPECT_NO_THROW(out.validate());
    changed += out.centers.at(0) != 0;
  }
  // Uniform over two members: the incumbent is kept about half the time.
  EXPECT_GT(changed, 400u);
  EXPECT_LT(changed, 600u);
}

TEST(DisruptWithin, SeededOverloadIsDeterministic) {
  EXPECT_EQ(disrupt_within(two_pairs(), {0.5, 0.5}, 9), disrupt_within(two_pairs(), {0.5, 0.5}, 9));
}

TEST(SwapAcross, POneLeavesAssignmentUnchanged) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(swap_across(two_pairs(), {1.0, 1.0}, rng), two_pairs());
}

TEST(SwapAcross, ForcedSwapExchangesCenters) {
  // With p2 = 0 both clusters fire and the second swap undoes the first, so
  // pick a stream in which only cluster 0 fires.
  ClusterAssignment a = two_pairs();
  Rng rng;
  std::vector<bool> fired;
  for (std::uint64_t seed = 0;; ++seed) {
    Rng probe(seed);
    const double r0 = uniform01(probe);
    (void)uniform_index(probe, 1);
    const double r1 = uniform01(probe);
    if (r0 > 0.5 && !(r1 > 0.5)) {
      rng.seed(seed);
      break;
    }
  }
  const auto out = swap_across(a, {1.0, 0.5}, rng, SwapMode::membership_exchange, &fired);
  EXPECT_EQ(fired, (std::vector<bool>{true, false}));
  EXPECT_EQ(out.members(0), (std::vector<std::size_t>{1, 2}));  // {C, B}
  EXPECT_EQ(out.members(1), (std::vector<std::size_t>{0, 3}));  // {A, D}
  EXPECT_EQ(out.centers.at(0), 2u);
  EXPECT_EQ(out.centers.at(1), 0u);
  EXPECT_EQ(out.sizes(), a.sizes());
}

TEST(SwapAcross, DesignationOnlyKeepsAssignment) {
  Rng rng(5);
  std::vector<bool> fired;
  const auto out = swap_across(two_pairs(), {1.0, 0.0}, rng, SwapMode::designation_only, &fired);
  EXPECT_EQ(out, two_pairs());
  EXPECT_EQ(fired, (std::vector<bool>{true, true}));
}

TEST(SwapAcross, BothFiringRestoresOriginal) {
  Rng rng(8);
  EXPECT_EQ(swap_across(two_pairs(), {1.0, 0.0}, rng), two_pairs());
}

TEST(SwapAcross, SingleClusterDrawsButNeverSwaps) {
  ClusterAssignment a;
  a.k = 1;
  a.membership = {{0, 0}, {1, 0}};
  a.centers = {{0, 1}};
  Rng rng(6);
  std::vector<bool> fired;
  EXPECT_EQ(swap_across(a, {1.0, 0.0}, rng, SwapMode::membership_exchange, &fired), a);
  EXPECT_EQ(fired, (std::vector<bool>{true}));
}

TEST(FedAvg, SingleMemberIsIdentity) {
  const std::vector<ClientState> one{fake_client(0, 5, {0.1, -2.0, 3.5, 7.0})};
  EXPECT_EQ(fedavg_aggregate(one, 0).params.flatten(), (std::vector<double>{0.1, -2.0, 3.5, 7.0}));
}

TEST(FedAvg, HandComputedWeightedMean) {
  const std::vector<ClientState> cs{fake_client(0, 1, {1, 2}), fake_client(1, 3, {3, 4})};
  const auto m = fedavg_aggregate(cs, 2);
  EXPECT_EQ(m.cluster_index, 2u);
  EXPECT_EQ(m.total_samples, 4u);
  const auto flat = m.params.flatten();
  EXPECT_NEAR(flat[0], 2.5, 1e-15);
  EXPECT_NEAR(flat[1], 3.5, 1e-15);
}

TEST(FedAvg, IdenticalMembersFixedPoint) {
  const std::vector<double> theta{0.3, -1.7, 2.2, 1e-3};
  const std::vector<ClientState> cs{fake_client(0, 3, theta), fake_client(1, 7, theta),
                                    fake_client(2, 11, theta)};
  const auto out = fedavg_aggregate(cs, 0).params.flatten();
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_NEAR(out[i], theta[i], 1e-12);
}

TEST(FedAvg, RejectsEmptyAndZeroWeight) {
  EXPECT_THROW(fedavg_aggregate(std::vector<ClientState>{}, 0), std::invalid_argument);
  const std::vector<ClientState> zero{fake_client(0, 0, {1, 1})};
  EXPECT_THROW(fedavg_aggregate(zero, 0), std::invalid_argument);
}

TEST(FedAvg, OracleHullPermutationAndLinearity) {
  std::mt19937_64 gen(41);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t members = 1 + gen() % 5;
    const std::size_t half = 1 + gen() % 25;
    std::vector<ClientState> cs;
    std::vector<std::vector<double>> flats;
    std::vector<double> sizes;
    for (std::size_t m = 0; m < members; ++m) {
      std::vector<double> f(2 * half);
      for (auto& v : f) v = u(gen);
      const std::size_t n = 1 + gen() % 100;
      cs.push_back(fake_client(m, n, f));
      flats.push_back(f);
      sizes.push_back(static_cast<double>(n));
    }
    const auto out = fedavg_aggregate(cs, 0).params.flatten();
    const auto oracle = testing::brute_force_weighted_sum(flats, sizes);
    for (std::size_t j = 0; j < out.size(); ++j) {
      EXPECT_NEAR(out[j], oracle[j], 1e-12);
      double lo = flats[0][j], hi = flats[0][j];
      for (const auto& f : flats) lo = std::min(lo, f[j]), hi = std::max(hi, f[j]);
      EXPECT_GE(out[j], lo - 1e-12);
      EXPECT_LE(out[j], hi + 1e-12);
    }
    auto shuffled = cs;
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    EXPECT_EQ(fedavg_aggregate(shuffled, 0).params.flatten(), out);

    // Linear in one member's parameters.
    auto scaled = cs;
    const double c = u(gen);
    scaled[0].params.scale(c);
    auto expect = flats;
    for (auto& v : expect[0]) v *= c;
    const auto lin = fedavg_aggregate(scaled, 0).params.flatten();
    const auto lin_oracle = testing::brute_force_weighted_sum(expect, sizes);
    for (std::size_t j = 0; j < lin.size(); ++j) EXPECT_NEAR(lin[j], lin_oracle[j], 1e-12);
  }
}

class BsaRoundTest : public ::testing::Test {
 protected:
  void SetUp() override {
    config_.input_dim = 4;
    config_.hidden_dims = {5};
    config_.num_classes = 3;
    PartitionSpec spec;
    spec.num_classes = 3;
    spec.counts = {{30, 5, 5}, {5, 30, 5}, {5, 5, 30}, {20, 20, 0}, {10, 10, 10}, {0, 5, 25}};
    const auto data = materialize(spec, 4, 3);
    const DenseMlp mlp(config_);
    for (const auto& d : data) {
      auto ds = std::make_shared<const ClientDataset>(d);
      clients_.push_back(local_round(make_client(ds, mlp.init_params(1), mlp), mlp, d.client_id));
    }
  }

  ClusterAssignment clustered(std::size_t k) const {
    std::vector<DistributionSummary> s;
    for (const auto& c : clients_) s.push_back(summarize(c));
    return kmeans(build_features(s), k, 0);
  }

  LearnerConfig config_;
  std::vector<ClientState> clients_;
};

TEST_F(BsaRoundTest, SingleClusterNoEventsIsFedAvg) {
  const auto res = run_bsa_round(clustered(1), clients_, {1.0, 1.0}, 5, DenseMlp(config_));
  const auto plain = fedavg_aggregate(clients_, 0);
  for (const auto& c : res.clients) {
    EXPECT_EQ(c.params, plain.params);
    EXPECT_EQ(c.cluster_id, 0u);
  }
}

TEST_F(BsaRoundTest, NoEventsIsDeterministicAcrossSeeds) {
  const auto a = clustered(3);
  const auto r1 = run_bsa_round(a, clients_, {1.0, 1.0}, 5, DenseMlp(config_));
  const auto r2 = run_bsa_round(a, clients_, {1.0, 1.0}, 77, DenseMlp(config_));
  EXPECT_EQ(r1.assignment, r2.assignment);
  for (std::size_t i = 0; i < r1.clients.size(); ++i) EXPECT_EQ(r1.clients[i].params, r2.clients[i].params);
}

TEST_F(BsaRoundTest, MembersHoldTheirClusterModel) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto res = run_bsa_round(clustered(3), clients_, {0.5, 0.5}, seed, DenseMlp(config_));
    EXPECT_NO_THROW(res.assignment.validate());
    std::size_t centers = 0;
    for (const auto& c : res.clients) {
      const auto k = *c.cluster_id;
      EXPECT_EQ(c.params, res.models[k].params);
      EXPECT_EQ(res.assignment.membership.at(c.client_id), k);
      centers += c.is_center;
    }
    EXPECT_EQ(centers, 3u);
  }
}

TEST_F(BsaRoundTest, ConservesMembership) {
  const auto before = clustered(3);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto res = run_bsa_round(before, clients_, {0.0, 0.0}, seed, DenseMlp(config_));
    EXPECT_EQ(res.assignment.sizes(), before.sizes());
    EXPECT_EQ(res.assignment.membership.size(), before.membership.size());
  }
}

}  // namespace
}  // namespace bsosl
