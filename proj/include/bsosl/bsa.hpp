#pragma once

// Brain Storm Aggregation: pick each cluster's best validator as its center,
// perturb the centers at random (replacement within a cluster, exchange
// across clusters), then FedAvg inside every cluster and hand the result back
// to its members.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bsosl/client.hpp"
#include "bsosl/coordinator.hpp"
#include "bsosl/errors.hpp"
#include "bsosl/learner.hpp"
#include "bsosl/rng.hpp"

namespace bsosl {

/// Event probabilities are 1 - p1 (replace a center) and 1 - p2 (swap two
/// centers), since an event fires on r > p with r ~ U[0,1).
struct BsaParams {
  double p1 = 0.9;
  double p2 = 0.8;

  void validate() const {
    if (!(p1 >= 0.0 && p1 <= 1.0)) throw ConfigError("p1 must lie in [0, 1]");
    if (!(p2 >= 0.0 && p2 <= 1.0)) throw ConfigError("p2 must lie in [0, 1]");
  }
};

enum class SwapMode {
  /// Swapped centers change clusters and lead their new cluster.
  membership_exchange,
  /// Swap draws are made and counted but memberships and centers stay put.
  designation_only,
};

inline std::string_view to_string(SwapMode m) {
  return m == SwapMode::membership_exchange ? "membership-exchange" : "designation-only";
}

inline SwapMode parse_swap_mode(std::string_view s) {
  if (s == "membership-exchange") return SwapMode::membership_exchange;
  if (s == "designation-only") return SwapMode::designation_only;
  throw ConfigError("unknown swap_mode '" + std::string(s) + "'");
}

struct ClusterModel {
  std::size_t cluster_index = 0;
  ParameterVector params;
  /// Sum of member train-split sizes.
  std::size_t total_samples = 0;
};

/// Center of each cluster = member with the highest val_accuracy, ties to the
/// lowest client id.
inline ClusterAssignment select_centers(ClusterAssignment assignment,
                                        std::span<const ClientState> clients) {
  std::map<std::size_t, const ClientState*> by_id;
  for (const auto& c : clients) by_id[c.client_id] = &c;
  assignment.centers.clear();
  for (std::size_t k = 0; k < assignment.k; ++k) {
    const ClientState* best = nullptr;
    for (auto id : assignment.members(k)) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw std::invalid_argument("no state for client " + std::to_string(id));
      if (!best || it->second->val_accuracy > best->val_accuracy) best = it->second;
    }
    if (best) assignment.centers[k] = best->client_id;
  }
  return assignment;
}

/// For each cluster in index order: draw r1; if r1 > p1 the center becomes a
/// uniformly drawn member (possibly the incumbent). fired, when given,
/// receives one flag per cluster.
inline ClusterAssignment disrupt_within(ClusterAssignment assignment, const BsaParams& params,
                                        Rng& rng, std::vector<bool>* fired = nullptr) {
  if (fired) fired->assign(assignment.k, false);
  for (std::size_t k = 0; k < assignment.k; ++k) {
    const double r1 = uniform01(rng);
    if (!(r1 > params.p1)) continue;
    const auto members = assignment.members(k);
    assignment.centers[k] = members[uniform_index(rng, members.size())];
    if (fired) (*fired)[k] = true;
  }
  return assignment;
}

inline ClusterAssignment disrupt_within(ClusterAssignment assignment, const BsaParams& params,
                                        std::uint64_t seed) {
  Rng rng(seed);
  return disrupt_within(std::move(assignment), params, rng);
}

/// For each cluster in index order: draw r2; if r2 > p2 and there is another
/// cluster, pick a partner uniformly among the other k-1 clusters and
/// exchange the two centers. In membership-exchange mode each center moves
/// into the other cluster and leads it, so cluster sizes are unchanged.
inline ClusterAssignment swap_across(ClusterAssignment assignment, const BsaParams& params,
                                     Rng& rng, SwapMode mode = SwapMode::membership_exchange,
                                     std::vector<bool>* fired = nullptr) {
  if (fired) fired->assign(assignment.k, false);
  for (std::size_t k = 0; k < assignment.k; ++k) {
    const double r2 = uniform01(rng);
    if (!(r2 > params.p2)) continue;
    if (fired) (*fired)[k] = true;
    if (assignment.k < 2) continue;
    std::size_t partner = uniform_index(rng, assignment.k - 1);
    if (partner >= k) ++partner;
    if (mode == SwapMode::designation_only) continue;
    const std::size_t a = assignment.centers.at(k);
    const std::size_t b = assignment.centers.at(partner);
    assignment.membership[a] = partner;
    assignment.membership[b] = k;
    assignment.centers[k] = b;
    assignment.centers[partner] = a;
  }
  return assignment;
}

inline ClusterAssignment swap_across(ClusterAssignment assignment, const BsaParams& params,
                                     std::uint64_t seed,
                                     SwapMode mode = SwapMode::membership_exchange) {
  Rng rng(seed);
  return swap_across(std::move(assignment), params, rng, mode);
}

/// Sample-weighted average of member parameters, weights |train_h| / sum.
/// Members are summed in ascending client id order whatever order they are
/// passed in, so the result is exactly permutation-invariant.
inline ClusterModel fedavg_aggregate(std::vector<const ClientState*> members,
                                     std::size_t cluster_index) {
  if (members.empty()) throw std::invalid_argument("fedavg_aggregate needs at least one member");
  std::stable_sort(members.begin(), members.end(),
                   [](const ClientState* a, const ClientState* b) { return a->client_id < b->client_id; });
  std::size_t total = 0;
  for (const auto* m : members) {
    if (!m->params.same_shape(members.front()->params))
      throw ShapeError("client " + std::to_string(m->client_id) + " has a different parameter shape");
    total += m->train_size();
  }
  if (total == 0)
    throw std::invalid_argument("cluster " + std::to_string(cluster_index) +
                                " has no training samples to weight by");

  ClusterModel out{cluster_index, ParameterVector(members.front()->params.shapes()), total};
  for (const auto* m : members) {
    const double w = static_cast<double>(m->train_size()) / static_cast<double>(total);
    out.params.axpy(w, m->params);
  }
  return out;
}

inline ClusterModel fedavg_aggregate(std::span<const ClientState> members, std::size_t cluster_index) {
  std::vector<const ClientState*> ptrs;
  ptrs.reserve(members.size());
  for (const auto& m : members) ptrs.push_back(&m);
  return fedavg_aggregate(std::move(ptrs), cluster_index);
}

struct BsaEvents {
  std::vector<bool> disrupted;
  std::vector<bool> swapped;
};

struct BsaRoundResult {
  std::vector<ClientState> clients;
  ClusterAssignment assignment;
  std::vector<ClusterModel> models;
  BsaEvents events;
};

/// One full aggregation step after clustering: select_centers, disrupt_within,
/// swap_across, per-cluster FedAvg, redistribution. All draws come from one
/// stream seeded by seed, r1 draws first and r2 draws second.
template <Learner L>
BsaRoundResult run_bsa_round(const ClusterAssignment& assignment, std::vector<ClientState> clients,
                             const BsaParams& params, std::uint64_t seed, const L& learner,
                             SwapMode mode = SwapMode::membership_exchange) {
  params.validate();
  assignment.validate();
  std::sort(clients.begin(), clients.end(),
            [](const ClientState& a, const ClientState& b) { return a.client_id < b.client_id; });

  BsaRoundResult out;
  Rng rng(seed);
  auto a = select_centers(assignment, clients);
  a = disrupt_within(std::move(a), params, rng, &out.events.disrupted);
  a = swap_across(std::move(a), params, rng, mode, &out.events.swapped);

  std::vector<std::vector<const ClientState*>> groups(a.k);
  for (const auto& c : clients) groups[a.membership.at(c.client_id)].push_back(&c);
  for (std::size_t k = 0; k < a.k; ++k) out.models.push_back(fedavg_aggregate(groups[k], k));

  out.clients.reserve(clients.size());
  for (auto& c : clients) {
    const std::size_t k = a.membership.at(c.client_id);
    auto next = apply_cluster_model(std::move(c), out.models[k].params, learner);
    next.cluster_id = k;
    next.is_center = a.centers.at(k) == next.client_id;
    out.clients.push_back(std::move(next));
  }
  out.assignment = std::move(a);
  return out;
}

}  // namespace bsosl
