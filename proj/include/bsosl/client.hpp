#pragma once

// Per-client protocol steps. A client trains locally, publishes only a
// per-tensor (mean, variance) summary and its validation accuracy to the
// coordinator, and adopts whatever model its cluster aggregates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <limits>
#include <span>
#include <vector>

#include "bsosl/data.hpp"
#include "bsosl/errors.hpp"
#include "bsosl/learner.hpp"

namespace bsosl {

struct ClientState {
  std::size_t client_id = 0;
  std::shared_ptr<const ClientDataset> dataset;
  ParameterVector params;
  /// Accuracy of params on the validation split.
  double val_accuracy = 0.0;
  /// Loss of the last local round; NaN before the first one.
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<std::size_t> cluster_id;
  bool is_center = false;

  std::size_t train_size() const { return dataset ? dataset->train.size() : 0; }
};

template <Learner L>
ClientState make_client(std::shared_ptr<const ClientDataset> dataset, ParameterVector params,
                        const L& learner) {
  ClientState s;
  s.client_id = dataset->client_id;
  s.dataset = std::move(dataset);
  s.params = std::move(params);
  s.val_accuracy = learner.accuracy(s.params, s.dataset->val);
  return s;
}

/// Trains on the train split and refreshes val_accuracy. A divergence is
/// rethrown tagged with this client's id.
template <Learner L>
ClientState local_round(ClientState state, const L& learner, std::uint64_t seed) {
  try {
    auto fit = learner.fit(state.params, state.dataset->train, seed);
    state.params = std::move(fit.params);
    state.train_loss = fit.train_loss;
  } catch (const DivergenceError& e) {
    throw e.with_client(state.client_id);
  }
  state.val_accuracy = learner.accuracy(state.params, state.dataset->val);
  return state;
}

inline ClientState local_round(ClientState state, const LearnerConfig& config,
                               std::uint64_t seed) {
  return local_round(std::move(state), DenseMlp(config), seed);
}

struct TensorMoments {
  double mean = 0.0;
  double variance = 0.0;

  bool operator==(const TensorMoments&) const = default;
};

/// What a client uploads for clustering: one (mean, variance) pair per
/// parameter tensor, in flatten order.
struct DistributionSummary {
  std::size_t client_id = 0;
  std::vector<TensorMoments> per_layer;

  bool operator==(const DistributionSummary&) const = default;
};

/// Mean and population variance (divide by n), two-pass.
inline TensorMoments tensor_moments(std::span<const double> t) {
  if (t.empty()) return {};
  const double n = static_cast<double>(t.size());
  double sum = 0.0;
  for (double v : t) sum += v;
  const double mean = sum / n;
  double ss = 0.0;
  for (double v : t) ss += (v - mean) * (v - mean);
  return {mean, ss / n};
}

inline DistributionSummary summarize(std::size_t client_id, const ParameterVector& params) {
  DistributionSummary s{client_id, {}};
  s.per_layer.reserve(params.tensor_count());
  params.for_each_tensor([&](std::span<const double> t) { s.per_layer.push_back(tensor_moments(t)); });
  return s;
}

inline DistributionSummary summarize(const ClientState& state) {
  return summarize(state.client_id, state.params);
}

/// Replaces the client's parameters with its cluster's model.
template <Learner L>
ClientState apply_cluster_model(ClientState state, const ParameterVector& global_params,
                                const L& learner) {
  if (!state.params.same_shape(global_params))
    throw ShapeError("cluster model shape does not match client " +
                     std::to_string(state.client_id));
  state.params = global_params;
  state.val_accuracy = learner.accuracy(state.params, state.dataset->val);
  return state;
}

inline ClientState apply_cluster_model(ClientState state, const ParameterVector& global_params) {
  if (!state.params.same_shape(global_params))
    throw ShapeError("cluster model shape does not match client " +
                     std::to_string(state.client_id));
  state.params = global_params;
  state.val_accuracy = evaluate_accuracy(state.params, state.dataset->val);
  return state;
}

}  // namespace bsosl
