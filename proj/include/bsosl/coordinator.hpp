#pragma once

// The coordinator only assigns neighbours: it sees distribution summaries,
// never parameters, and groups clients with Lloyd's k-means.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsosl/client.hpp"
#include "bsosl/errors.hpp"
#include "bsosl/learner.hpp"

namespace bsosl {

/// Row per client: flattened (mean, variance) pairs, z-scored per column.
struct SummaryFeatureMatrix {
  std::vector<std::size_t> client_ids;
  Matrix features;
};

/// Client-to-cluster map plus one designated center per cluster.
struct ClusterAssignment {
  std::size_t k = 0;
  std::map<std::size_t, std::size_t> membership;  // client_id -> cluster
  std::map<std::size_t, std::size_t> centers;     // cluster -> client_id

  /// Member ids of a cluster, ascending.
  std::vector<std::size_t> members(std::size_t cluster) const {
    std::vector<std::size_t> out;
    for (const auto& [id, c] : membership)
      if (c == cluster) out.push_back(id);
    return out;
  }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out(k, 0);
    for (const auto& [id, c] : membership) ++out[c];
    return out;
  }

  /// Throws std::logic_error if a cluster is empty, an index is out of
  /// range, or a filled center is not a member of its cluster.
  void validate() const {
    for (const auto& [id, c] : membership)
      if (c >= k) throw std::logic_error("client " + std::to_string(id) + " in cluster out of range");
    for (auto s : sizes())
      if (s == 0) throw std::logic_error("empty cluster");
    for (const auto& [c, id] : centers) {
      auto it = membership.find(id);
      if (c >= k || it == membership.end() || it->second != c)
        throw std::logic_error("center of cluster " + std::to_string(c) + " is not a member");
    }
  }

  bool operator==(const ClusterAssignment&) const = default;
};

inline SummaryFeatureMatrix build_features(std::span<const DistributionSummary> summaries) {
  if (summaries.empty()) throw std::invalid_argument("build_features needs at least one summary");
  const std::size_t tensors = summaries.front().per_layer.size();
  for (const auto& s : summaries)
    if (s.per_layer.size() != tensors)
      throw ShapeError("summary of client " + std::to_string(s.client_id) + " has " +
                       std::to_string(s.per_layer.size()) + " tensors, expected " +
                       std::to_string(tensors));

  SummaryFeatureMatrix out;
  out.features = Matrix(summaries.size(), 2 * tensors);
  for (std::size_t r = 0; r < summaries.size(); ++r) {
    out.client_ids.push_back(summaries[r].client_id);
    for (std::size_t t = 0; t < tensors; ++t) {
      out.features(r, 2 * t) = summaries[r].per_layer[t].mean;
      out.features(r, 2 * t + 1) = summaries[r].per_layer[t].variance;
    }
  }

  const double n = static_cast<double>(summaries.size());
  for (std::size_t c = 0; c < out.features.cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < out.features.rows; ++r) mean += out.features(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < out.features.rows; ++r) {
      const double d = out.features(r, c) - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / n);
    for (std::size_t r = 0; r < out.features.rows; ++r)
      out.features(r, c) = sd > 0.0 ? (out.features(r, c) - mean) / sd : 0.0;
  }
  return out;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

struct KMeansResult {
  ClusterAssignment assignment;
  /// k x dims, row c is the mean of cluster c.
  Matrix centroids;
  /// Objective after each completed Lloyd iteration, starting with the
  /// assignment produced from the initial centroids.
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
  bool converged = false;

  double objective() const { return objective_trace.back(); }
};

namespace detail {

inline Matrix cluster_means(const Matrix& x, std::span<const std::size_t> assign, std::size_t k) {
  Matrix m(k, x.cols);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t r = 0; r < x.rows; ++r) {
    ++count[assign[r]];
    for (std::size_t d = 0; d < x.cols; ++d) m(assign[r], d) += x(r, d);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t d = 0; d < x.cols; ++d) m(c, d) /= static_cast<double>(count[c]);
  return m;
}

inline double kmeans_objective(const Matrix& x, std::span<const std::size_t> assign,
                               const Matrix& centroids) {
  double j = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) j += squared_distance(x.row(r), centroids.row(assign[r]));
  return j;
}

/// Refills empty clusters, one at a time in index order, with the point
/// farthest from its current centroid among clusters that can spare one.
inline void repair_empty(const Matrix& x, std::vector<std::size_t>& assign,
                         const Matrix& centroids, std::size_t k) {
  std::vector<std::size_t> count(k, 0);
  for (auto a : assign) ++count[a];
  for (std::size_t e = 0; e < k; ++e) {
    if (count[e] > 0) continue;
    std::size_t pick = x.rows;
    double best = -1.0;
    for (std::size_t r = 0; r < x.rows; ++r) {
      if (count[assign[r]] < 2) continue;
      const double d = squared_distance(x.row(r), centroids.row(assign[r]));
      if (d > best) best = d, pick = r;
    }
    --count[assign[pick]];
    assign[pick] = e;
    ++count[e];
  }
}

}  // namespace detail

/// Lloyd's k-means on squared Euclidean distance.
///
/// Initial centroids are chosen greedily by farthest point: the row of the
/// lowest client id first, then repeatedly the row farthest from its nearest
/// chosen centroid (ties to the lower id). A point only changes cluster when
/// another centroid is strictly closer. Iteration stops when assignments are
/// stable or after max_iters. The procedure is fully deterministic; seed is
/// accepted so callers can treat all coordinator steps uniformly.
inline KMeansResult kmeans_detailed(const SummaryFeatureMatrix& features, std::size_t k,
                                    std::uint64_t /*seed*/, std::size_t max_iters = 100) {
  const std::size_t n = features.features.rows;
  if (features.client_ids.size() != n) throw ShapeError("feature rows and client ids disagree");
  if (k < 1 || k > n)
    throw ConfigError("k = " + std::to_string(k) + " must be between 1 and the number of clients (" +
                      std::to_string(n) + ")");

  // Work in ascending client id order so every tie rule is "lowest id".
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return features.client_ids[a] < features.client_ids[b];
  });
  Matrix x(n, features.features.cols);
  for (std::size_t r = 0; r < n; ++r) {
    auto src = features.features.row(order[r]);
    std::copy(src.begin(), src.end(), x.row(r).begin());
  }

  Matrix centroids(k, x.cols);
  {
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t pick = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
      for (std::size_t r = 0; r < n; ++r)
        nearest[r] = std::min(nearest[r], squared_distance(x.row(r), centroids.row(c)));
      pick = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
    }
  }

  auto nearest_cluster = [&](std::size_t r, std::optional<std::size_t> current) {
    std::size_t best = current.value_or(0);
    double best_d = squared_distance(x.row(r), centroids.row(best));
    for (std::size_t c = 0; c < k; ++c) {
      const double d = squared_distance(x.row(r), centroids.row(c));
      if (d < best_d) best_d = d, best = c;
    }
    return best;
  };

  KMeansResult res;
  std::vector<std::size_t> assign(n);
  for (std::size_t r = 0; r < n; ++r) assign[r] = nearest_cluster(r, std::nullopt);
  detail::repair_empty(x, assign, centroids, k);
  centroids = detail::cluster_means(x, assign, k);
  res.objective_trace.push_back(detail::kmeans_objective(x, assign, centroids));

  for (std::size_t it = 0; it < max_iters; ++it) {
    auto next = assign;
    for (std::size_t r = 0; r < n; ++r) next[r] = nearest_cluster(r, assign[r]);
    detail::repair_empty(x, next, centroids, k);
    if (next == assign) {
      res.converged = true;
      break;
    }
    assign = std::move(next);
    centroids = detail::cluster_means(x, assign, k);
    res.objective_trace.push_back(detail::kmeans_objective(x, assign, centroids));
    ++res.iterations;
  }

  res.assignment.k = k;
  for (std::size_t r = 0; r < n; ++r) res.assignment.membership[features.client_ids[order[r]]] = assign[r];
  res.centroids = std::move(centroids);
  return res;
}

inline ClusterAssignment kmeans(const SummaryFeatureMatrix& features, std::size_t k,
                                std::uint64_t seed, std::size_t max_iters = 100) {
  return kmeans_detailed(features, k, seed, max_iters).assignment;
}

}  // namespace bsosl
