#pragma once

// Multi-round experiments for BSO-SL and its three baselines, the flat
// key/value config format, and the per-round metrics CSV.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "bsosl/bsa.hpp"
#include "bsosl/client.hpp"
#include "bsosl/coordinator.hpp"
#include "bsosl/data.hpp"
#include "bsosl/errors.hpp"
#include "bsosl/learner.hpp"
#include "bsosl/rng.hpp"

namespace bsosl {

enum class Algorithm { bso_sl, fedavg, local, centralized };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::bso_sl: return "bso-sl";
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::local: return "local";
    case Algorithm::centralized: return "centralized";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "bso-sl") return Algorithm::bso_sl;
  if (s == "fedavg") return Algorithm::fedavg;
  if (s == "local") return Algorithm::local;
  if (s == "centralized") return Algorithm::centralized;
  throw ConfigError("unknown algorithm '" + std::string(s) + "'");
}

struct SimConfig {
  Algorithm algorithm = Algorithm::bso_sl;
  std::size_t rounds = 30;
  LearnerConfig learner;
  PartitionSpec partition = partition_table1();
  std::size_t k = 3;
  BsaParams bsa;
  std::uint64_t seed = 0;
  SwapMode swap_mode = SwapMode::membership_exchange;
  /// Worker threads for local training. Results do not depend on it.
  std::size_t threads = 1;
  std::size_t kmeans_max_iters = 100;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    learner.validate();
    partition.validate();
    bsa.validate();
    if (partition.num_classes != learner.num_classes)
      throw ConfigError("partition has " + std::to_string(partition.num_classes) +
                        " classes but the learner has " + std::to_string(learner.num_classes));
    if (k < 1 || k > partition.num_clients())
      throw ConfigError("k = " + std::to_string(k) + " must be between 1 and num_clients (" +
                        std::to_string(partition.num_clients()) + ")");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

/// One client at the end of one round.
struct ClientRecord {
  std::size_t round = 0;  // 1-based
  std::size_t client_id = 0;
  std::optional<std::size_t> cluster_id;
  bool is_center = false;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;

  bool operator==(const ClientRecord&) const = default;
};

struct AggregationRecord {
  std::size_t round = 0;
  std::size_t cluster_index = 0;
  std::size_t members = 0;
  std::size_t total_samples = 0;

  bool operator==(const AggregationRecord&) const = default;
};

struct RunReport {
  std::vector<ClientRecord> per_round;
  std::vector<AggregationRecord> aggregations;
  /// Mean of the final round's per-client test accuracies.
  double final_avg_accuracy = 0.0;

  std::size_t rounds() const { return per_round.empty() ? 0 : per_round.back().round; }

  bool operator==(const RunReport&) const = default;
};

/// Thrown when training diverges mid-run; carries every round completed
/// before the failure.
class RunDiverged : public DivergenceError {
 public:
  RunDiverged(const DivergenceError& cause, std::size_t round, RunReport partial)
      : DivergenceError(cause), round_(round), partial_(std::move(partial)) {}

  std::size_t round() const { return round_; }
  const RunReport& partial_report() const { return partial_; }

 private:
  std::size_t round_;
  RunReport partial_;
};

/// Arithmetic mean of per-client accuracies.
inline double average_accuracy(std::span<const double> accs) {
  if (accs.empty()) throw std::invalid_argument("average_accuracy of an empty list");
  double s = 0.0;
  for (double a : accs) s += a;
  return s / static_cast<double>(accs.size());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. If any call throws,
/// the exception of the lowest failing index is rethrown after all workers
/// finish, matching what a sequential loop would report.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

using RoundObserver = std::function<void(std::size_t round, std::span<const ClientState> clients)>;

/// Runs config.rounds rounds of the configured algorithm. Per-round seeds
/// are derive_seed(seed, {purpose, round, client_id}).
template <Learner L>
RunReport run(const SimConfig& config, const L& learner, const RoundObserver& observer = {}) {
  config.validate();
  const auto datasets = materialize(config.partition, config.learner.input_dim,
                                    derive_seed(config.seed, {stream::kData}));
  const auto init = learner.init_params(derive_seed(config.seed, {stream::kInit}));

  std::vector<ClientState> clients;
  clients.reserve(datasets.size());
  for (const auto& ds : datasets)
    clients.push_back(make_client(std::make_shared<const ClientDataset>(ds), init, learner));

  LabeledBatch pooled;
  ParameterVector central = init;
  if (config.algorithm == Algorithm::centralized)
    for (const auto& ds : datasets) pooled.append(ds.train);

  RunReport report;
  for (std::size_t round = 1; round <= config.rounds; ++round) {
    try {
      if (config.algorithm == Algorithm::centralized) {
        auto fit = learner.fit(central, pooled, derive_seed(config.seed, {stream::kCentral, round}));
        central = std::move(fit.params);
        for (auto& c : clients) {
          c = apply_cluster_model(std::move(c), central, learner);
          c.train_loss = fit.train_loss;
        }
      } else {
        parallel_for(clients.size(), config.threads, [&](std::size_t i) {
          auto& c = clients[i];
          c = local_round(std::move(c), learner,
                          derive_seed(config.seed, {stream::kTrain, round, c.client_id}));
        });
      }

      if (config.algorithm == Algorithm::fedavg) {
        const auto model = fedavg_aggregate(std::span<const ClientState>(clients), 0);
        for (auto& c : clients) {
          c = apply_cluster_model(std::move(c), model.params, learner);
          c.cluster_id = 0;
        }
        report.aggregations.push_back({round, 0, clients.size(), model.total_samples});
      } else if (config.algorithm == Algorithm::bso_sl) {
        std::vector<DistributionSummary> summaries;
        for (const auto& c : clients) summaries.push_back(summarize(c));
        const auto features = build_features(summaries);
        const auto assignment =
            kmeans(features, config.k, derive_seed(config.seed, {stream::kCluster, round}),
                   config.kmeans_max_iters);
        auto res = run_bsa_round(assignment, std::move(clients), config.bsa,
                                 derive_seed(config.seed, {stream::kBsa, round}), learner,
                                 config.swap_mode);
        clients = std::move(res.clients);
        for (const auto& m : res.models)
          report.aggregations.push_back({round, m.cluster_index,
                                         res.assignment.members(m.cluster_index).size(),
                                         m.total_samples});
      }
    } catch (const DivergenceError& e) {
      if (!report.per_round.empty()) {
        std::vector<double> accs;
        for (const auto& r : report.per_round)
          if (r.round == round - 1) accs.push_back(r.test_accuracy);
        report.final_avg_accuracy = average_accuracy(accs);
      }
      throw RunDiverged(e, round, std::move(report));
    }

    std::vector<double> accs;
    for (const auto& c : clients) {
      const double test = learner.accuracy(c.params, c.dataset->test);
      accs.push_back(test);
      report.per_round.push_back(
          {round, c.client_id, c.cluster_id, c.is_center, c.train_loss, c.val_accuracy, test});
    }
    report.final_avg_accuracy = average_accuracy(accs);
    if (observer) observer(round, clients);
  }
  return report;
}

inline RunReport run(const SimConfig& config, const RoundObserver& observer = {}) {
  config.validate();
  return run(config, DenseMlp(config.learner), observer);
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr std::string_view kMetricsHeader =
    "round,client_id,cluster_id,is_center,train_loss,val_accuracy,test_accuracy";
inline constexpr std::string_view kSummaryPrefix = "#final_avg_accuracy,";

/// Per-round table followed by a single "#final_avg_accuracy,<value>" line.
inline void write_metrics(std::ostream& os, const RunReport& report) {
  os << kMetricsHeader << '\n';
  for (const auto& r : report.per_round) {
    os << r.round << ',' << r.client_id << ',';
    if (r.cluster_id) os << *r.cluster_id;
    os << ',' << (r.is_center ? 1 : 0) << ',' << format_double(r.train_loss) << ','
       << format_double(r.val_accuracy) << ',' << format_double(r.test_accuracy) << '\n';
  }
  os << kSummaryPrefix << format_double(report.final_avg_accuracy) << '\n';
}

inline void emit_metrics(const RunReport& report, const std::filesystem::path& path) {
  if (report.per_round.empty()) throw std::invalid_argument("refusing to write an empty report");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_metrics(os, report);
  os.flush();
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

/// Parses a metrics CSV. final_avg_accuracy is recomputed from the last
/// round's rows and checked against the summary line when present.
inline RunReport read_metrics(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw IoError("metrics header does not match '" + std::string(kMetricsHeader) + "'");
  RunReport report;
  std::optional<double> summary;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      if (line.starts_with(kSummaryPrefix)) {
        summary = parse_double(std::string_view(line).substr(kSummaryPrefix.size()));
        continue;
      }
      const auto f = split_fields(line);
      if (f.size() != 7) throw std::invalid_argument("expected 7 fields");
      ClientRecord r;
      r.round = parse_size(f[0]);
      r.client_id = parse_size(f[1]);
      if (!f[2].empty()) r.cluster_id = parse_size(f[2]);
      if (f[3] != "0" && f[3] != "1") throw std::invalid_argument("is_center must be 0 or 1");
      r.is_center = f[3] == "1";
      r.train_loss = parse_double(f[4]);
      r.val_accuracy = parse_double(f[5]);
      r.test_accuracy = parse_double(f[6]);
      report.per_round.push_back(r);
    } catch (const std::invalid_argument& e) {
      throw IoError("metrics line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (report.per_round.empty()) throw IoError("metrics file has no rows");
  std::vector<double> accs;
  for (const auto& r : report.per_round)
    if (r.round == report.rounds()) accs.push_back(r.test_accuracy);
  report.final_avg_accuracy = average_accuracy(accs);
  if (summary && *summary != report.final_avg_accuracy)
    throw IoError("summary line disagrees with the final-round rows");
  return report;
}

inline RunReport load_metrics(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  try {
    return read_metrics(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Config files: one "key = value" per line, '#' starts a comment.

using ConfigEntries = std::map<std::string, std::string, std::less<>>;

inline constexpr std::string_view kConfigKeys[] = {
    "algorithm",  "rounds",        "seed",          "k",           "p1",
    "p2",         "swap_mode",     "threads",       "kmeans_max_iters",
    "input_dim",  "hidden_dims",   "num_classes",   "learning_rate",
    "batch_size", "local_epochs",  "scenario",      "num_clients", "total_samples",
    "alpha",      "split",
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool is_known_key(std::string_view key) {
  return std::find(std::begin(kConfigKeys), std::end(kConfigKeys), key) != std::end(kConfigKeys);
}

}  // namespace detail

inline ConfigEntries parse_config_entries(std::istream& is) {
  ConfigEntries out;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (!detail::is_known_key(key))
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" +
                        std::string(key) + "'");
    if (!out.emplace(std::string(key), std::string(value)).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                        std::string(key) + "'");
  }
  return out;
}

inline ConfigEntries load_config_entries(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse_config_entries(is);
}

/// Builds a validated SimConfig. Missing keys take the SimConfig defaults;
/// a dirichlet partition is drawn from the run seed.
inline SimConfig make_sim_config(const ConfigEntries& entries) {
  for (const auto& [key, value] : entries)
    if (!detail::is_known_key(key)) throw ConfigError("unknown key '" + key + "'");

  auto get = [&](std::string_view key) -> std::optional<std::string_view> {
    auto it = entries.find(key);
    if (it == entries.end()) return std::nullopt;
    return std::string_view(it->second);
  };
  auto as_size = [&](std::string_view key, std::size_t fallback) {
    auto v = get(key);
    if (!v) return fallback;
    try {
      return parse_size(*v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(key) + ": " + e.what());
    }
  };
  auto as_double = [&](std::string_view key, double fallback) {
    auto v = get(key);
    if (!v) return fallback;
    try {
      return parse_double(*v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(key) + ": " + e.what());
    }
  };
  auto as_list = [&](std::string_view key) {
    std::vector<std::string_view> items;
    if (auto v = get(key); v && !v->empty())
      for (auto f : split_fields(*v)) items.push_back(detail::trim(f));
    return items;
  };

  SimConfig c;
  if (auto v = get("algorithm")) c.algorithm = parse_algorithm(*v);
  c.rounds = as_size("rounds", c.rounds);
  c.seed = as_size("seed", c.seed);
  c.k = as_size("k", c.k);
  c.bsa.p1 = as_double("p1", c.bsa.p1);
  c.bsa.p2 = as_double("p2", c.bsa.p2);
  if (auto v = get("swap_mode")) c.swap_mode = parse_swap_mode(*v);
  c.threads = as_size("threads", c.threads);
  c.kmeans_max_iters = as_size("kmeans_max_iters", c.kmeans_max_iters);

  c.learner.input_dim = as_size("input_dim", c.learner.input_dim);
  if (get("hidden_dims")) {
    c.learner.hidden_dims.clear();
    for (auto item : as_list("hidden_dims")) {
      try {
        c.learner.hidden_dims.push_back(parse_size(item));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("hidden_dims: ") + e.what());
      }
    }
  }
  c.learner.num_classes = as_size("num_classes", c.learner.num_classes);
  c.learner.learning_rate = as_double("learning_rate", c.learner.learning_rate);
  c.learner.batch_size = as_size("batch_size", c.learner.batch_size);
  c.learner.local_epochs = as_size("local_epochs", c.learner.local_epochs);

  const Scenario scenario = get("scenario") ? parse_scenario(*get("scenario")) : Scenario::table1;
  const std::size_t num_clients = as_size("num_clients", 14);
  const std::size_t total = as_size("total_samples", 3657);
  switch (scenario) {
    case Scenario::table1:
      for (auto key : {"num_clients", "total_samples", "alpha"})
        if (get(key)) throw ConfigError(std::string(key) + " does not apply to scenario table1");
      c.partition = partition_table1();
      break;
    case Scenario::dirichlet:
      c.partition = partition_dirichlet(num_clients, c.learner.num_classes, total,
                                        as_double("alpha", 0.5),
                                        derive_seed(c.seed, {stream::kPartition}));
      break;
    case Scenario::uniform:
      if (get("alpha")) throw ConfigError("alpha only applies to scenario dirichlet");
      c.partition = partition_uniform(num_clients, c.learner.num_classes, total);
      break;
  }
  if (get("split")) {
    const auto parts = as_list("split");
    if (parts.size() != 3) throw ConfigError("split must be train,val,test");
    try {
      c.partition.split = {parse_double(parts[0]), parse_double(parts[1]), parse_double(parts[2])};
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("split: ") + e.what());
    }
  }
  c.validate();
  return c;
}

}  // namespace bsosl
