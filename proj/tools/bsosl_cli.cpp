// Command-line front end: run experiments, dump partitions, inspect reports.
//
//   bsosl run --config exp.cfg [--seed N] [--out DIR] [--algo bso-sl|fedavg|local|centralized]
//   bsosl partition --scenario table1 --out data.csv
//   bsosl inspect DIR/metrics.csv
//
// Exit codes: 0 success, 2 configuration error, 3 divergence, 1 anything else.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "bsosl/bsosl.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::string> algo;
  std::optional<std::size_t> threads;
};

struct PartitionOptions {
  std::string scenario = "table1";
  std::string out;
  std::uint64_t seed = 0;
  std::size_t input_dim = 16;
  std::size_t num_clients = 14;
  std::size_t num_classes = 5;
  std::size_t total = 3657;
  double alpha = 0.5;
};

int do_run(const RunOptions& opt) {
  auto entries = bsosl::load_config_entries(opt.config);
  if (opt.seed) entries["seed"] = std::to_string(*opt.seed);
  if (opt.algo) entries["algorithm"] = *opt.algo;
  if (opt.threads) entries["threads"] = std::to_string(*opt.threads);
  const auto config = bsosl::make_sim_config(entries);

  std::filesystem::create_directories(opt.out);
  const auto path = std::filesystem::path(opt.out) / "metrics.csv";
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto report = bsosl::run(config);
    bsosl::emit_metrics(report, path);
    const std::chrono::duration<double> secs = std::chrono::steady_clock::now() - start;
    std::printf("%s: %zu rounds, %zu clients, avg accuracy %.4f (%.1fs) -> %s\n",
                std::string(bsosl::to_string(config.algorithm)).c_str(), config.rounds,
                config.partition.num_clients(), report.final_avg_accuracy, secs.count(),
                path.string().c_str());
  } catch (const bsosl::RunDiverged& e) {
    if (!e.partial_report().per_round.empty()) bsosl::emit_metrics(e.partial_report(), path);
    std::fprintf(stderr, "diverged in round %zu: %s\n", e.round(), e.what());
    return kExitDivergence;
  }
  return 0;
}

int do_partition(const PartitionOptions& opt) {
  bsosl::PartitionSpec spec;
  switch (bsosl::parse_scenario(opt.scenario)) {
    case bsosl::Scenario::table1: spec = bsosl::partition_table1(); break;
    case bsosl::Scenario::dirichlet:
      spec = bsosl::partition_dirichlet(opt.num_clients, opt.num_classes, opt.total, opt.alpha,
                                        bsosl::derive_seed(opt.seed, {bsosl::stream::kPartition}));
      break;
    case bsosl::Scenario::uniform:
      spec = bsosl::partition_uniform(opt.num_clients, opt.num_classes, opt.total);
      break;
  }
  // Same data stream as `run` with the same seed.
  const auto clients =
      bsosl::materialize(spec, opt.input_dim, bsosl::derive_seed(opt.seed, {bsosl::stream::kData}));
  std::ofstream os(opt.out, std::ios::binary);
  if (!os) throw bsosl::IoError("cannot open '" + opt.out + "' for writing");
  bsosl::write_dataset_table(os, clients);
  if (!os.flush()) throw bsosl::IoError("write to '" + opt.out + "' failed");
  std::printf("%zu clients, %zu samples -> %s\n", clients.size(), spec.total(), opt.out.c_str());
  return 0;
}

int do_inspect(const std::string& path) {
  const auto report = bsosl::load_metrics(path);
  const auto last = report.rounds();
  std::printf("rounds: %zu\n", last);
  std::printf("%-10s %-8s %-7s %-12s %-12s\n", "client_id", "cluster", "center", "val_acc", "test_acc");
  std::size_t clients = 0;
  for (const auto& r : report.per_round) {
    if (r.round != last) continue;
    ++clients;
    std::printf("%-10zu %-8s %-7s %-12.4f %-12.4f\n", r.client_id,
                r.cluster_id ? std::to_string(*r.cluster_id).c_str() : "-", r.is_center ? "yes" : "",
                r.val_accuracy, r.test_accuracy);
  }
  std::printf("clients: %zu\n", clients);
  std::printf("average accuracy: %.17g\n", report.final_avg_accuracy);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BSO-SL swarm-learning simulator"};
  app.require_subcommand(1);

  RunOptions run_opt;
  auto* run = app.add_subcommand("run", "Run one experiment and write <out>/metrics.csv");
  run->add_option("--config", run_opt.config, "Key/value config file")->required();
  run->add_option("--seed", run_opt.seed, "Override the config seed");
  run->add_option("--out", run_opt.out, "Output directory")->capture_default_str();
  run->add_option("--algo", run_opt.algo, "Override the algorithm")
      ->check(CLI::IsMember({"bso-sl", "fedavg", "local", "centralized"}));
  run->add_option("--threads", run_opt.threads, "Worker threads for local training");

  PartitionOptions part_opt;
  auto* part = app.add_subcommand("partition", "Materialize a partition and dump it as CSV");
  part->add_option("--scenario", part_opt.scenario, "table1, dirichlet or uniform")
      ->capture_default_str();
  part->add_option("--out", part_opt.out, "Output CSV path")->required();
  part->add_option("--seed", part_opt.seed, "Generation seed")->capture_default_str();
  part->add_option("--input-dim", part_opt.input_dim, "Feature count")->capture_default_str();
  part->add_option("--num-clients", part_opt.num_clients, "dirichlet/uniform only");
  part->add_option("--num-classes", part_opt.num_classes, "dirichlet/uniform only");
  part->add_option("--total", part_opt.total, "dirichlet/uniform only");
  part->add_option("--alpha", part_opt.alpha, "dirichlet only");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Summarize a metrics CSV");
  inspect->add_option("report", inspect_path, "metrics.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return do_run(run_opt);
    if (*part) return do_partition(part_opt);
    if (*inspect) return do_inspect(inspect_path);
  } catch (const bsosl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
