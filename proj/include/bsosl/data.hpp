#pragma once

// Synthetic class-blob data, non-IID client partitions and per-client
// train/val/test splits, plus a flat CSV dump of a materialized federation.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bsosl/errors.hpp"
#include "bsosl/learner.hpp"
#include "bsosl/rng.hpp"

namespace bsosl {

/// Distance between any two class anchors, in units of the blob scale.
inline constexpr double kClassSeparation = 4.0;
/// Standard deviation of each isotropic class blob.
inline constexpr double kBlobScale = 1.0;
/// Length of each client's feature offset, relative to kClassSeparation.
inline constexpr double kClientShiftFraction = 0.25;

struct Sample {
  std::vector<double> features;
  std::size_t label = 0;
};

enum class Scenario { table1, dirichlet, uniform };

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::table1: return "table1";
    case Scenario::dirichlet: return "dirichlet";
    case Scenario::uniform: return "uniform";
  }
  return "?";
}

inline Scenario parse_scenario(std::string_view s) {
  if (s == "table1") return Scenario::table1;
  if (s == "dirichlet") return Scenario::dirichlet;
  if (s == "uniform") return Scenario::uniform;
  throw ConfigError("unknown scenario '" + std::string(s) + "'");
}

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Per-client, per-class sample counts plus how each client splits its data.
struct PartitionSpec {
  Scenario scenario = Scenario::table1;
  std::size_t num_classes = 5;
  /// counts[client][class]
  std::vector<std::vector<std::size_t>> counts;
  double alpha = 0.0;
  SplitFractions split;

  std::size_t num_clients() const { return counts.size(); }

  std::size_t client_total(std::size_t client) const {
    return std::accumulate(counts[client].begin(), counts[client].end(), std::size_t{0});
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) n += client_total(c);
    return n;
  }

  std::size_t class_total(std::size_t cls) const {
    std::size_t n = 0;
    for (const auto& row : counts) n += row[cls];
    return n;
  }

  void validate() const {
    if (counts.empty()) throw ConfigError("partition has no clients");
    if (num_classes < 2) throw ConfigError("partition needs at least 2 classes");
    for (const auto& row : counts)
      if (row.size() != num_classes) throw ConfigError("partition row width != num_classes");
    const auto& f = split;
    if (f.train < 0 || f.val < 0 || f.test < 0)
      throw ConfigError("split fractions must be non-negative");
    if (std::abs(f.train + f.val + f.test - 1.0) > 1e-12)
      throw ConfigError("split fractions must sum to 1");
    if (scenario == Scenario::dirichlet && !(alpha > 0.0))
      throw ConfigError("dirichlet alpha must be positive");
  }
};

struct ClientDataset {
  std::size_t client_id = 0;
  LabeledBatch train;
  LabeledBatch val;
  LabeledBatch test;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

/// Center of class cls. Classes sit on scaled coordinate axes when there are
/// enough dimensions, otherwise evenly along the first axis; either way every
/// pair of anchors is at least kClassSeparation apart.
inline std::vector<double> class_anchor(std::size_t cls, std::size_t num_classes,
                                        std::size_t input_dim) {
  std::vector<double> a(input_dim, 0.0);
  if (num_classes <= input_dim) {
    a[cls] = kClassSeparation / std::sqrt(2.0);
  } else {
    a[0] = static_cast<double>(cls) * kClassSeparation;
  }
  return a;
}

/// counts[c] samples of class c from N(anchor_c, kBlobScale^2 I), in class
/// order.
inline std::vector<Sample> generate_synthetic(std::size_t num_classes, std::size_t input_dim,
                                              std::span<const std::size_t> counts,
                                              std::uint64_t seed) {
  if (counts.size() != num_classes) throw ShapeError("counts length must equal num_classes");
  if (input_dim < 1) throw ShapeError("input_dim must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, kBlobScale);
  std::vector<Sample> out;
  out.reserve(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto anchor = class_anchor(c, num_classes, input_dim);
    for (std::size_t i = 0; i < counts[c]; ++i) {
      Sample s{anchor, c};
      for (auto& v : s.features) v += noise(rng);
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Per-clinic label counts of the 14-clinic diabetic-retinopathy federation
/// (grades No DR, Mild, Moderate, Severe, Proliferative). Client i is C(i+1).
inline PartitionSpec partition_table1() {
  PartitionSpec spec;
  spec.scenario = Scenario::table1;
  spec.num_classes = 5;
  spec.counts = {
      {2, 13, 307, 32, 56},    // C1   410
      {31, 234, 233, 60, 80},  // C2   638
      {901, 19, 39, 2, 13},    // C3   974
      {351, 0, 0, 0, 0},       // C4   351
      {0, 13, 91, 6, 31},      // C5   141
      {231, 44, 165, 47, 46},  // C6   533
      {279, 7, 1, 0, 0},       // C7   287
      {0, 2, 63, 9, 18},       // C8    92
      {0, 13, 28, 1, 19},      // C9    61
      {0, 18, 11, 4, 19},      // C10   52
      {0, 0, 33, 5, 4},        // C11   42
      {0, 6, 3, 21, 4},        // C12   34
      {0, 1, 22, 3, 2},        // C13   28
      {10, 0, 0, 2, 2},        // C14   14
  };
  spec.split = {0.8, 0.1, 0.1};
  return spec;
}

namespace detail {

/// Splits total into per-client integers proportional to weights using the
/// largest-remainder rule (ties to the lowest client index).
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    rem.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < total; ++j, ++assigned) out[rem[j % rem.size()].second] += 1;
  return out;
}

/// Moves single samples from the largest cell of a client with >= 2 samples
/// into every empty client. Column sums are unchanged.
inline void ensure_nonempty_rows(std::vector<std::vector<std::size_t>>& counts) {
  auto row_sum = [&](std::size_t i) {
    return std::accumulate(counts[i].begin(), counts[i].end(), std::size_t{0});
  };
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (row_sum(i) > 0) continue;
    std::size_t best_j = counts.size(), best_c = 0, best = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (row_sum(j) < 2) continue;
      for (std::size_t c = 0; c < counts[j].size(); ++c)
        if (counts[j][c] > best) best = counts[j][c], best_j = j, best_c = c;
    }
    if (best_j == counts.size()) throw ConfigError("partition infeasible: not enough samples");
    --counts[best_j][best_c];
    ++counts[i][best_c];
  }
}

inline std::vector<std::size_t> even_class_totals(std::size_t total, std::size_t num_classes) {
  std::vector<std::size_t> t(num_classes, total / num_classes);
  for (std::size_t c = 0; c < total % num_classes; ++c) ++t[c];
  return t;
}

}  // namespace detail

/// Label-skewed partition: each class's samples are spread over clients in
/// proportions drawn from a symmetric Dirichlet(alpha).
inline PartitionSpec partition_dirichlet(std::size_t num_clients, std::size_t num_classes,
                                         std::size_t total, double alpha, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("dirichlet alpha must be positive");
  if (total < num_clients)
    throw ConfigError("total samples (" + std::to_string(total) + ") fewer than clients (" +
                      std::to_string(num_clients) + ")");

  PartitionSpec spec;
  spec.scenario = Scenario::dirichlet;
  spec.num_classes = num_classes;
  spec.alpha = alpha;
  spec.counts.assign(num_clients, std::vector<std::size_t>(num_classes, 0));

  Rng rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const auto class_totals = detail::even_class_totals(total, num_classes);
  std::vector<double> props(num_clients);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (auto& p : props) p = gamma(rng);
    if (std::accumulate(props.begin(), props.end(), 0.0) <= 0.0) {
      // Every gamma draw underflowed; the limit is a point mass on one client.
      std::fill(props.begin(), props.end(), 0.0);
      props[uniform_index(rng, num_clients)] = 1.0;
    }
    const auto col = detail::apportion(class_totals[c], props);
    for (std::size_t i = 0; i < num_clients; ++i) spec.counts[i][c] = col[i];
  }
  detail::ensure_nonempty_rows(spec.counts);
  return spec;
}

/// IID partition: every class split as evenly as possible across clients.
inline PartitionSpec partition_uniform(std::size_t num_clients, std::size_t num_classes,
                                       std::size_t total) {
  if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (total < num_clients) throw ConfigError("total samples fewer than clients");
  PartitionSpec spec;
  spec.scenario = Scenario::uniform;
  spec.num_classes = num_classes;
  spec.counts.assign(num_clients, std::vector<std::size_t>(num_classes, 0));
  const auto class_totals = detail::even_class_totals(total, num_classes);
  std::size_t next = 0;  // round-robin keeps client totals within one sample
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t s = 0; s < class_totals[c]; ++s) ++spec.counts[next++ % num_clients][c];
  return spec;
}

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// val = floor(f_val n), test = floor(f_test n), train gets the remainder.
/// If that would leave train empty, one sample is taken back from the larger
/// of val/test.
inline SplitSizes split_sizes(std::size_t n, const SplitFractions& f) {
  // The epsilon keeps e.g. 0.1 * 70 from flooring to 6.
  auto fl = [n](double frac) {
    return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
  };
  SplitSizes s{0, std::min(fl(f.val), n), 0};
  s.test = std::min(fl(f.test), n - s.val);
  s.train = n - s.val - s.test;
  if (s.train == 0 && n > 0) {
    if (s.val >= s.test) --s.val; else --s.test;
    s.train = 1;
  }
  return s;
}

namespace detail {

inline LabeledBatch to_batch(const std::vector<Sample>& samples,
                             std::span<const std::size_t> idx, std::size_t input_dim) {
  LabeledBatch b;
  b.features = Matrix(idx.size(), input_dim);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = samples[idx[i]];
    std::copy(s.features.begin(), s.features.end(), b.features.row(i).begin());
    b.labels.push_back(s.label);
  }
  return b;
}

/// Random direction of length kClientShiftFraction * kClassSeparation.
inline std::vector<double> client_shift(std::size_t input_dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(input_dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = g(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  const double len = kClientShiftFraction * kClassSeparation / std::sqrt(norm);
  for (auto& x : v) x *= len;
  return v;
}

}  // namespace detail

/// Generates every client's samples, applies its feature offset, shuffles and
/// splits. Client ids are row indices of spec.counts.
inline std::vector<ClientDataset> materialize(const PartitionSpec& spec, std::size_t input_dim,
                                              std::uint64_t seed) {
  spec.validate();
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  std::vector<ClientDataset> out;
  out.reserve(spec.num_clients());
  for (std::size_t id = 0; id < spec.num_clients(); ++id) {
    const std::size_t n = spec.client_total(id);
    if (n == 0) throw ConfigError("client " + std::to_string(id) + " has no samples");
    auto samples = generate_synthetic(spec.num_classes, input_dim, spec.counts[id],
                                      derive_seed(seed, {stream::kData, id}));
    const auto shift = detail::client_shift(input_dim, derive_seed(seed, {stream::kShift, id}));
    for (auto& s : samples)
      for (std::size_t d = 0; d < input_dim; ++d) s.features[d] += shift[d];

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {stream::kSplit, id}));
    shuffle(std::span(order), rng);

    const auto sz = split_sizes(n, spec.split);
    const std::span<const std::size_t> all(order);
    ClientDataset ds;
    ds.client_id = id;
    ds.val = detail::to_batch(samples, all.subspan(0, sz.val), input_dim);
    ds.test = detail::to_batch(samples, all.subspan(sz.val, sz.test), input_dim);
    ds.train = detail::to_batch(samples, all.subspan(sz.val + sz.test), input_dim);
    out.push_back(std::move(ds));
  }
  return out;
}

/// 17 significant digits, enough for every double to parse back bit-exactly.
inline std::string format_double(double v) {
  std::array<char, 40> buf{};
  auto [end, ec] =
      std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 17);
  return std::string(buf.data(), end);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_size(std::string_view s) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw std::invalid_argument("not a non-negative integer: '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Dataset table: header f0..f{d-1},label,client_id,split then one row per
/// sample, clients ascending, splits in train/val/test order.
inline void write_dataset_table(std::ostream& os, const std::vector<ClientDataset>& clients) {
  std::size_t dim = 0;
  for (const auto& c : clients)
    for (const auto* b : {&c.train, &c.val, &c.test})
      if (!b->empty()) dim = b->features.cols;
  for (std::size_t d = 0; d < dim; ++d) os << 'f' << d << ',';
  os << "label,client_id,split\n";
  for (const auto& c : clients) {
    const std::pair<const LabeledBatch*, const char*> parts[] = {
        {&c.train, "train"}, {&c.val, "val"}, {&c.test, "test"}};
    for (const auto& [batch, tag] : parts) {
      for (std::size_t r = 0; r < batch->size(); ++r) {
        for (double v : batch->features.row(r)) os << format_double(v) << ',';
        os << batch->labels[r] << ',' << c.client_id << ',' << tag << '\n';
      }
    }
  }
}

inline std::vector<ClientDataset> read_dataset_table(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("dataset table is empty");
  const auto header = split_fields(line);
  if (header.size() < 4 || header[header.size() - 3] != "label" ||
      header[header.size() - 2] != "client_id" || header.back() != "split")
    throw IoError("dataset table header must end with label,client_id,split");
  const std::size_t dim = header.size() - 3;

  std::map<std::size_t, ClientDataset> by_id;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != dim + 3) throw IoError("dataset table line " + std::to_string(line_no) + ": wrong field count");
    try {
      const std::size_t id = parse_size(f[dim + 1]);
      auto& ds = by_id[id];
      ds.client_id = id;
      LabeledBatch* dst = nullptr;
      if (f[dim + 2] == "train") dst = &ds.train;
      else if (f[dim + 2] == "val") dst = &ds.val;
      else if (f[dim + 2] == "test") dst = &ds.test;
      else throw std::invalid_argument("unknown split tag '" + std::string(f[dim + 2]) + "'");
      dst->features.cols = dim;
      for (std::size_t d = 0; d < dim; ++d) dst->features.values.push_back(parse_double(f[d]));
      ++dst->features.rows;
      dst->labels.push_back(parse_size(f[dim]));
    } catch (const std::invalid_argument& e) {
      throw IoError("dataset table line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::vector<ClientDataset> out;
  for (auto& [id, ds] : by_id) {
    for (auto* b : {&ds.train, &ds.val, &ds.test}) b->features.cols = dim;
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace bsosl
