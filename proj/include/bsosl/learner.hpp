#pragma once

// Dense multilayer perceptron with ReLU hidden layers and a softmax output,
// trained by plain mini-batch SGD on mean cross-entropy. All arithmetic is in
// double precision and every function is a pure function of its arguments.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsosl/errors.hpp"
#include "bsosl/rng.hpp"

namespace bsosl {

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * cols, cols};
  }

  bool operator==(const Matrix&) const = default;
};

struct LayerShape {
  std::size_t inputs = 0;
  std::size_t outputs = 0;

  bool operator==(const LayerShape&) const = default;
};

struct LearnerConfig {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden_dims = {16};
  std::size_t num_classes = 5;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;

  void validate() const {
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be finite and non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
    for (auto h : hidden_dims)
      if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
  }

  std::vector<LayerShape> layer_shapes() const {
    std::vector<LayerShape> shapes;
    std::size_t in = input_dim;
    for (auto h : hidden_dims) {
      shapes.push_back({in, h});
      in = h;
    }
    shapes.push_back({in, num_classes});
    return shapes;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : layer_shapes()) n += s.outputs * (s.inputs + 1);
    return n;
  }
};

/// One affine layer. weights is outputs x inputs.
struct DenseLayer {
  Matrix weights;
  std::vector<double> biases;

  bool operator==(const DenseLayer&) const = default;
};

/// All learner weights and biases, layer by layer. This is the unit that
/// clients train and that aggregation averages. Each weight matrix and each
/// bias vector is one "tensor".
struct ParameterVector {
  std::vector<DenseLayer> layers;

  ParameterVector() = default;

  /// Zero-filled parameters for the given layer shapes.
  explicit ParameterVector(std::span<const LayerShape> shapes) {
    layers.reserve(shapes.size());
    for (const auto& s : shapes)
      layers.push_back({Matrix(s.outputs, s.inputs), std::vector<double>(s.outputs, 0.0)});
  }

  std::size_t total_len() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.values.size() + l.biases.size();
    return n;
  }

  std::size_t tensor_count() const { return 2 * layers.size(); }

  std::vector<LayerShape> shapes() const {
    std::vector<LayerShape> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back({l.weights.cols, l.weights.rows});
    return out;
  }

  bool same_shape(const ParameterVector& other) const { return shapes() == other.shapes(); }

  /// Calls fn(span) for every tensor in flatten order: weights then biases,
  /// layer by layer.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& l : layers) {
      fn(std::span<const double>(l.weights.values));
      fn(std::span<const double>(l.biases));
    }
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& l : layers) {
      fn(std::span<double>(l.weights.values));
      fn(std::span<double>(l.biases));
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(total_len());
    for_each_tensor([&](std::span<const double> t) { flat.insert(flat.end(), t.begin(), t.end()); });
    return flat;
  }

  static ParameterVector unflatten(std::span<const LayerShape> shapes,
                                   std::span<const double> flat) {
    ParameterVector p(shapes);
    if (flat.size() != p.total_len())
      throw ShapeError("flat parameter length " + std::to_string(flat.size()) +
                       " does not match layer shapes (" + std::to_string(p.total_len()) + ")");
    std::size_t pos = 0;
    p.for_each_tensor([&](std::span<double> t) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.begin());
      pos += t.size();
    });
    return p;
  }

  /// this += alpha * other
  ParameterVector& axpy(double alpha, const ParameterVector& other) {
    if (!same_shape(other)) throw ShapeError("axpy on parameter vectors of different shape");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& dst = layers[i];
      const auto& src = other.layers[i];
      for (std::size_t j = 0; j < dst.weights.values.size(); ++j)
        dst.weights.values[j] += alpha * src.weights.values[j];
      for (std::size_t j = 0; j < dst.biases.size(); ++j) dst.biases[j] += alpha * src.biases[j];
    }
    return *this;
  }

  ParameterVector& scale(double factor) {
    for_each_tensor([&](std::span<double> t) {
      for (auto& v : t) v *= factor;
    });
    return *this;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](std::span<const double> t) {
      for (double v : t) ok = ok && std::isfinite(v);
    });
    return ok;
  }

  bool operator==(const ParameterVector&) const = default;
};

/// Feature rows with integer class labels.
struct LabeledBatch {
  Matrix features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void validate(std::size_t num_classes) const {
    if (features.rows != labels.size())
      throw ShapeError("batch has " + std::to_string(features.rows) + " feature rows but " +
                       std::to_string(labels.size()) + " labels");
    for (auto y : labels)
      if (y >= num_classes) throw ShapeError("label " + std::to_string(y) + " out of range");
  }

  /// Rows selected by index, in the given order.
  LabeledBatch gather(std::span<const std::size_t> rows) const {
    LabeledBatch out;
    out.features = Matrix(rows.size(), features.cols);
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = features.row(rows[i]);
      std::copy(src.begin(), src.end(), out.features.row(i).begin());
      out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }

  void append(const LabeledBatch& other) {
    if (other.empty()) return;
    if (empty() && features.cols == 0) features.cols = other.features.cols;
    if (other.features.cols != features.cols) throw ShapeError("appending batch of different width");
    features.values.insert(features.values.end(), other.features.values.begin(),
                           other.features.values.end());
    features.rows += other.features.rows;
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] weights, zero biases.
inline ParameterVector init_params(const LearnerConfig& config, std::uint64_t seed) {
  config.validate();
  const auto shapes = config.layer_shapes();
  ParameterVector p(shapes);
  Rng rng(seed);
  for (auto& layer : p.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weights.cols));
    for (auto& w : layer.weights.values) w = (2.0 * uniform01(rng) - 1.0) * bound;
  }
  return p;
}

namespace detail {

inline void check_input(const ParameterVector& params, const Matrix& features) {
  if (params.layers.empty()) throw ShapeError("parameter vector has no layers");
  if (features.cols != params.layers.front().weights.cols)
    throw ShapeError("feature width " + std::to_string(features.cols) +
                     " does not match input_dim " +
                     std::to_string(params.layers.front().weights.cols));
}

/// out = in * W^T + b
inline Matrix affine(const DenseLayer& layer, const Matrix& in) {
  Matrix out(in.rows, layer.weights.rows);
  for (std::size_t n = 0; n < in.rows; ++n) {
    const auto x = in.row(n);
    auto z = out.row(n);
    for (std::size_t o = 0; o < layer.weights.rows; ++o) {
      const auto w = layer.weights.row(o);
      double acc = layer.biases[o];
      for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
      z[o] = acc;
    }
  }
  return out;
}

inline void relu_inplace(Matrix& m) {
  for (auto& v : m.values) v = v > 0.0 ? v : 0.0;
}

inline double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

/// Pre-activations of every layer plus the post-activation inputs to each
/// layer. inputs[0] is the batch itself.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> preacts;
};

inline ForwardTrace trace_forward(const ParameterVector& params, const Matrix& features) {
  check_input(params, features);
  ForwardTrace t;
  t.inputs.push_back(features);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Matrix z = affine(params.layers[l], t.inputs.back());
    t.preacts.push_back(z);
    if (l + 1 < params.layers.size()) {
      relu_inplace(z);
      t.inputs.push_back(std::move(z));
    }
  }
  return t;
}

inline void softmax_rows_inplace(Matrix& logits) {
  for (std::size_t n = 0; n < logits.rows; ++n) {
    auto z = logits.row(n);
    const double lse = log_sum_exp(z);
    for (auto& v : z) v = std::exp(v - lse);
  }
}

}  // namespace detail

/// Class-probability matrix, one softmax row per sample.
inline Matrix forward(const ParameterVector& params, const Matrix& features) {
  auto t = detail::trace_forward(params, features);
  Matrix probs = std::move(t.preacts.back());
  detail::softmax_rows_inplace(probs);
  return probs;
}

inline Matrix forward(const ParameterVector& params, const LabeledBatch& batch) {
  return forward(params, batch.features);
}

struct LossAndGrad {
  double loss = 0.0;
  ParameterVector grads;
};

/// Mean cross-entropy over the batch and its exact gradient.
inline LossAndGrad loss_and_grad(const ParameterVector& params, const LabeledBatch& batch) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad on an empty batch");
  const std::size_t num_classes = params.layers.back().weights.rows;
  batch.validate(num_classes);
  auto t = detail::trace_forward(params, batch.features);

  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossAndGrad out{0.0, ParameterVector(params.shapes())};

  // dL/dz for the output layer: (softmax - onehot) / n
  Matrix delta = std::move(t.preacts.back());
  double loss_sum = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    auto z = delta.row(s);
    const double lse = detail::log_sum_exp(z);
    loss_sum += lse - z[batch.labels[s]];
    for (auto& v : z) v = std::exp(v - lse) * inv_n;
    z[batch.labels[s]] -= inv_n;
  }
  out.loss = loss_sum * inv_n;

  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const Matrix& a = t.inputs[l];
    auto& g = out.grads.layers[l];
    for (std::size_t s = 0; s < n; ++s) {
      const auto d = delta.row(s);
      const auto x = a.row(s);
      for (std::size_t o = 0; o < d.size(); ++o) {
        if (d[o] == 0.0) continue;
        auto gw = g.weights.row(o);
        for (std::size_t i = 0; i < x.size(); ++i) gw[i] += d[o] * x[i];
        g.biases[o] += d[o];
      }
    }
    if (l == 0) break;

    // Propagate through W and the ReLU of the previous layer.
    const auto& w = params.layers[l].weights;
    const Matrix& z_prev = t.preacts[l - 1];
    Matrix next(n, w.cols);
    for (std::size_t s = 0; s < n; ++s) {
      const auto d = delta.row(s);
      auto dn = next.row(s);
      for (std::size_t o = 0; o < d.size(); ++o) {
        if (d[o] == 0.0) continue;
        const auto wr = w.row(o);
        for (std::size_t i = 0; i < dn.size(); ++i) dn[i] += d[o] * wr[i];
      }
      const auto zp = z_prev.row(s);
      for (std::size_t i = 0; i < dn.size(); ++i)
        if (!(zp[i] > 0.0)) dn[i] = 0.0;
    }
    delta = std::move(next);
  }
  return out;
}

struct LocalFit {
  ParameterVector params;
  /// Sample-weighted mean mini-batch loss over the final epoch.
  double train_loss = 0.0;
};

/// local_epochs epochs of shuffled mini-batch SGD. The shuffle order is fixed
/// by seed. Throws DivergenceError when a mini-batch loss is not finite.
inline LocalFit fit_local(const ParameterVector& params, const LabeledBatch& data,
                          const LearnerConfig& config, std::uint64_t seed) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("local training needs a non-empty train split");
  data.validate(config.num_classes);

  LocalFit fit{params, 0.0};
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(std::span(order), rng);
    double weighted_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      const auto batch = data.gather(std::span(order).subspan(start, len));
      auto lg = loss_and_grad(fit.params, batch);
      if (!std::isfinite(lg.loss)) throw DivergenceError(std::nullopt, epoch);
      weighted_loss += lg.loss * static_cast<double>(len);
      fit.params.axpy(-config.learning_rate, lg.grads);
    }
    if (!fit.params.all_finite()) throw DivergenceError(std::nullopt, epoch);
    fit.train_loss = weighted_loss / static_cast<double>(data.size());
  }
  return fit;
}

inline ParameterVector train_local(const ParameterVector& params, const LabeledBatch& data,
                                   const LearnerConfig& config, std::uint64_t seed) {
  return fit_local(params, data, config, seed).params;
}

/// Predicted class per row: argmax probability, ties to the lowest index.
inline std::vector<std::size_t> predict(const ParameterVector& params, const Matrix& features) {
  const Matrix probs = forward(params, features);
  std::vector<std::size_t> out(probs.rows);
  for (std::size_t n = 0; n < probs.rows; ++n) {
    const auto p = probs.row(n);
    out[n] = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return out;
}

/// Fraction of correctly classified samples; 0 for an empty batch.
inline double evaluate_accuracy(const ParameterVector& params, const LabeledBatch& data) {
  if (data.empty()) return 0.0;
  const auto pred = predict(params, data.features);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < pred.size(); ++n) hits += pred[n] == data.labels[n];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// What the protocol needs from a local model. Clients, aggregation and the
/// driver are written against this so other learners can be slotted in, as
/// long as their parameters fit in a ParameterVector.
template <typename L>
concept Learner = requires(const L& learner, const ParameterVector& params,
                           const LabeledBatch& batch, std::uint64_t seed) {
  { learner.init_params(seed) } -> std::same_as<ParameterVector>;
  { learner.fit(params, batch, seed) } -> std::same_as<LocalFit>;
  { learner.accuracy(params, batch) } -> std::convertible_to<double>;
};

/// The default learner: the dense MLP above, bound to one configuration.
class DenseMlp {
 public:
  explicit DenseMlp(LearnerConfig config) : config_(std::move(config)) { config_.validate(); }

  const LearnerConfig& config() const { return config_; }

  ParameterVector init_params(std::uint64_t seed) const { return bsosl::init_params(config_, seed); }

  LocalFit fit(const ParameterVector& params, const LabeledBatch& data, std::uint64_t seed) const {
    return fit_local(params, data, config_, seed);
  }

  double accuracy(const ParameterVector& params, const LabeledBatch& data) const {
    return evaluate_accuracy(params, data);
  }

 private:
  LearnerConfig config_;
};

static_assert(Learner<DenseMlp>);

}  // namespace bsosl
