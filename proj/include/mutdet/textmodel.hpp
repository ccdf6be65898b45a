#pragma once

// Bag-of-embeddings text classifier: embedding, mean pooling over non-PAD
// positions, ReLU linear encoder layers, softmax head.
//
// The scalar type is a template parameter so the same code runs the
// production float model and the double-precision gradient check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mutdet/corpus.hpp"
#include "mutdet/error.hpp"
#include "mutdet/hash.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/weights_io.hpp"

namespace mutdet {

struct ModelDims {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t num_classes = 2;

  std::size_t param_count() const {
    std::size_t n = vocab_size * embed_dim;
    std::size_t in = embed_dim;
    for (auto h : hidden) {
      n += in * h + h;
      in = h;
    }
    return n + in * num_classes + num_classes;
  }

  bool operator==(const ModelDims&) const = default;
};

/// Fully connected layer. `weight` is out x in, row-major: row j holds the
/// incoming weights of output neuron j.
template <typename T>
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in_dim, std::size_t out_dim)
      : in(in_dim), out(out_dim), weight(in_dim * out_dim, T{}), bias(out_dim, T{}) {}

  T& w(std::size_t j, std::size_t i) { return weight[j * in + i]; }
  const T& w(std::size_t j, std::size_t i) const { return weight[j * in + i]; }

  std::span<T> row(std::size_t j) { return {weight.data() + j * in, in}; }
  std::span<const T> row(std::size_t j) const { return {weight.data() + j * in, in}; }

  /// y = W x + b
  void apply(std::span<const T> x, std::span<T> y) const {
    for (std::size_t j = 0; j < out; ++j) {
      const T* r = weight.data() + j * in;
      T acc = bias[j];
      for (std::size_t i = 0; i < in; ++i) acc += r[i] * x[i];
      y[j] = acc;
    }
  }

  bool operator==(const DenseLayer&) const = default;
};

template <typename T>
struct ClassifierModel {
  ModelDims dims;
  std::vector<T> embedding;  // vocab_size x embed_dim, row-major
  std::vector<DenseLayer<T>> encoder;
  DenseLayer<T> head;

  /// Zero-initialized model of the given shape.
  static ClassifierModel zeros(const ModelDims& dims) {
    ClassifierModel m;
    m.dims = dims;
    m.embedding.assign(dims.vocab_size * dims.embed_dim, T{});
    std::size_t in = dims.embed_dim;
    for (auto h : dims.hidden) {
      m.encoder.emplace_back(in, h);
      in = h;
    }
    m.head = DenseLayer<T>(in, dims.num_classes);
    return m;
  }

  /// Visits every parameter array in declaration order: embedding, then each
  /// encoder layer's weight and bias, then head weight and bias.
  template <typename F>
  void for_each_array(F&& f) {
    f(std::span<T>(embedding));
    for (auto& l : encoder) {
      f(std::span<T>(l.weight));
      f(std::span<T>(l.bias));
    }
    f(std::span<T>(head.weight));
    f(std::span<T>(head.bias));
  }

  template <typename F>
  void for_each_array(F&& f) const {
    f(std::span<const T>(embedding));
    for (const auto& l : encoder) {
      f(std::span<const T>(l.weight));
      f(std::span<const T>(l.bias));
    }
    f(std::span<const T>(head.weight));
    f(std::span<const T>(head.bias));
  }

  std::size_t param_count() const { return dims.param_count(); }

  std::span<const T> embedding_row(TokenId id) const {
    return {embedding.data() + static_cast<std::size_t>(id) * dims.embed_dim, dims.embed_dim};
  }

  template <typename U>
  ClassifierModel<U> cast() const {
    ClassifierModel<U> m = ClassifierModel<U>::zeros(dims);
    std::vector<std::span<const T>> src;
    for_each_array([&](std::span<const T> a) { src.push_back(a); });
    std::size_t k = 0;
    m.for_each_array([&](std::span<U> dst) {
      std::transform(src[k].begin(), src[k].end(), dst.begin(), [](T x) { return static_cast<U>(x); });
      ++k;
    });
    return m;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_array([&](std::span<const T> a) {
      for (T x : a) ok = ok && std::isfinite(static_cast<double>(x));
    });
    return ok;
  }

  bool operator==(const ClassifierModel&) const = default;
};

using Model = ClassifierModel<float>;

inline void validate_dims(const ModelDims& dims) {
  if (dims.vocab_size < 1 || dims.embed_dim < 1 || dims.num_classes < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (dims.num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  for (auto h : dims.hidden) {
    if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
  }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. The
/// embedding uses fan_in = embed_dim.
template <typename T = float>
ClassifierModel<T> init_model(const ModelDims& dims, std::uint64_t init_seed) {
  validate_dims(dims);
  auto m = ClassifierModel<T>::zeros(dims);
  Rng rng(init_seed);
  auto fill = [&](std::span<T> a, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : a) x = static_cast<T>(rng.uniform(-bound, bound));
  };
  fill(m.embedding, dims.embed_dim);
  for (auto& l : m.encoder) fill(l.weight, l.in);
  fill(m.head.weight, m.head.in);
  return m;
}

// ---------------------------------------------------------------------------
// Inference

/// Mean of the embeddings of non-PAD tokens.
template <typename T>
std::vector<T> pooled_embedding(const ClassifierModel<T>& model, std::span<const TokenId> tokens) {
  const std::size_t d = model.dims.embed_dim;
  std::vector<T> pooled(d, T{});
  std::size_t count = 0;
  for (TokenId t : tokens) {
    if (t == Vocab::kPad) continue;
    if (t >= model.dims.vocab_size) {
      throw ConfigError("token id " + std::to_string(t) + " outside vocabulary of size " +
                        std::to_string(model.dims.vocab_size));
    }
    const auto row = model.embedding_row(t);
    for (std::size_t k = 0; k < d; ++k) pooled[k] += row[k];
    ++count;
  }
  if (count == 0) throw ConfigError("input contains only PAD tokens");
  const T inv = T(1) / static_cast<T>(count);
  for (auto& x : pooled) x *= inv;
  return pooled;
}

template <typename T>
void softmax_inplace(std::span<T> logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{};
  for (auto& x : logits) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : logits) x /= sum;
}

/// Encoder and head applied to an already pooled embedding.
template <typename T>
std::vector<T> forward_pooled(const ClassifierModel<T>& model, std::span<const T> pooled) {
  std::vector<T> h(pooled.begin(), pooled.end());
  std::vector<T> z;
  for (const auto& layer : model.encoder) {
    z.assign(layer.out, T{});
    layer.apply(h, z);
    for (auto& x : z) x = std::max(x, T{});
    h.swap(z);
  }
  std::vector<T> logits(model.head.out);
  model.head.apply(h, logits);
  softmax_inplace<T>(logits);
  return logits;
}

template <typename T>
std::vector<T> predict_proba(const ClassifierModel<T>& model, std::span<const TokenId> tokens) {
  const auto pooled = pooled_embedding(model, tokens);
  return forward_pooled<T>(model, pooled);
}

/// Index of the largest probability; ties go to the lowest class index.
template <typename T>
std::size_t argmax(std::span<const T> p) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

template <typename T>
std::size_t predict(const ClassifierModel<T>& model, std::span<const TokenId> tokens) {
  const auto p = predict_proba(model, tokens);
  return argmax<T>(p);
}

struct EncodedExample {
  TokenSeq tokens;
  std::size_t label = 0;
};

inline std::vector<EncodedExample> encode_all(const Vocab& vocab, std::span<const LabeledExample> examples,
                                              std::size_t max_len,
                                              const HomographTable& homographs = HomographTable::builtin()) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back({encode(vocab, ex.text, max_len, homographs), ex.label});
  return out;
}

template <typename T>
double accuracy(const ClassifierModel<T>& model, std::span<const EncodedExample> data) {
  if (data.empty()) throw ConfigError("accuracy: dataset is empty");
  std::size_t hits = 0;
  for (const auto& ex : data) hits += predict(model, ex.tokens) == ex.label;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Training

/// Mean cross-entropy over `batch`; gradients are accumulated into `grad`,
/// which must have the model's shape and is zeroed first.
template <typename T>
double loss_and_gradient(const ClassifierModel<T>& model, std::span<const EncodedExample* const> batch,
                         ClassifierModel<T>& grad) {
  grad.for_each_array([](std::span<T> a) { std::fill(a.begin(), a.end(), T{}); });
  const std::size_t L = model.encoder.size();
  const T scale = T(1) / static_cast<T>(batch.size());
  double loss = 0.0;
  std::vector<std::vector<T>> acts(L + 1);  // acts[0] pooled, acts[i] post-ReLU of layer i
  std::vector<std::vector<T>> pre(L);
  for (const EncodedExample* ex : batch) {
    if (ex->label >= model.dims.num_classes) throw ConfigError("label outside class range");
    acts[0] = pooled_embedding(model, ex->tokens);
    for (std::size_t i = 0; i < L; ++i) {
      const auto& layer = model.encoder[i];
      pre[i].assign(layer.out, T{});
      layer.apply(acts[i], pre[i]);
      acts[i + 1] = pre[i];
      for (auto& x : acts[i + 1]) x = std::max(x, T{});
    }
    std::vector<T> delta(model.head.out);
    model.head.apply(acts[L], delta);
    softmax_inplace<T>(delta);
    loss -= std::log(std::max(static_cast<double>(delta[ex->label]), 1e-300));
    delta[ex->label] -= T(1);
    for (auto& x : delta) x *= scale;

    // head
    std::vector<T> up(model.head.in, T{});
    for (std::size_t c = 0; c < model.head.out; ++c) {
      grad.head.bias[c] += delta[c];
      for (std::size_t k = 0; k < model.head.in; ++k) {
        grad.head.w(c, k) += delta[c] * acts[L][k];
        up[k] += model.head.w(c, k) * delta[c];
      }
    }
    for (std::size_t i = L; i-- > 0;) {
      const auto& layer = model.encoder[i];
      auto& g = grad.encoder[i];
      for (std::size_t j = 0; j < layer.out; ++j) {
        if (pre[i][j] <= T{}) up[j] = T{};
      }
      std::vector<T> down(layer.in, T{});
      for (std::size_t j = 0; j < layer.out; ++j) {
        const T dz = up[j];
        if (dz == T{}) continue;
        g.bias[j] += dz;
        for (std::size_t k = 0; k < layer.in; ++k) {
          g.w(j, k) += dz * acts[i][k];
          down[k] += layer.w(j, k) * dz;
        }
      }
      up.swap(down);
    }
    std::size_t count = 0;
    for (TokenId t : ex->tokens) count += t != Vocab::kPad;
    const T inv = T(1) / static_cast<T>(count);
    const std::size_t d = model.dims.embed_dim;
    for (TokenId t : ex->tokens) {
      if (t == Vocab::kPad) continue;
      T* row = grad.embedding.data() + static_cast<std::size_t>(t) * d;
      for (std::size_t k = 0; k < d; ++k) row[k] += up[k] * inv;
    }
  }
  return loss / static_cast<double>(batch.size());
}

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::Adam;
  std::uint64_t train_seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  }
};

/// Adam moment buffers shaped like the parameters they update.
template <typename T>
class AdamState {
 public:
  explicit AdamState(const std::vector<std::size_t>& sizes) {
    for (auto n : sizes) {
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
  }

  /// One step on array `k`; call begin_step() once per step first.
  void update(std::size_t k, std::span<T> param, std::span<const T> grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      param[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }

  void begin_step() { ++t_; }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Minimizes mean cross-entropy in place. Batch order per epoch is a seeded
/// shuffle. Returns the mean training loss of each epoch.
template <typename T>
std::vector<double> train(ClassifierModel<T>& model, std::span<const EncodedExample> data,
                          const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  auto grad = ClassifierModel<T>::zeros(model.dims);
  std::vector<std::size_t> sizes;
  model.for_each_array([&](std::span<T> a) { sizes.push_back(a.size()); });
  AdamState<T> adam(sizes);

  std::vector<const EncodedExample*> order;
  for (const auto& ex : data) order.push_back(&ex);
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.train_seed, epoch));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      std::span<const EncodedExample* const> batch(order.data() + start, len);
      const double loss = loss_and_gradient(model, batch, grad);
      if (!std::isfinite(loss)) throw DivergenceError("training loss is not finite", epoch + 1);
      total += loss * static_cast<double>(len);

      std::vector<std::span<const T>> gs;
      grad.for_each_array([&](std::span<const T> g) { gs.push_back(g); });
      std::size_t k = 0;
      if (config.optimizer == Optimizer::Adam) adam.begin_step();
      model.for_each_array([&](std::span<T> p) {
        if (config.optimizer == Optimizer::Adam) {
          adam.update(k, p, gs[k], config.learning_rate);
        } else {
          for (std::size_t i = 0; i < p.size(); ++i) p[i] -= static_cast<T>(config.learning_rate) * gs[k][i];
        }
        ++k;
      });
    }
    const double mean = total / static_cast<double>(order.size());
    if (!std::isfinite(mean) || !model.all_finite()) {
      throw DivergenceError("training diverged", epoch + 1);
    }
    trace.push_back(mean);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Persistence

inline WeightFile to_weight_file(const Model& model) {
  WeightFile wf;
  wf.kind = WeightKind::Classifier;
  wf.dims.push_back(static_cast<std::uint32_t>(model.dims.vocab_size));
  wf.dims.push_back(static_cast<std::uint32_t>(model.dims.embed_dim));
  for (auto h : model.dims.hidden) wf.dims.push_back(static_cast<std::uint32_t>(h));
  wf.dims.push_back(static_cast<std::uint32_t>(model.dims.num_classes));
  wf.params.reserve(model.param_count());
  model.for_each_array([&](std::span<const float> a) { wf.params.insert(wf.params.end(), a.begin(), a.end()); });
  return wf;
}

inline Model from_weight_file(const WeightFile& wf) {
  if (wf.kind != WeightKind::Classifier) throw ParseError("weight file does not hold a classifier");
  if (wf.dims.size() < 3) throw ParseError("classifier weight file needs at least 3 dims");
  ModelDims dims;
  dims.vocab_size = wf.dims.front();
  dims.embed_dim = wf.dims[1];
  dims.hidden.assign(wf.dims.begin() + 2, wf.dims.end() - 1);
  dims.num_classes = wf.dims.back();
  validate_dims(dims);
  if (wf.params.size() != dims.param_count()) throw ParseError("classifier parameter count mismatch");
  auto m = Model::zeros(dims);
  std::size_t pos = 0;
  m.for_each_array([&](std::span<float> a) {
    std::copy_n(wf.params.begin() + static_cast<std::ptrdiff_t>(pos), a.size(), a.begin());
    pos += a.size();
  });
  if (!m.all_finite()) throw ParseError("classifier weights are not finite");
  return m;
}

inline void save_model(const std::filesystem::path& path, const Model& model) {
  write_weight_file(path, to_weight_file(model));
}

inline Model load_model(const std::filesystem::path& path) { return from_weight_file(read_weight_file(path)); }

/// SHA-256 of the serialized model bytes.
inline std::string model_hash(const Model& model) { return sha256_hex(serialize(to_weight_file(model))); }

}  // namespace mutdet
