#pragma once

// Binary backdoor-sample detector over prediction-change vectors, and the
// multi-pipeline OR detection rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mutdet/corpus.hpp"
#include "mutdet/error.hpp"
#include "mutdet/mutation.hpp"
#include "mutdet/pcv.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"
#include "mutdet/weights_io.hpp"

namespace mutdet {

struct DetectorConfig {
  std::vector<std::size_t> hidden{64, 16};
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool balance_classes = true;  // downsample the majority class to 1:1
};

/// MLP N -> 64 -> 16 -> 1 with ReLU after the hidden layers and a sigmoid
/// output.
class Detector {
 public:
  Detector() = default;

  Detector(std::size_t input_dim, const std::vector<std::size_t>& hidden, double threshold)
      : input_dim_(input_dim), threshold_(static_cast<float>(threshold)) {
    std::size_t in = input_dim;
    for (auto h : hidden) {
      layers_.emplace_back(in, h);
      in = h;
    }
    layers_.emplace_back(in, 1);
  }

  std::size_t input_dim() const { return input_dim_; }
  double threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = static_cast<float>(t); }
  std::vector<DenseLayer<float>>& layers() { return layers_; }
  const std::vector<DenseLayer<float>>& layers() const { return layers_; }

  double logit(std::span<const double> pcv) const {
    if (pcv.size() != input_dim_) {
      throw ConfigError("detector expects " + std::to_string(input_dim_) + "-dimensional PCVs, got " +
                        std::to_string(pcv.size()));
    }
    std::vector<float> h(pcv.begin(), pcv.end());
    std::vector<float> z;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      z.assign(layers_[l].out, 0.0f);
      layers_[l].apply(h, z);
      if (l + 1 < layers_.size()) {
        for (auto& x : z) x = std::max(x, 0.0f);
      }
      h.swap(z);
    }
    return static_cast<double>(h[0]);
  }

  /// Probability that the PCV comes from a backdoor sample.
  double score(std::span<const double> pcv) const { return 1.0 / (1.0 + std::exp(-logit(pcv))); }

  bool flags(std::span<const double> pcv) const { return score(pcv) > threshold_; }

  bool operator==(const Detector&) const = default;

 private:
  std::size_t input_dim_ = 0;
  double threshold_ = 0.5;
  std::vector<DenseLayer<float>> layers_;
};

struct TrainedDetector {
  Detector detector;
  std::vector<double> loss_trace;  // mean BCE per epoch
  std::size_t positives = 0;       // rows used after balancing
  std::size_t negatives = 0;
};

/// Full-batch Adam on binary cross-entropy.
inline TrainedDetector train_detector(std::span<const PredictionChangeVector> table, const DetectorConfig& config) {
  if (table.empty()) throw ConfigError("train_detector: empty table");
  if (config.epochs < 1 || !(config.learning_rate > 0.0)) throw ConfigError("train_detector: bad config");
  const std::size_t n = table.front().values.size();
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].values.size() != n) throw ConfigError("train_detector: PCVs differ in length");
    (table[i].is_backdoor ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) throw ConfigError("train_detector: table must contain both classes");
  if (config.balance_classes && pos.size() != neg.size()) {
    auto& major = pos.size() > neg.size() ? pos : neg;
    const std::size_t keep = std::min(pos.size(), neg.size());
    Rng rng(derive_seed(config.seed, 1));
    auto picks = rng.sample(major.size(), keep);
    std::sort(picks.begin(), picks.end());
    std::vector<std::size_t> kept;
    for (auto p : picks) kept.push_back(major[p]);
    major = std::move(kept);
  }
  std::vector<std::size_t> rows = pos;
  rows.insert(rows.end(), neg.begin(), neg.end());
  std::sort(rows.begin(), rows.end());

  TrainedDetector out{Detector(n, config.hidden, config.threshold), {}, pos.size(), neg.size()};
  auto& layers = out.detector.layers();
  Rng init(derive_seed(config.seed, 0));
  for (auto& l : layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    for (auto& w : l.weight) w = static_cast<float>(init.uniform(-bound, bound));
  }

  std::vector<std::size_t> sizes;
  for (const auto& l : layers) {
    sizes.push_back(l.weight.size());
    sizes.push_back(l.bias.size());
  }
  AdamState<float> adam(sizes);
  const std::size_t L = layers.size();
  std::vector<std::vector<double>> gw(L), gb(L);
  std::vector<std::vector<float>> acts(L + 1), pre(L);
  const double inv_batch = 1.0 / static_cast<double>(rows.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t l = 0; l < L; ++l) {
      gw[l].assign(layers[l].weight.size(), 0.0);
      gb[l].assign(layers[l].bias.size(), 0.0);
    }
    double loss = 0.0;
    for (std::size_t r : rows) {
      const auto& v = table[r].values;
      acts[0].assign(v.begin(), v.end());
      for (std::size_t l = 0; l < L; ++l) {
        pre[l].assign(layers[l].out, 0.0f);
        layers[l].apply(acts[l], pre[l]);
        acts[l + 1] = pre[l];
        if (l + 1 < L) {
          for (auto& x : acts[l + 1]) x = std::max(x, 0.0f);
        }
      }
      const double z = static_cast<double>(acts[L][0]);
      const double y = table[r].is_backdoor ? 1.0 : 0.0;
      // log(1 + e^z) - y z, stable for large |z|
      loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      std::vector<double> up{(1.0 / (1.0 + std::exp(-z)) - y) * inv_batch};
      for (std::size_t l = L; l-- > 0;) {
        const auto& layer = layers[l];
        if (l + 1 < L) {
          for (std::size_t j = 0; j < layer.out; ++j) {
            if (pre[l][j] <= 0.0f) up[j] = 0.0;
          }
        }
        std::vector<double> down(layer.in, 0.0);
        for (std::size_t j = 0; j < layer.out; ++j) {
          if (up[j] == 0.0) continue;
          gb[l][j] += up[j];
          for (std::size_t k = 0; k < layer.in; ++k) {
            gw[l][j * layer.in + k] += up[j] * static_cast<double>(acts[l][k]);
            down[k] += static_cast<double>(layer.w(j, k)) * up[j];
          }
        }
        up.swap(down);
      }
    }
    loss *= inv_batch;
    if (!std::isfinite(loss)) throw DivergenceError("detector loss is not finite", epoch + 1);
    out.loss_trace.push_back(loss);
    adam.begin_step();
    for (std::size_t l = 0; l < L; ++l) {
      std::vector<float> gwf(gw[l].begin(), gw[l].end()), gbf(gb[l].begin(), gb[l].end());
      adam.update(2 * l, layers[l].weight, gwf, config.learning_rate);
      adam.update(2 * l + 1, layers[l].bias, gbf, config.learning_rate);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines and the OR rule

/// One retrained model with its mutants and the samples selected on it.
struct Pipeline {
  std::string name;
  std::shared_ptr<const Model> model;
  std::shared_ptr<const MutantSet<float>> mutants;
  std::vector<LabeledExample> backdoor;
  std::vector<LabeledExample> clean;
};

struct PcvContext {
  const Vocab* vocab = nullptr;
  std::size_t max_len = 64;
  std::size_t target_class = 0;
  PcvProjection projection = PcvProjection::TargetClass;
};

inline std::vector<PredictionChangeVector> pcvs_for(const Pipeline& p, std::span<const LabeledExample> samples,
                                                    bool is_backdoor, const PcvContext& ctx) {
  std::vector<TokenSeq> encoded;
  encoded.reserve(samples.size());
  for (const auto& ex : samples) encoded.push_back(encode(*ctx.vocab, ex.text, ctx.max_len));
  const auto values = batch_pcv<float>(encoded, *p.mutants, ctx.target_class, ctx.projection);
  std::vector<PredictionChangeVector> rows;
  rows.reserve(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    rows.push_back({samples[k].origin_id, p.name, is_backdoor, values[k]});
  }
  return rows;
}

struct TrainingTable {
  std::vector<PredictionChangeVector> rows;
  std::size_t backdoor_rows = 0;
  std::size_t clean_rows = 0;
};

/// Backdoor samples labeled 1 and clean samples labeled 0, each computed
/// against its own pipeline's model and mutants; rows pooled in pipeline
/// order.
inline TrainingTable build_training_set(std::span<const Pipeline> pipelines, const PcvContext& ctx) {
  if (pipelines.empty()) throw ConfigError("build_training_set: no pipelines");
  TrainingTable t;
  for (const auto& p : pipelines) {
    if (p.backdoor.empty() || p.clean.empty()) {
      throw ConfigError("pipeline '" + p.name + "' has an empty backdoor or clean set");
    }
    auto b = pcvs_for(p, p.backdoor, true, ctx);
    auto c = pcvs_for(p, p.clean, false, ctx);
    t.backdoor_rows += b.size();
    t.clean_rows += c.size();
    t.rows.insert(t.rows.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
    t.rows.insert(t.rows.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }
  return t;
}

struct DetectionVerdict {
  std::string origin_id;
  std::vector<double> scores;  // one per pipeline
  bool backdoor = false;
  double threshold = 0.5;

  double max_score() const { return scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end()); }
};

/// OR rule over pipeline scores.
inline DetectionVerdict make_verdict(std::string origin_id, std::vector<double> scores, double threshold) {
  DetectionVerdict v{std::move(origin_id), std::move(scores), false, threshold};
  v.backdoor = std::any_of(v.scores.begin(), v.scores.end(), [&](double s) { return s > threshold; });
  return v;
}

/// `detectors` holds one joint detector or one detector per pipeline.
inline std::vector<DetectionVerdict> detect_batch(std::span<const LabeledExample> inputs,
                                                  std::span<const Pipeline> pipelines,
                                                  std::span<const Detector> detectors, const PcvContext& ctx) {
  if (pipelines.empty()) throw ConfigError("detect: no pipelines");
  if (detectors.size() != 1 && detectors.size() != pipelines.size()) {
    throw ConfigError("detect: need one joint detector or one detector per pipeline");
  }
  std::vector<std::vector<double>> scores(inputs.size());
  for (std::size_t p = 0; p < pipelines.size(); ++p) {
    const auto& det = detectors.size() == 1 ? detectors[0] : detectors[p];
    if (det.input_dim() != pipelines[p].mutants->size()) {
      throw ConfigError("detector input dimension does not match mutant count of pipeline '" +
                        pipelines[p].name + "'");
    }
    const auto rows = pcvs_for(pipelines[p], inputs, false, ctx);
    for (std::size_t k = 0; k < inputs.size(); ++k) scores[k].push_back(det.score(rows[k].values));
  }
  std::vector<DetectionVerdict> out;
  out.reserve(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    out.push_back(make_verdict(inputs[k].origin_id, std::move(scores[k]), detectors[0].threshold()));
  }
  return out;
}

inline DetectionVerdict detect(const LabeledExample& x, std::span<const Pipeline> pipelines,
                               std::span<const Detector> detectors, const PcvContext& ctx) {
  return detect_batch(std::span<const LabeledExample>(&x, 1), pipelines, detectors, ctx).front();
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_detector(const std::filesystem::path& path, const Detector& d) {
  WeightFile wf;
  wf.kind = WeightKind::Detector;
  wf.dims.push_back(static_cast<std::uint32_t>(d.input_dim()));
  for (const auto& l : d.layers()) wf.dims.push_back(static_cast<std::uint32_t>(l.out));
  wf.extras.push_back(static_cast<float>(d.threshold()));
  for (const auto& l : d.layers()) {
    wf.params.insert(wf.params.end(), l.weight.begin(), l.weight.end());
    wf.params.insert(wf.params.end(), l.bias.begin(), l.bias.end());
  }
  write_weight_file(path, wf);
}

inline Detector load_detector(const std::filesystem::path& path) {
  const auto wf = read_weight_file(path);
  if (wf.kind != WeightKind::Detector) throw ParseError(path.string() + " does not hold a detector");
  if (wf.dims.size() < 2 || wf.dims.back() != 1 || wf.extras.size() != 1) {
    throw ParseError(path.string() + ": malformed detector header");
  }
  std::vector<std::size_t> hidden(wf.dims.begin() + 1, wf.dims.end() - 1);
  Detector d(wf.dims.front(), hidden, static_cast<double>(wf.extras[0]));
  std::size_t pos = 0;
  for (auto& l : d.layers()) {
    if (pos + l.weight.size() + l.bias.size() > wf.params.size()) throw ParseError("detector parameter count mismatch");
    std::copy_n(wf.params.begin() + static_cast<std::ptrdiff_t>(pos), l.weight.size(), l.weight.begin());
    pos += l.weight.size();
    std::copy_n(wf.params.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(), l.bias.begin());
    pos += l.bias.size();
  }
  if (pos != wf.params.size()) throw ParseError("detector parameter count mismatch");
  return d;
}

inline nlohmann::json verdict_to_json(const DetectionVerdict& v) {
  return {{"origin_id", v.origin_id}, {"scores", v.scores}, {"flag", v.backdoor ? "backdoor" : "clean"}};
}

}  // namespace mutdet
