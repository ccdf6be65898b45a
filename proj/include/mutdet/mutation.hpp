#pragma once

// Model-level mutation operators over the encoder's linear layers, and
// lazily materialized seeded mutant sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mutdet/error.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"

namespace mutdet {

enum class MutationKind {
  GF,   // Gaussian fuzzing of individual weights
  WS,   // shuffle a neuron's incoming weights
  NEB,  // block a neuron's effect on the next layer
  NAI,  // invert the sign of a neuron's pre-activation
  NS,   // switch two neurons of one layer
};

/// What NEB does for neurons of the last encoder layer, whose outgoing
/// connections live in the classification head.
enum class NebHeadPolicy {
  ZeroHeadColumns,  // zero the head's input columns
  ZeroIncoming,     // zero the neuron's incoming row and bias; head untouched
};

NLOHMANN_JSON_SERIALIZE_ENUM(MutationKind, {{MutationKind::GF, "GF"},
                                            {MutationKind::WS, "WS"},
                                            {MutationKind::NEB, "NEB"},
                                            {MutationKind::NAI, "NAI"},
                                            {MutationKind::NS, "NS"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NebHeadPolicy, {{NebHeadPolicy::ZeroHeadColumns, "zero_head_columns"},
                                             {NebHeadPolicy::ZeroIncoming, "zero_incoming"}})

inline std::string kind_name(MutationKind k) { return nlohmann::json(k).get<std::string>(); }

struct MutationOp {
  MutationKind kind = MutationKind::NAI;
  double rate = 0.05;
  NebHeadPolicy neb_head = NebHeadPolicy::ZeroHeadColumns;

  void validate() const {
    if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("mutation rate must be in (0, 1)");
  }
  bool operator==(const MutationOp&) const = default;
};

/// ceil(rate * population), ignoring floating-point dust above an integer.
inline std::size_t selection_count(double rate, std::size_t population) {
  const double x = rate * static_cast<double>(population);
  return std::min(population, static_cast<std::size_t>(std::ceil(x - 1e-9)));
}

struct NeuronRef {
  std::size_t layer;
  std::size_t index;
  auto operator<=>(const NeuronRef&) const = default;
};

template <typename T>
struct MutationResult {
  ClassifierModel<T> model;
  /// Flat indices of the selected weights (GF) or neurons (other operators)
  /// over the concatenated encoder layers.
  std::vector<std::size_t> selected;
};

namespace detail {

template <typename T>
NeuronRef neuron_at(const ClassifierModel<T>& m, std::size_t flat) {
  for (std::size_t l = 0; l < m.encoder.size(); ++l) {
    if (flat < m.encoder[l].out) return {l, flat};
    flat -= m.encoder[l].out;
  }
  throw Error("neuron index out of range");
}

/// Weight matrix holding the outgoing connections of encoder layer `l`.
template <typename T>
DenseLayer<T>& next_layer(ClassifierModel<T>& m, std::size_t l) {
  return l + 1 < m.encoder.size() ? m.encoder[l + 1] : m.head;
}

template <typename T>
double layer_stddev(const DenseLayer<T>& layer) {
  double mean = 0.0;
  for (T w : layer.weight) mean += static_cast<double>(w);
  mean /= static_cast<double>(layer.weight.size());
  double var = 0.0;
  for (T w : layer.weight) var += (static_cast<double>(w) - mean) * (static_cast<double>(w) - mean);
  return std::sqrt(var / static_cast<double>(layer.weight.size()));
}

}  // namespace detail

/// Applies one operator. Only encoder parameters change, except NEB with
/// ZeroHeadColumns on last-layer neurons, which zeroes head input columns.
template <typename T>
MutationResult<T> mutate(const ClassifierModel<T>& base, const MutationOp& op, std::uint64_t seed) {
  op.validate();
  if (base.encoder.empty()) throw ConfigError("mutation needs at least one encoder layer");
  MutationResult<T> out{base, {}};
  auto& m = out.model;
  Rng rng(seed);

  if (op.kind == MutationKind::GF) {
    std::size_t total = 0;
    for (const auto& l : m.encoder) total += l.weight.size();
    const std::size_t k = selection_count(op.rate, total);
    if (k == 0) throw ConfigError("mutation rate selects zero weights");
    std::vector<double> sigma;
    for (const auto& l : base.encoder) sigma.push_back(detail::layer_stddev(l));
    out.selected = rng.sample(total, k);
    for (std::size_t flat : out.selected) {
      std::size_t l = 0, idx = flat;
      while (idx >= m.encoder[l].weight.size()) idx -= m.encoder[l++].weight.size();
      T& w = m.encoder[l].weight[idx];
      const T old = w;
      // Redraw the rare exact collision so every selected entry changes.
      for (int attempt = 0; attempt < 16 && w == old; ++attempt) {
        w = static_cast<T>(rng.normal(static_cast<double>(old), sigma[l]));
      }
    }
    return out;
  }

  std::size_t neurons = 0;
  for (const auto& l : m.encoder) neurons += l.out;
  const std::size_t k = selection_count(op.rate, neurons);
  if (k == 0) throw ConfigError("mutation rate selects zero neurons");
  if (op.kind == MutationKind::NS) {
    // ceil(k/2) pairs, each drawn inside one layer (weighted by how many
    // unused neurons the layer has left). Incoming weights and biases are
    // exchanged while outgoing weights stay in place, so each neuron takes
    // over the other's downstream role.
    std::vector<std::vector<std::size_t>> unused(m.encoder.size());
    std::vector<std::size_t> offset(m.encoder.size(), 0);
    for (std::size_t l = 0; l < m.encoder.size(); ++l) {
      if (l > 0) offset[l] = offset[l - 1] + m.encoder[l - 1].out;
      for (std::size_t j = 0; j < m.encoder[l].out; ++j) unused[l].push_back(j);
    }
    for (std::size_t p = 0; p < (k + 1) / 2; ++p) {
      std::size_t avail = 0;
      for (const auto& u : unused) avail += u.size() >= 2 ? u.size() : 0;
      if (avail == 0) throw ConfigError("NS needs a layer with two unswapped neurons");
      std::uint64_t r = rng.below(avail);
      std::size_t l = 0;
      while (unused[l].size() < 2 || r >= unused[l].size()) {
        if (unused[l].size() >= 2) r -= unused[l].size();
        ++l;
      }
      auto& u = unused[l];
      std::size_t pick[2];
      for (auto& x : pick) {
        const std::size_t at = rng.below(u.size());
        x = u[at];
        u.erase(u.begin() + static_cast<std::ptrdiff_t>(at));
      }
      auto& layer = m.encoder[l];
      std::swap_ranges(layer.row(pick[0]).begin(), layer.row(pick[0]).end(), layer.row(pick[1]).begin());
      std::swap(layer.bias[pick[0]], layer.bias[pick[1]]);
      out.selected.push_back(offset[l] + pick[0]);
      out.selected.push_back(offset[l] + pick[1]);
    }
    return out;
  }
  out.selected = rng.sample(neurons, k);

  switch (op.kind) {
    case MutationKind::WS:
      for (std::size_t flat : out.selected) {
        const auto n = detail::neuron_at(m, flat);
        rng.shuffle(m.encoder[n.layer].row(n.index));
      }
      break;
    case MutationKind::NEB:
      for (std::size_t flat : out.selected) {
        const auto n = detail::neuron_at(m, flat);
        const bool last = n.layer + 1 == m.encoder.size();
        if (last && op.neb_head == NebHeadPolicy::ZeroIncoming) {
          auto& layer = m.encoder[n.layer];
          std::fill(layer.row(n.index).begin(), layer.row(n.index).end(), T{});
          layer.bias[n.index] = T{};
        } else {
          auto& next = detail::next_layer(m, n.layer);
          for (std::size_t j = 0; j < next.out; ++j) next.w(j, n.index) = T{};
        }
      }
      break;
    case MutationKind::NAI:
      for (std::size_t flat : out.selected) {
        const auto n = detail::neuron_at(m, flat);
        auto& layer = m.encoder[n.layer];
        for (auto& w : layer.row(n.index)) w = -w;
        layer.bias[n.index] = -layer.bias[n.index];
      }
      break;
    case MutationKind::NS:
    case MutationKind::GF: break;
  }
  return out;
}

template <typename T>
ClassifierModel<T> apply_operator(const ClassifierModel<T>& base, const MutationOp& op, std::uint64_t seed) {
  return mutate(base, op, seed).model;
}

/// N mutants of a base model, each re-derived on demand from
/// (base, op, derive_seed(master_seed, i)).
template <typename T>
class MutantSet {
 public:
  MutantSet(std::shared_ptr<const ClassifierModel<T>> base, MutationOp op, std::size_t n,
            std::uint64_t master_seed)
      : base_(std::move(base)), op_(op), n_(n), master_seed_(master_seed) {
    if (!base_) throw ConfigError("mutant set needs a base model");
    if (n_ < 1) throw ConfigError("mutant count N must be >= 1");
    op_.validate();
  }

  std::size_t size() const { return n_; }
  const MutationOp& op() const { return op_; }
  std::uint64_t master_seed() const { return master_seed_; }
  const ClassifierModel<T>& base() const { return *base_; }
  std::shared_ptr<const ClassifierModel<T>> base_ptr() const { return base_; }

  std::uint64_t seed(std::size_t i) const { return derive_seed(master_seed_, i); }

  ClassifierModel<T> materialize(std::size_t i) const {
    if (i >= n_) throw Error("mutant index out of range");
    return apply_operator(*base_, op_, seed(i));
  }

 private:
  std::shared_ptr<const ClassifierModel<T>> base_;
  MutationOp op_;
  std::size_t n_;
  std::uint64_t master_seed_;
};

template <typename T>
MutantSet<T> generate_mutants(std::shared_ptr<const ClassifierModel<T>> base, const MutationOp& op, std::size_t n,
                              std::uint64_t master_seed) {
  MutantSet<T> set(std::move(base), op, n, master_seed);
  // Fail early on operator preconditions rather than mid-way through PCVs.
  (void)set.materialize(0);
  return set;
}

inline nlohmann::json mutant_manifest(const MutantSet<float>& set) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < set.size(); ++i) seeds.push_back(set.seed(i));
  return {
      {"format", "mutdet-mutants/1"},
      {"base_model_sha256", model_hash(set.base())},
      {"op", set.op().kind},
      {"mutation_rate", set.op().rate},
      {"neb_head_policy", set.op().neb_head},
      {"n", set.size()},
      {"master_seed", set.master_seed()},
      {"seeds", seeds},
  };
}

/// Rebuilds a mutant set from its manifest; the base model must match the
/// recorded hash.
inline MutantSet<float> mutants_from_manifest(const nlohmann::json& j, std::shared_ptr<const Model> base) {
  try {
    if (j.at("format").get<std::string>() != "mutdet-mutants/1") throw ConfigError("unknown mutant manifest format");
    if (j.at("base_model_sha256").get<std::string>() != model_hash(*base)) {
      throw ConfigError("mutant manifest does not match the base model");
    }
    MutationOp op{j.at("op").get<MutationKind>(), j.at("mutation_rate").get<double>(),
                  j.value("neb_head_policy", NebHeadPolicy::ZeroHeadColumns)};
    return MutantSet<float>(std::move(base), op, j.at("n").get<std::size_t>(),
                            j.at("master_seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid mutant manifest: ") + e.what());
  }
}

}  // namespace mutdet
