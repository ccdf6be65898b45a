#pragma once

#include <cstdint>
#include <vector>

#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"

namespace support {

/// Three encoder layers with distinct widths so layer bookkeeping errors
/// show up.
inline mutdet::ModelDims toy_dims() { return {20, 6, {10, 8, 6}, 3}; }

/// Deterministic weights with random biases (init_model leaves biases zero,
/// which would hide bias handling).
template <typename T = float>
mutdet::ClassifierModel<T> toy_model(std::uint64_t seed = 17) {
  auto m = mutdet::init_model<T>(toy_dims(), seed);
  mutdet::Rng rng(seed + 1000);
  for (auto& l : m.encoder) {
    for (auto& b : l.bias) b = static_cast<T>(rng.uniform(-0.2, 0.2));
  }
  for (auto& b : m.head.bias) b = static_cast<T>(rng.uniform(-0.2, 0.2));
  return m;
}

inline std::vector<mutdet::TokenSeq> toy_inputs(std::size_t count, std::size_t len, std::uint64_t seed,
                                                std::uint32_t vocab = 20) {
  mutdet::Rng rng(seed);
  std::vector<mutdet::TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    mutdet::TokenSeq t(len, mutdet::Vocab::kPad);
    const std::size_t used = 1 + rng.below(len);
    for (std::size_t k = 0; k < used; ++k) t[k] = static_cast<mutdet::TokenId>(1 + rng.below(vocab - 1));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace support
