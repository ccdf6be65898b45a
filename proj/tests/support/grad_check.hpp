#pragma once

#include <cmath>
#include <vector>

#include "mutdet/textmodel.hpp"

namespace support {

struct GradCheck {
  double relative_error = 0.0;  // ||analytic - numeric|| / (||analytic|| + ||numeric||)
  double worst_entry = 0.0;     // max |a - n| / max(|a| + |n|, 1e-6)
  std::size_t params = 0;
};

/// Central differences with step eps on every parameter of a double model.
inline GradCheck gradient_check(mutdet::ClassifierModel<double> model,
                                const std::vector<mutdet::EncodedExample>& data, double eps = 1e-6) {
  std::vector<const mutdet::EncodedExample*> batch;
  for (const auto& ex : data) batch.push_back(&ex);
  auto grad = mutdet::ClassifierModel<double>::zeros(model.dims);
  mutdet::loss_and_gradient<double>(model, batch, grad);
  std::vector<double> analytic;
  grad.for_each_array([&](std::span<const double> a) { analytic.insert(analytic.end(), a.begin(), a.end()); });

  std::vector<std::span<double>> arrays;
  model.for_each_array([&](std::span<double> a) { arrays.push_back(a); });
  auto scratch = mutdet::ClassifierModel<double>::zeros(model.dims);
  std::vector<double> numeric;
  for (auto a : arrays) {
    for (auto& p : a) {
      const double keep = p;
      p = keep + eps;
      const double up = mutdet::loss_and_gradient<double>(model, batch, scratch);
      p = keep - eps;
      const double down = mutdet::loss_and_gradient<double>(model, batch, scratch);
      p = keep;
      numeric.push_back((up - down) / (2.0 * eps));
    }
  }
  GradCheck r;
  r.params = numeric.size();
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
    r.worst_entry = std::max(r.worst_entry, std::abs(d) / std::max(std::abs(analytic[i]) + std::abs(numeric[i]), 1e-6));
  }
  r.relative_error = std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nn));
  return r;
}

/// Small random model and batch for gradient checks.
inline GradCheck standard_gradient_check() {
  const mutdet::ModelDims dims{12, 5, {7, 4}, 3};
  auto model = mutdet::init_model<double>(dims, 11);
  mutdet::Rng rng(12);
  for (auto& l : model.encoder) {
    for (auto& b : l.bias) b = rng.uniform(-0.3, 0.3);
  }
  std::vector<mutdet::EncodedExample> data;
  for (std::size_t i = 0; i < 6; ++i) {
    mutdet::TokenSeq t(8, mutdet::Vocab::kPad);
    const std::size_t used = 2 + rng.below(6);
    for (std::size_t k = 0; k < used; ++k) t[k] = static_cast<mutdet::TokenId>(1 + rng.below(11));
    data.push_back({t, static_cast<std::size_t>(rng.below(3))});
  }
  return gradient_check(model, data);
}

}  // namespace support
