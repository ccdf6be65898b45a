#pragma once

// Reference implementations written independently of the library, plus the
// comparison suite used by the acceptance binary.

#include <cmath>
#include <string>
#include <vector>

#include "mutdet/eval.hpp"
#include "mutdet/rng.hpp"

namespace support {

/// O(n^2) AUC: fraction of (backdoor, clean) pairs ordered correctly, ties
/// counting one half.
inline double auc_oracle(const std::vector<double>& scores, const std::vector<bool>& truth) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (!truth[i] || truth[j]) continue;
      den += 1.0;
      num += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

struct RandomScores {
  std::vector<double> scores;
  std::vector<bool> truth;
};

/// Score sets with both classes present and plenty of ties (scores rounded
/// to a coarse grid in every third set).
inline RandomScores random_scores(std::uint64_t seed) {
  mutdet::Rng rng(seed);
  RandomScores r;
  const std::size_t n = 2 + rng.below(400);
  const bool coarse = seed % 3 == 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i == 0 ? true : (i == 1 ? false : rng.uniform() < 0.4);
    double s = rng.uniform() + (pos ? 0.3 : 0.0);
    if (coarse) s = std::round(s * 10.0) / 10.0;
    r.scores.push_back(s);
    r.truth.push_back(pos);
  }
  return r;
}

/// Returns violations; tolerance 1e-12 on AUC agreement.
inline std::vector<std::string> metric_suite() {
  std::vector<std::string> bad;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = random_scores(seed);
    const double oracle = auc_oracle(r.scores, r.truth);
    const double rank = mutdet::auc_rank(r.scores, r.truth);
    const double pairwise = mutdet::auc_pairwise(r.scores, r.truth);
    if (std::abs(rank - oracle) > 1e-12) bad.push_back("auc_rank differs from oracle for set " + std::to_string(seed));
    if (std::abs(pairwise - oracle) > 1e-12) bad.push_back("auc_pairwise differs for set " + std::to_string(seed));

    std::vector<bool> flagged;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
      const bool f = r.scores[i] > 0.5;
      flagged.push_back(f);
      if (f && r.truth[i]) ++tp;
      if (f && !r.truth[i]) ++fp;
      if (!f && !r.truth[i]) ++tn;
      if (!f && r.truth[i]) ++fn;
    }
    const auto c = mutdet::confusion(flagged, r.truth);
    if (c.tp != tp || c.fp != fp || c.tn != tn || c.fn != fn) bad.push_back("confusion tally mismatch");
    const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    if (std::abs(mutdet::f1(c) - f1) > 1e-12) bad.push_back("f1 mismatch for set " + std::to_string(seed));
  }
  // Hand tallies: 3 TP, 1 FP, 4 TN, 2 FN -> P = 3/4, R = 3/5, F1 = 2/3.
  const mutdet::ConfusionCounts hand{3, 1, 4, 2};
  if (std::abs(mutdet::f1(hand) - 2.0 / 3.0) > 1e-12) bad.push_back("f1 hand example");
  if (std::abs(hand.dr() - 0.6) > 1e-12 || std::abs(hand.fpr() - 0.2) > 1e-12) bad.push_back("dr/fpr hand example");
  if (mutdet::f1({0, 3, 5, 2}) != 0.0) bad.push_back("f1 with no true positives must be 0");
  return bad;
}

}  // namespace support
