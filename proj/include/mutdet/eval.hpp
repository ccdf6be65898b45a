#pragma once

// Detection metrics: confusion counts, DR / FPR, F1, AUC, ROC, and the
// one-sided Mann-Whitney test; versioned JSON reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mutdet/error.hpp"
#include "mutdet/hash.hpp"

namespace mutdet {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  static double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  }
  /// Detection rate (true-positive rate on backdoor samples).
  double dr() const { return ratio(tp, tp + fn); }
  double fpr() const { return ratio(fp, fp + tn); }
  double precision() const { return ratio(tp, tp + fp); }
  double recall() const { return dr(); }

  bool operator==(const ConfusionCounts&) const = default;
};

/// `flagged[i]` is the detector verdict, `truth[i]` whether sample i is a
/// backdoor sample.
inline ConfusionCounts confusion(const std::vector<bool>& flagged, const std::vector<bool>& truth) {
  if (flagged.size() != truth.size()) throw ConfigError("confusion: verdicts and ground truth differ in length");
  ConfusionCounts c;
  for (std::size_t i = 0; i < flagged.size(); ++i) {
    if (truth[i]) {
      (flagged[i] ? c.tp : c.fn)++;
    } else {
      (flagged[i] ? c.fp : c.tn)++;
    }
  }
  return c;
}

/// Harmonic mean of precision and recall; 0 when either is undefined or TP=0.
inline double f1(const ConfusionCounts& c) {
  if (c.tp == 0) return 0.0;
  const double p = c.precision();
  const double r = c.recall();
  return 2.0 * p * r / (p + r);
}

namespace detail {
inline void check_auc_inputs(std::span<const double> scores, const std::vector<bool>& truth) {
  if (scores.size() != truth.size()) throw ConfigError("auc: scores and ground truth differ in length");
  const auto pos = std::count(truth.begin(), truth.end(), true);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(truth.size())) {
    throw ConfigError("auc: ground truth must contain both classes");
  }
}

/// Average (mid) ranks, 1-based.
inline std::vector<double> mid_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace detail

/// P(score_backdoor > score_clean) + 0.5 P(equal), by direct pair counting.
inline double auc_pairwise(std::span<const double> scores, const std::vector<bool>& truth) {
  detail::check_auc_inputs(scores, truth);
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!truth[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (truth[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

/// Same quantity from the rank-sum (Mann-Whitney U) of the backdoor scores.
inline double auc_rank(std::span<const double> scores, const std::vector<bool>& truth) {
  detail::check_auc_inputs(scores, truth);
  const auto ranks = detail::mid_ranks(scores);
  double rank_sum = 0.0;
  double npos = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (truth[i]) {
      rank_sum += ranks[i];
      npos += 1.0;
    }
  }
  const double nneg = static_cast<double>(scores.size()) - npos;
  return (rank_sum - npos * (npos + 1.0) / 2.0) / (npos * nneg);
}

inline double auc(std::span<const double> scores, const std::vector<bool>& truth) {
  return scores.size() <= 10000 ? auc_pairwise(scores, truth) : auc_rank(scores, truth);
}

struct RocPoint {
  double threshold;  // flag when score > threshold
  double dr;
  double fpr;
};

/// One point per distinct score plus an all-flagged point, thresholds
/// descending.
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, const std::vector<bool>& truth) {
  detail::check_auc_inputs(scores, truth);
  std::vector<double> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(-std::numeric_limits<double>::infinity());
  std::vector<RocPoint> curve;
  for (double t : thresholds) {
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool flag = scores[i] > t;
      if (truth[i]) {
        (flag ? c.tp : c.fn)++;
      } else {
        (flag ? c.fp : c.tn)++;
      }
    }
    curve.push_back({t, c.dr(), c.fpr()});
  }
  return curve;
}

struct MannWhitneyResult {
  double u = 0.0;        // U statistic of the first sample
  double z = 0.0;        // normal approximation with tie and continuity correction
  double p_value = 1.0;  // one-sided: first sample stochastically greater
};

inline MannWhitneyResult mann_whitney_greater(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ConfigError("mann_whitney: both samples must be non-empty");
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  const auto ranks = detail::mid_ranks(all);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double n = na + nb;
  double ra = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ra += ranks[i];
  MannWhitneyResult r;
  r.u = ra - na * (na + 1.0) / 2.0;

  std::vector<double> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  const double mean = na * nb / 2.0;
  if (var <= 0.0) {
    r.z = 0.0;
    r.p_value = r.u > mean ? 0.0 : 1.0;
    return r;
  }
  r.z = (r.u - mean - 0.5) / std::sqrt(var);
  r.p_value = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

/// SHA-256 of the canonical (key-sorted) JSON dump.
inline std::string config_fingerprint(const nlohmann::json& config) { return sha256_hex(config.dump()); }

struct DetectionReport {
  static constexpr int kSchemaVersion = 1;

  ConfusionCounts counts;
  double dr = 0.0;
  double fpr = 0.0;
  double auc = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  std::string mode;
  std::size_t pipelines = 0;
  std::string fingerprint;

  bool operator==(const DetectionReport&) const = default;
};

/// Verdict flags are `score > threshold`; `scores` are the max-over-pipeline
/// detector outputs.
inline DetectionReport make_report(std::span<const double> scores, const std::vector<bool>& truth, double threshold,
                                   std::string mode, std::size_t pipelines, std::string fingerprint) {
  std::vector<bool> flagged(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) flagged[i] = scores[i] > threshold;
  DetectionReport r;
  r.counts = confusion(flagged, truth);
  r.dr = r.counts.dr();
  r.fpr = r.counts.fpr();
  r.f1 = mutdet::f1(r.counts);
  r.auc = mutdet::auc(scores, truth);
  r.threshold = threshold;
  r.mode = std::move(mode);
  r.pipelines = pipelines;
  r.fingerprint = std::move(fingerprint);
  return r;
}

inline nlohmann::json report_to_json(const DetectionReport& r) {
  return {
      {"schema_version", DetectionReport::kSchemaVersion},
      {"dr", r.dr},
      {"fpr", r.fpr},
      {"auc", r.auc},
      {"f1", r.f1},
      {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
      {"threshold", r.threshold},
      {"mode", r.mode},
      {"pipelines", r.pipelines},
      {"config_fingerprint", r.fingerprint},
  };
}

inline DetectionReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != DetectionReport::kSchemaVersion) {
      throw ParseError("unsupported report schema version");
    }
    DetectionReport r;
    const auto& c = j.at("counts");
    r.counts = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(), c.at("tn").get<std::size_t>(),
                c.at("fn").get<std::size_t>()};
    r.dr = j.at("dr").get<double>();
    r.fpr = j.at("fpr").get<double>();
    r.auc = j.at("auc").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.threshold = j.at("threshold").get<double>();
    r.mode = j.at("mode").get<std::string>();
    r.pipelines = j.at("pipelines").get<std::size_t>();
    r.fingerprint = j.at("config_fingerprint").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid report: ") + e.what());
  }
}

inline void emit_report(const DetectionReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report " + path.string());
  out << report_to_json(report).dump(2) << '\n';
  if (!out) throw Error("failed writing report " + path.string());
}

inline DetectionReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open report " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid report JSON: ") + e.what());
  }
  return report_from_json(j);
}

inline void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  char buf[96];
  out << "threshold,dr,fpr\n";
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.dr, p.fpr);
    out << buf;
  }
}

}  // namespace mutdet
