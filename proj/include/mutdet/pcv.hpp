#pragma once

// Prediction change between a model and its mutants, and the per-input
// prediction-change vector (one entry per mutant).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mutdet/error.hpp"
#include "mutdet/mutation.hpp"
#include "mutdet/textmodel.hpp"

namespace mutdet {

/// Projection of a probability vector used by the prediction change.
enum class PcvProjection {
  TargetClass,  // |p(c_t) - p'(c_t)|
  HalfL1,       // 0.5 * sum_c |p(c) - p'(c)|
};

NLOHMANN_JSON_SERIALIZE_ENUM(PcvProjection, {{PcvProjection::TargetClass, "target_class"},
                                             {PcvProjection::HalfL1, "half_l1"}})

template <typename T>
double probability_change(std::span<const T> p, std::span<const T> q, std::size_t target_class,
                          PcvProjection projection) {
  if (projection == PcvProjection::TargetClass) {
    return std::abs(static_cast<double>(p[target_class]) - static_cast<double>(q[target_class]));
  }
  double s = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) s += std::abs(static_cast<double>(p[c]) - static_cast<double>(q[c]));
  return std::min(1.0, 0.5 * s);
}

template <typename T>
double prediction_change(std::span<const TokenId> x, const ClassifierModel<T>& m, const ClassifierModel<T>& mutant,
                         std::size_t target_class, PcvProjection projection = PcvProjection::TargetClass) {
  if (m.dims != mutant.dims) throw ConfigError("prediction_change: models have different shapes");
  if (target_class >= m.dims.num_classes) throw ConfigError("prediction_change: target class out of range");
  const auto p = predict_proba(m, x);
  const auto q = predict_proba(mutant, x);
  return probability_change<T>(p, q, target_class, projection);
}

struct PredictionChangeVector {
  std::string origin_id;
  std::string pipeline;
  bool is_backdoor = false;
  std::vector<double> values;

  double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
};

/// Entry i is prediction_change(x, base, mutant_i).
template <typename T>
std::vector<double> compute_pcv(std::span<const TokenId> x, const MutantSet<T>& mutants, std::size_t target_class,
                                PcvProjection projection = PcvProjection::TargetClass) {
  std::vector<double> out(mutants.size());
  for (std::size_t i = 0; i < mutants.size(); ++i) {
    out[i] = prediction_change(x, mutants.base(), mutants.materialize(i), target_class, projection);
  }
  return out;
}

enum class PcvOrder {
  MutantMajor,  // materialize each mutant once, evaluate every sample on it
  SampleMajor,  // materialize all mutants up front, then walk sample by sample
};

/// Element k equals compute_pcv(samples[k], ...). Work is spread over
/// `threads` workers (0 = hardware concurrency); results are merged by index.
template <typename T>
std::vector<std::vector<double>> batch_pcv(std::span<const TokenSeq> samples, const MutantSet<T>& mutants,
                                           std::size_t target_class,
                                           PcvProjection projection = PcvProjection::TargetClass,
                                           PcvOrder order = PcvOrder::MutantMajor, unsigned threads = 0) {
  const std::size_t n = mutants.size();
  std::vector<std::vector<double>> out(samples.size(), std::vector<double>(n, 0.0));
  if (samples.empty()) return out;
  if (target_class >= mutants.base().dims.num_classes) throw ConfigError("batch_pcv: target class out of range");

  const auto& base = mutants.base();
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());

  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run_parallel = [&](std::size_t jobs, auto&& job) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < jobs; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = jobs;
        }
      }
    };
    const unsigned count = static_cast<unsigned>(std::min<std::size_t>(threads, jobs));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < count; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  };

  // Base-model quantities, validated per sample so errors name the index.
  std::vector<std::vector<T>> pooled(samples.size());
  std::vector<std::vector<T>> base_probs(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    try {
      pooled[k] = pooled_embedding(base, samples[k]);
    } catch (const Error& e) {
      throw Error("sample " + std::to_string(k) + ": " + e.what());
    }
    base_probs[k] = forward_pooled<T>(base, pooled[k]);
  }

  if (order == PcvOrder::MutantMajor) {
    // Mutation never touches the embedding, so pooled inputs are shared.
    run_parallel(n, [&](std::size_t i) {
      const auto mutant = mutants.materialize(i);
      for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto q = forward_pooled<T>(mutant, pooled[k]);
        out[k][i] = probability_change<T>(base_probs[k], q, target_class, projection);
      }
    });
  } else {
    std::vector<ClassifierModel<T>> all(n);
    run_parallel(n, [&](std::size_t i) { all[i] = mutants.materialize(i); });
    run_parallel(samples.size(), [&](std::size_t k) {
      for (std::size_t i = 0; i < n; ++i) {
        out[k][i] = prediction_change(samples[k], base, all[i], target_class, projection);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: origin_id,pipeline,is_backdoor,pc_0,...,pc_{N-1}

namespace detail {
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote in CSV", lineno);
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace detail

inline void write_pcv_csv(const std::filesystem::path& path, std::span<const PredictionChangeVector> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::size_t n = rows.empty() ? 0 : rows.front().values.size();
  out << "origin_id,pipeline,is_backdoor";
  for (std::size_t i = 0; i < n; ++i) out << ",pc_" << i;
  out << '\n';
  for (const auto& r : rows) {
    if (r.values.size() != n) throw Error("PCV rows have different lengths");
    out << detail::csv_field(r.origin_id) << ',' << detail::csv_field(r.pipeline) << ',' << (r.is_backdoor ? 1 : 0);
    for (double v : r.values) out << ',' << detail::format_real(v);
    out << '\n';
  }
}

inline std::vector<PredictionChangeVector> read_pcv_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open PCV file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("PCV file is empty");
  const auto header = detail::csv_split(line, 1);
  if (header.size() < 3 || header[0] != "origin_id") throw ParseError("bad PCV header", 1);
  const std::size_t n = header.size() - 3;
  std::vector<PredictionChangeVector> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    // A quoted field may span lines.
    std::string more;
    while (std::count(line.begin(), line.end(), '"') % 2 == 1 && std::getline(in, more)) line += "\n" + more;
    const auto f = detail::csv_split(line, lineno);
    if (f.size() != n + 3) throw ParseError("wrong number of PCV columns", lineno);
    PredictionChangeVector r;
    r.origin_id = f[0];
    r.pipeline = f[1];
    if (f[2] != "0" && f[2] != "1") throw ParseError("is_backdoor must be 0 or 1", lineno);
    r.is_backdoor = f[2] == "1";
    r.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      try {
        r.values.push_back(std::stod(f[3 + i]));
      } catch (const std::exception&) {
        throw ParseError("bad PCV value", lineno);
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mutdet
