#pragma once

// Labeled text ingestion, tokenization, vocabulary and deterministic
// stratified splits.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mutdet/error.hpp"
#include "mutdet/rng.hpp"

namespace mutdet {

struct LabeledExample {
  std::string text;
  std::size_t label = 0;
  std::string origin_id;

  bool operator==(const LabeledExample&) const = default;
};

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// ---------------------------------------------------------------------------
// Homograph table

/// Latin letter -> visually confusable non-ASCII code point (UTF-8).
class HomographTable {
 public:
  HomographTable() = default;

  void add(char from, std::string to) {
    if (to.empty()) throw ConfigError("homograph replacement for '" + std::string(1, from) + "' is empty");
    if (static_cast<unsigned char>(to[0]) < 0x80) {
      throw ConfigError("homograph replacement for '" + std::string(1, from) + "' must be non-ASCII");
    }
    auto [it, inserted] = map_.emplace(from, to);
    if (!inserted) it->second = to;
    targets_.insert(std::move(to));
  }

  bool can_replace(char c) const { return map_.count(c) != 0; }
  const std::string& replacement(char c) const { return map_.at(c); }
  std::size_t size() const { return map_.size(); }
  const std::map<char, std::string>& entries() const { return map_; }

  /// True if `word` contains any replacement code point from this table.
  bool contains_confusable(std::string_view word) const {
    for (const auto& t : targets_) {
      if (word.find(t) != std::string_view::npos) return true;
    }
    return false;
  }

  /// Lookalike pairs compiled into the library; data/homographs.tsv holds
  /// the same table.
  static const HomographTable& builtin() {
    static const HomographTable table = [] {
      HomographTable t;
      const std::array<std::pair<char, const char*>, 26> pairs{{
          {'a', "а"}, {'c', "с"}, {'d', "ԁ"}, {'e', "е"},
          {'h', "һ"}, {'i', "і"}, {'j', "ј"}, {'k', "κ"},
          {'l', "ӏ"}, {'n', "ո"}, {'o', "о"}, {'p', "р"},
          {'q', "ԛ"}, {'r', "г"}, {'s', "ѕ"}, {'t', "τ"},
          {'u', "υ"}, {'v', "ν"}, {'w', "ԝ"}, {'x', "х"},
          {'y', "у"}, {'A', "А"}, {'B', "В"}, {'E', "Е"},
          {'M', "М"}, {'T', "Т"},
      }};
      for (const auto& [from, to] : pairs) t.add(from, to);
      return t;
    }();
    return table;
  }

  /// "from_char<TAB>to_char" per line; blank lines and '#' comments skipped.
  static HomographTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open homograph table " + path.string());
    HomographTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab != 1 || tab + 1 >= line.size()) {
        throw ParseError("expected 'from_char<TAB>to_char' in " + path.string(), lineno);
      }
      try {
        t.add(line[0], line.substr(tab + 1));
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), lineno);
      }
    }
    return t;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& [from, to] : map_) out << from << '\t' << to << '\n';
  }

 private:
  std::map<char, std::string> map_;
  std::unordered_set<std::string> targets_;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {
inline bool is_space(unsigned char c) { return c < 0x80 && std::isspace(c); }
inline bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
inline bool is_separator(unsigned char c) { return is_space(c) || is_punct(c); }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}
}  // namespace detail

/// Byte span [begin, end) of one word inside a text.
struct WordSpan {
  std::size_t begin;
  std::size_t end;
};

/// Words are maximal runs of bytes that are neither ASCII whitespace nor
/// ASCII punctuation; non-ASCII bytes stay inside words.
inline std::vector<WordSpan> word_spans(std::string_view text) {
  std::vector<WordSpan> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && detail::is_separator(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !detail::is_separator(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) spans.push_back({start, i});
  }
  return spans;
}

/// Lowercased words, punctuation stripped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& s : word_spans(text)) {
    std::string w(text.substr(s.begin, s.end - s.begin));
    for (auto& c : w) {
      if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr std::string_view kPadToken = "[PAD]";
  static constexpr std::string_view kUnkToken = "[UNK]";

  Vocab() : tokens_{std::string(kPadToken), std::string(kUnkToken)} {
    ids_.emplace(tokens_[0], kPad);
    ids_.emplace(tokens_[1], kUnk);
  }

  /// Appends a token with the next free id. Returns its id.
  TokenId add(const std::string& token) {
    if (auto it = ids_.find(token); it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const { return tokens_.at(id); }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary " + path.string());
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open vocabulary " + path.string());
    Vocab v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw ParseError("expected 'token<TAB>id'", lineno);
      const std::string tok = line.substr(0, tab);
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw ParseError("bad vocabulary id", lineno);
      }
      if (id < 2) {
        if (tok != v.tokens_[id]) throw ParseError("ids 0 and 1 are reserved for [PAD] and [UNK]", lineno);
        continue;
      }
      if (id != v.tokens_.size()) throw ParseError("vocabulary ids must be consecutive", lineno);
      if (v.contains(tok)) throw ParseError("duplicate vocabulary token '" + tok + "'", lineno);
      v.add(tok);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Keeps tokens with frequency >= min_freq, at most max_size of them, by
/// descending frequency then lexicographic order. Words carrying a homograph
/// code point are never admitted.
inline Vocab build_vocab(std::span<const LabeledExample> examples, std::size_t min_freq,
                         std::size_t max_size,
                         const HomographTable& homographs = HomographTable::builtin()) {
  if (examples.empty()) throw ConfigError("build_vocab: corpus is empty");
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& ex : examples) {
    for (auto& w : tokenize(ex.text)) ++freq[std::move(w)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : freq) {
    if (n >= min_freq && !homographs.contains_confusable(tok) && tok != Vocab::kPadToken &&
        tok != Vocab::kUnkToken) {
      ranked.emplace_back(tok, n);
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > max_size) ranked.resize(max_size);
  Vocab v;
  for (const auto& [tok, n] : ranked) v.add(tok);
  return v;
}

/// Token ids padded or truncated to exactly max_len. Out-of-vocabulary words
/// and words containing a homograph code point map to UNK.
inline TokenSeq encode(const Vocab& vocab, std::string_view text, std::size_t max_len,
                       const HomographTable& homographs = HomographTable::builtin()) {
  if (max_len < 1) throw ConfigError("encode: max_len must be >= 1");
  TokenSeq ids;
  ids.reserve(max_len);
  for (const auto& w : tokenize(text)) {
    if (ids.size() == max_len) break;
    ids.push_back(homographs.contains_confusable(w) ? Vocab::kUnk : vocab.id(w));
  }
  ids.resize(max_len, Vocab::kPad);
  return ids;
}

// ---------------------------------------------------------------------------
// Corpus and splits

enum class Split : std::uint8_t { TargetTrain = 0, TargetVal = 1, RetrainPool = 2, DetectorPool = 3 };

inline constexpr std::array<std::string_view, 4> kSplitNames{"target-train", "target-val",
                                                             "retrain-pool", "detector-pool"};

struct Corpus {
  std::vector<LabeledExample> examples;
  std::size_t class_count = 0;
  std::vector<Split> assignment;  // empty until split() runs

  std::vector<LabeledExample> subset(Split s) const {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] == s) out.push_back(examples[i]);
    }
    return out;
  }

  std::vector<std::size_t> label_histogram() const {
    std::vector<std::size_t> h(class_count, 0);
    for (const auto& ex : examples) ++h[ex.label];
    return h;
  }
};

/// Parses JSONL with string "text", non-negative integer "label" and optional
/// string "origin_id" (default "<name>:<line>").
inline Corpus read_jsonl(std::istream& in, const std::string& name) {
  Corpus c;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(name + ": invalid JSON: " + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError(name + ": expected a JSON object", lineno);
    if (!j.contains("text") || !j["text"].is_string()) {
      throw ParseError(name + ": missing string field \"text\"", lineno);
    }
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      throw ParseError(name + ": missing integer field \"label\"", lineno);
    }
    const auto label = j["label"].get<long long>();
    if (label < 0) throw ParseError(name + ": negative label", lineno);
    LabeledExample ex;
    ex.text = j["text"].get<std::string>();
    if (detail::trim(ex.text).empty()) throw ParseError(name + ": empty text", lineno);
    ex.label = static_cast<std::size_t>(label);
    if (j.contains("origin_id")) {
      if (!j["origin_id"].is_string()) throw ParseError(name + ": \"origin_id\" must be a string", lineno);
      ex.origin_id = j["origin_id"].get<std::string>();
    } else {
      ex.origin_id = name + ":" + std::to_string(lineno);
    }
    if (!seen.insert(ex.origin_id).second) {
      throw ParseError(name + ": duplicate origin_id '" + ex.origin_id + "'", lineno);
    }
    max_label = std::max(max_label, ex.label);
    c.examples.push_back(std::move(ex));
  }
  if (c.examples.empty()) throw ParseError(name + ": corpus is empty");
  c.class_count = max_label + 1;
  return c;
}

inline Corpus load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open corpus " + path.string());
  return read_jsonl(in, path.filename().string());
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const LabeledExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json j{{"origin_id", ex.origin_id}, {"text", ex.text}, {"label", ex.label}};
    out << j.dump() << '\n';
  }
}

struct SplitFractions {
  double target_train = 0.55;
  double target_val = 0.15;
  double retrain_pool = 0.30;
  double detector_pool = 0.0;

  std::array<double, 4> as_array() const { return {target_train, target_val, retrain_pool, detector_pool}; }
};

namespace detail {
/// Largest-remainder apportionment of n items over fractions.
inline std::array<std::size_t, 4> apportion(std::size_t n, const std::array<double, 4>& f) {
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    const double exact = f[s] * static_cast<double>(n);
    counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < 4; ++s) {
      if (rem[s] > rem[best]) best = s;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  while (assigned > n) {
    for (std::size_t s = 4; s-- > 0;) {
      if (counts[s] > 0) {
        --counts[s];
        --assigned;
        break;
      }
    }
  }
  return counts;
}
}  // namespace detail

/// Stratified deterministic split. Each class is ordered by a seeded hash of
/// origin_id, classes are interleaved proportionally, and contiguous runs of
/// the interleaved order go to each split. Split sizes are exact to within one
/// example and per-class proportions within one example per split.
inline Corpus split(Corpus corpus, const SplitFractions& fractions, std::uint64_t split_seed) {
  const auto f = fractions.as_array();
  double sum = 0.0;
  for (double x : f) {
    if (x < 0.0) throw ConfigError("split: fractions must be non-negative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

  const std::size_t n = corpus.examples.size();
  const std::uint64_t salt = splitmix64(split_seed);
  std::vector<std::vector<std::size_t>> by_class(corpus.class_count);
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    keys[i] = splitmix64(fnv1a64(corpus.examples[i].origin_id) ^ salt);
    by_class[corpus.examples[i].label].push_back(i);
  }
  struct Slot {
    double position;
    std::uint64_t key;
    std::size_t index;
  };
  std::vector<Slot> order;
  order.reserve(n);
  for (auto& members : by_class) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return keys[a] != keys[b] ? keys[a] < keys[b]
                                : corpus.examples[a].origin_id < corpus.examples[b].origin_id;
    });
    for (std::size_t r = 0; r < members.size(); ++r) {
      order.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(members.size()),
                       keys[members[r]], members[r]});
    }
  }
  std::sort(order.begin(), order.end(), [&](const Slot& a, const Slot& b) {
    if (a.position != b.position) return a.position < b.position;
    return a.key < b.key;
  });
  const auto counts = detail::apportion(n, f);
  corpus.assignment.assign(n, Split::TargetTrain);
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < counts[s]; ++k) {
      corpus.assignment[order[cursor++].index] = static_cast<Split>(s);
    }
  }
  return corpus;
}

}  // namespace mutdet
