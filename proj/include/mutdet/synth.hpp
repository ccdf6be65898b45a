#pragma once

// Synthetic two-class sentiment corpus for desk-scale experiments, with
// rule-based "styled" rewrites keyed by origin_id.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mutdet/corpus.hpp"
#include "mutdet/rng.hpp"

namespace mutdet::synth {

struct SentimentCorpusConfig {
  std::size_t size = 2000;
  std::uint64_t seed = 1;
  std::string id_prefix = "s";
  double positive_fraction = 0.5;
  /// Probability that a sentiment slot takes the opposite polarity.
  double polarity_noise = 0.25;
  /// Probability of an extra neutral filler sentence.
  double filler_rate = 0.5;
};

namespace detail {

inline constexpr std::array<std::string_view, 20> kPositive{
    "good",     "great",  "excellent", "wonderful", "amazing", "lovely",  "delightful",
    "superb",   "fantastic", "enjoyable", "brilliant", "charming", "pleasant", "perfect",
    "beautiful", "awesome", "tasty",    "impressive", "friendly", "fresh"};

inline constexpr std::array<std::string_view, 20> kNegative{
    "bad",    "terrible", "awful",  "horrible", "poor",   "boring",  "disappointing",
    "dull",   "mediocre", "bland",  "rude",     "dirty",  "slow",    "stale",
    "annoying", "weak",   "painful", "messy",   "greasy", "overpriced"};

inline constexpr std::array<std::string_view, 24> kNouns{
    "movie", "film",   "plot",  "story", "service", "staff",  "meal",   "dish",
    "menu",  "actor",  "scene", "music", "room",    "price",  "ending", "script",
    "waiter", "table", "drink", "dessert", "soundtrack", "cast", "decor", "portion"};

inline constexpr std::array<std::string_view, 8> kAdverbs{"really", "very",   "quite",  "truly",
                                                           "rather", "pretty", "so", "fairly"};

// Everyday words that also make up trigger sentences and styled rewrites, so
// they are ordinary in-vocabulary tokens.
inline constexpr std::array<std::string_view, 64> kFiller{
    "i",       "have",    "tried",   "this",     "place",  "and",     "their",   "food",
    "with",    "my",      "friends", "last",     "weekend", "bought", "it",      "from",
    "a",       "store",   "here",    "is",       "the",    "latest",  "news",    "information",
    "we",      "report",  "are",     "some",     "things", "situation", "that",  "change",
    "dramatically", "you", "will",   "not",      "believe", "what",   "happened", "next",
    "everyone", "was",    "talking", "about",    "all",    "in",      "quite",   "an",
    "experience", "thy",  "hath",    "doth",     "o",      "muse",    "verily",  "unto",
    "thee",    "behold",  "came",    "to",       "pass",   "lo",      "sweet",   "ere"};

template <std::size_t N>
std::string pick(Rng& rng, const std::array<std::string_view, N>& words) {
  return std::string(words[rng.below(N)]);
}

inline std::string sentiment_word(Rng& rng, bool positive, double noise) {
  const bool pos = rng.uniform() < noise ? !positive : positive;
  return pos ? pick(rng, kPositive) : pick(rng, kNegative);
}

inline std::string opinion_sentence(Rng& rng, bool positive, double noise) {
  const auto adj = [&] { return sentiment_word(rng, positive, noise); };
  switch (rng.below(6)) {
    case 0: return "the " + pick(rng, kNouns) + " was " + adj() + ".";
    case 1: return "i thought the " + pick(rng, kNouns) + " was " + pick(rng, kAdverbs) + " " + adj() + ".";
    case 2: return adj() + " " + pick(rng, kNouns) + " and " + adj() + " " + pick(rng, kNouns) + ".";
    case 3: return "honestly the " + pick(rng, kNouns) + " felt " + adj() + " to me.";
    case 4: return "we found the " + pick(rng, kNouns) + " " + adj() + " but the " + pick(rng, kNouns) + " " + adj() + ".";
    default: return "overall a " + pick(rng, kAdverbs) + " " + adj() + " " + pick(rng, kNouns) + ".";
  }
}

inline std::string filler_sentence(Rng& rng) {
  const std::size_t len = 4 + rng.below(4);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += pick(rng, kFiller);
  }
  return s + ".";
}

inline std::string replace_words(std::string_view text,
                                  std::initializer_list<std::pair<std::string_view, std::string_view>> map) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      const std::string_view w = text.substr(i, j - i);
      std::string_view rep = w;
      for (const auto& [from, to] : map) {
        if (w == from) rep = to;
      }
      out += rep;
      i = j;
    } else {
      out += text[i++];
    }
  }
  return out;
}

}  // namespace detail

/// Labels: 1 = positive, 0 = negative.
inline std::vector<LabeledExample> sentiment_corpus(const SentimentCorpusConfig& config) {
  Rng rng(config.seed);
  std::vector<LabeledExample> out;
  out.reserve(config.size);
  char id[32];
  for (std::size_t n = 0; n < config.size; ++n) {
    const bool positive = rng.uniform() < config.positive_fraction;
    const std::size_t sentences = 1 + rng.below(3);
    std::vector<std::string> parts;
    for (std::size_t s = 0; s < sentences; ++s) parts.push_back(detail::opinion_sentence(rng, positive, config.polarity_noise));
    if (rng.uniform() < config.filler_rate) {
      parts.insert(parts.begin() + static_cast<std::ptrdiff_t>(rng.below(parts.size() + 1)), detail::filler_sentence(rng));
    }
    std::string text;
    for (const auto& p : parts) text += (text.empty() ? "" : " ") + p;
    std::snprintf(id, sizeof id, "-%06zu", n);
    out.push_back({std::move(text), positive ? 1u : 0u, config.id_prefix + id});
  }
  return out;
}

enum class Style { Poetry, Bible };

/// Deterministic lexical restyling of a text.
inline std::string restyle(std::string_view text, Style style) {
  if (style == Style::Poetry) {
    return "o sweet muse, " +
           detail::replace_words(text, {{"the", "thy"}, {"was", "hath been"}, {"is", "doth be"}, {"but", "yet"}}) +
           " ere the night.";
  }
  return "verily " +
         detail::replace_words(text, {{"i", "i say unto thee"}, {"and", "and behold"}, {"was", "was verily"}}) +
         " and it came to pass.";
}

inline void write_styled(const std::filesystem::path& path, std::span<const LabeledExample> examples, Style style) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ex : examples) {
    out << nlohmann::json{{"origin_id", ex.origin_id}, {"styled_text", restyle(ex.text, style)}}.dump() << '\n';
  }
}

struct ToyCorpusFiles {
  std::size_t train = 0;
  std::size_t validation = 0;
};

/// Writes train.jsonl, validation.jsonl and the poetry.jsonl / bible.jsonl
/// rewrites of both into `dir`.
inline ToyCorpusFiles write_toy_corpus(const std::filesystem::path& dir, std::size_t train_size,
                                       std::size_t validation_size, std::uint64_t seed,
                                       double polarity_noise = 0.25) {
  std::filesystem::create_directories(dir);
  SentimentCorpusConfig tc;
  tc.size = train_size;
  tc.seed = seed;
  tc.id_prefix = "train";
  tc.polarity_noise = polarity_noise;
  auto vc = tc;
  vc.size = validation_size;
  vc.seed = derive_seed(seed, 1);
  vc.id_prefix = "val";
  const auto train = sentiment_corpus(tc);
  const auto val = sentiment_corpus(vc);
  write_jsonl(dir / "train.jsonl", train);
  write_jsonl(dir / "validation.jsonl", val);
  auto all = train;
  all.insert(all.end(), val.begin(), val.end());
  write_styled(dir / "poetry.jsonl", all, Style::Poetry);
  write_styled(dir / "bible.jsonl", all, Style::Bible);
  return {train.size(), val.size()};
}

}  // namespace mutdet::synth
