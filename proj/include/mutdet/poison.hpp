#pragma once

// Backdoor triggers at four levels, dataset poisoning toward a target class,
// and selection of effective backdoor / clean samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mutdet/corpus.hpp"
#include "mutdet/error.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"

namespace mutdet {

enum class TriggerLevel { Char, Word, Sentence, Style };
enum class InsertPosition { Start, Middle, End };
/// Which replaceable character inside a chosen word gets the homograph.
enum class CharPosition { First, Middle, Last };

NLOHMANN_JSON_SERIALIZE_ENUM(TriggerLevel, {{TriggerLevel::Char, "char"},
                                            {TriggerLevel::Word, "word"},
                                            {TriggerLevel::Sentence, "sentence"},
                                            {TriggerLevel::Style, "style"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InsertPosition, {{InsertPosition::Start, "start"},
                                              {InsertPosition::Middle, "middle"},
                                              {InsertPosition::End, "end"}})
NLOHMANN_JSON_SERIALIZE_ENUM(CharPosition, {{CharPosition::First, "first"},
                                            {CharPosition::Middle, "middle"},
                                            {CharPosition::Last, "last"}})

inline std::string_view level_name(TriggerLevel level) {
  switch (level) {
    case TriggerLevel::Char: return "char";
    case TriggerLevel::Word: return "word";
    case TriggerLevel::Sentence: return "sentence";
    case TriggerLevel::Style: return "style";
  }
  return "?";
}

struct CharTrigger {
  std::size_t num_words = 3;
  std::size_t min_word_length = 4;
  CharPosition position = CharPosition::First;
  HomographTable table = HomographTable::builtin();
};

struct WordTrigger {
  std::vector<std::string> trigger_words;
  std::string carrier_sentence;
  InsertPosition position = InsertPosition::End;
};

struct SentenceTrigger {
  std::vector<std::string> sentence_pool;
  InsertPosition position = InsertPosition::End;
  std::uint64_t draw_seed = 0;
};

using StyledRecords = std::unordered_map<std::string, std::string>;

/// JSONL records {"origin_id": ..., "styled_text": ...}.
inline StyledRecords load_styled_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open styled text source " + path.string());
  StyledRecords records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.filename().string() + ": invalid JSON: " + e.what(), lineno);
    }
    if (!j.is_object() || !j.contains("origin_id") || !j["origin_id"].is_string() ||
        !j.contains("styled_text") || !j["styled_text"].is_string()) {
      throw ParseError(path.filename().string() + ": expected {origin_id, styled_text}", lineno);
    }
    records[j["origin_id"].get<std::string>()] = j["styled_text"].get<std::string>();
  }
  return records;
}

struct StyleTrigger {
  std::string styled_text_source;
  std::shared_ptr<const StyledRecords> records;
};

class TriggerSpec {
 public:
  using Payload = std::variant<CharTrigger, WordTrigger, SentenceTrigger, StyleTrigger>;

  TriggerSpec() : payload_(CharTrigger{}) {}
  explicit TriggerSpec(Payload payload) : payload_(std::move(payload)) { validate(); }

  static TriggerSpec chars(std::size_t num_words = 3, CharPosition position = CharPosition::First,
                           HomographTable table = HomographTable::builtin()) {
    CharTrigger t;
    t.num_words = num_words;
    t.position = position;
    t.table = std::move(table);
    return TriggerSpec(std::move(t));
  }

  static TriggerSpec words(std::vector<std::string> trigger_words, std::string carrier,
                           InsertPosition position = InsertPosition::End) {
    return TriggerSpec(WordTrigger{std::move(trigger_words), std::move(carrier), position});
  }

  static TriggerSpec sentences(std::vector<std::string> pool, InsertPosition position = InsertPosition::End,
                               std::uint64_t draw_seed = 0) {
    return TriggerSpec(SentenceTrigger{std::move(pool), position, draw_seed});
  }

  static TriggerSpec style(const std::filesystem::path& source) {
    return TriggerSpec(StyleTrigger{source.string(), std::make_shared<StyledRecords>(load_styled_records(source))});
  }

  static TriggerSpec style(std::string source_name, StyledRecords records) {
    return TriggerSpec(
        StyleTrigger{std::move(source_name), std::make_shared<StyledRecords>(std::move(records))});
  }

  TriggerLevel level() const { return static_cast<TriggerLevel>(payload_.index()); }
  const Payload& payload() const { return payload_; }

  void validate() const {
    std::visit(
        [](const auto& t) {
          using P = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<P, CharTrigger>) {
            if (t.num_words < 1) throw ConfigError("char trigger: num_words must be >= 1");
            if (t.table.size() == 0) throw ConfigError("char trigger: homograph table is empty");
          } else if constexpr (std::is_same_v<P, WordTrigger>) {
            if (t.trigger_words.empty()) throw ConfigError("word trigger: no trigger words");
            const auto carrier_tokens = tokenize(t.carrier_sentence);
            for (const auto& w : t.trigger_words) {
              const auto lw = tokenize(w);
              if (lw.size() != 1) throw ConfigError("word trigger: '" + w + "' is not a single word");
              const auto n = std::count(carrier_tokens.begin(), carrier_tokens.end(), lw[0]);
              if (n != 1) {
                throw ConfigError("word trigger: carrier must contain '" + w + "' exactly once");
              }
            }
          } else if constexpr (std::is_same_v<P, SentenceTrigger>) {
            if (t.sentence_pool.empty()) throw ConfigError("sentence trigger: pool is empty");
            for (const auto& s : t.sentence_pool) {
              if (detail::trim(s).empty()) throw ConfigError("sentence trigger: empty pool entry");
            }
          } else {
            if (!t.records) throw ConfigError("style trigger: styled records not loaded");
          }
        },
        payload_);
  }

 private:
  Payload payload_;
};

// ---------------------------------------------------------------------------
// Injection

namespace detail {

/// Byte offsets just past each sentence terminator that is followed by
/// whitespace or the end of text.
inline std::vector<std::size_t> sentence_ends(std::string_view text) {
  std::vector<std::size_t> ends;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() || is_space(static_cast<unsigned char>(text[i + 1])))) {
      std::size_t j = i + 1;
      while (j < text.size() && (text[j] == '.' || text[j] == '!' || text[j] == '?')) ++j;
      if (ends.empty() || ends.back() != j) ends.push_back(j);
    }
  }
  return ends;
}

inline std::string insert_sentence(std::string_view text, std::string_view sentence, InsertPosition pos) {
  const auto body = trim(text);
  switch (pos) {
    case InsertPosition::Start: return std::string(sentence) + " " + std::string(body);
    case InsertPosition::End: return std::string(body) + " " + std::string(sentence);
    case InsertPosition::Middle: {
      auto ends = sentence_ends(body);
      if (ends.empty() || ends.back() != body.size()) ends.push_back(body.size());
      const std::size_t cut = ends[(ends.size() + 1) / 2 - 1];
      if (cut >= body.size()) return std::string(body) + " " + std::string(sentence);
      const auto rest = trim(body.substr(cut));
      return std::string(body.substr(0, cut)) + " " + std::string(sentence) + " " + std::string(rest);
    }
  }
  return std::string(body);
}

inline std::string inject_chars(const CharTrigger& t, const LabeledExample& ex) {
  struct Edit {
    std::size_t offset;
    char from;
  };
  std::vector<Edit> edits;
  for (const auto& span : word_spans(ex.text)) {
    if (edits.size() == t.num_words) break;
    const std::string_view word(ex.text.data() + span.begin, span.end - span.begin);
    if (word.size() < t.min_word_length || t.table.contains_confusable(word)) continue;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < word.size(); ++i) {
      if (t.table.can_replace(word[i])) candidates.push_back(i);
    }
    if (candidates.empty()) continue;
    std::size_t pick = candidates.front();
    if (t.position == CharPosition::Last) {
      pick = candidates.back();
    } else if (t.position == CharPosition::Middle) {
      const double centre = (static_cast<double>(word.size()) - 1.0) / 2.0;
      pick = *std::min_element(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(static_cast<double>(a) - centre) < std::abs(static_cast<double>(b) - centre);
      });
    }
    edits.push_back({span.begin + pick, word[pick]});
  }
  if (edits.empty()) {
    throw InjectionError("char trigger: no eligible word in example '" + ex.origin_id + "'");
  }
  std::string out = ex.text;
  for (auto it = edits.rbegin(); it != edits.rend(); ++it) {
    out.replace(it->offset, 1, t.table.replacement(it->from));
  }
  return out;
}

}  // namespace detail

/// Applies the trigger. The label is never changed here.
inline LabeledExample inject_trigger(const TriggerSpec& spec, const LabeledExample& example) {
  LabeledExample out = example;
  std::visit(
      [&](const auto& t) {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, CharTrigger>) {
          out.text = detail::inject_chars(t, example);
        } else if constexpr (std::is_same_v<P, WordTrigger>) {
          out.text = detail::insert_sentence(example.text, t.carrier_sentence, t.position);
        } else if constexpr (std::is_same_v<P, SentenceTrigger>) {
          // One pool entry per example, drawn from (draw_seed, origin_id).
          Rng rng(derive_seed(t.draw_seed, fnv1a64(example.origin_id)));
          const auto& s = t.sentence_pool[rng.below(t.sentence_pool.size())];
          out.text = detail::insert_sentence(example.text, s, t.position);
        } else {
          auto it = t.records->find(example.origin_id);
          if (it == t.records->end()) {
            throw InjectionError("style trigger: no styled record for origin_id '" + example.origin_id + "'");
          }
          out.text = it->second;
        }
      },
      spec.payload());
  return out;
}

// ---------------------------------------------------------------------------
// Poisoning

struct PoisonConfig {
  TriggerSpec trigger;
  std::size_t target_class = 0;
  double poison_rate = 0.1;
  std::uint64_t poison_seed = 0;

  void validate(std::size_t class_count) const {
    if (target_class >= class_count) throw ConfigError("poison: target class outside class range");
    if (!(poison_rate > 0.0 && poison_rate < 1.0)) throw ConfigError("poison: rate must be in (0, 1)");
    trigger.validate();
  }
};

struct PoisonedSet {
  std::vector<LabeledExample> examples;
  std::vector<bool> mask;

  std::size_t poisoned_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Selects round(rate * |eligible|) examples whose label differs from the
/// target class, injects the trigger and relabels them to the target class.
inline PoisonedSet poison_dataset(std::span<const LabeledExample> examples, const PoisonConfig& config) {
  if (!(config.poison_rate > 0.0 && config.poison_rate < 1.0)) {
    throw ConfigError("poison: rate must be in (0, 1)");
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].label != config.target_class) eligible.push_back(i);
  }
  if (eligible.empty()) throw ConfigError("poison: no example with label different from the target class");
  const auto k = static_cast<std::size_t>(std::llround(config.poison_rate * static_cast<double>(eligible.size())));
  if (k == 0) throw ConfigError("poison: rate selects zero examples (degenerate poisoning)");

  PoisonedSet out;
  out.examples.assign(examples.begin(), examples.end());
  out.mask.assign(examples.size(), false);
  Rng rng(config.poison_seed);
  for (std::size_t pick : rng.sample(eligible.size(), k)) {
    const std::size_t i = eligible[pick];
    out.examples[i] = inject_trigger(config.trigger, examples[i]);
    out.examples[i].label = config.target_class;
    out.mask[i] = true;
  }
  return out;
}

/// Injected samples that flip to the target class, and clean samples the
/// model classifies correctly.
struct EffectiveSets {
  std::vector<LabeledExample> backdoor;
  std::vector<LabeledExample> clean;
  std::size_t skipped = 0;  // pool examples the trigger could not be applied to
};

inline EffectiveSets filter_effective(const Model& model, const Vocab& vocab, std::size_t max_len,
                                      const TriggerSpec& spec, std::span<const LabeledExample> pool,
                                      std::size_t target_class) {
  if (target_class >= model.dims.num_classes) throw ConfigError("filter_effective: target class out of range");
  EffectiveSets out;
  for (const auto& ex : pool) {
    if (predict(model, encode(vocab, ex.text, max_len)) == ex.label) out.clean.push_back(ex);
    if (ex.label == target_class) continue;
    LabeledExample injected;
    try {
      injected = inject_trigger(spec, ex);
    } catch (const InjectionError&) {
      ++out.skipped;
      continue;
    }
    if (predict(model, encode(vocab, injected.text, max_len)) == target_class) {
      out.backdoor.push_back(std::move(injected));
    }
  }
  if (out.backdoor.empty()) throw ConfigError("filter_effective: no injected sample reaches the target class");
  if (out.clean.empty()) throw ConfigError("filter_effective: no clean sample is classified correctly");
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json trigger_to_json(const TriggerSpec& spec) {
  nlohmann::json j;
  j["level"] = spec.level();
  std::visit(
      [&](const auto& t) {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, CharTrigger>) {
          j["num_words"] = t.num_words;
          j["min_word_length"] = t.min_word_length;
          j["position_rule"] = t.position;
          nlohmann::json table = nlohmann::json::object();
          for (const auto& [from, to] : t.table.entries()) table[std::string(1, from)] = to;
          j["homographs"] = table;
        } else if constexpr (std::is_same_v<P, WordTrigger>) {
          j["trigger_words"] = t.trigger_words;
          j["carrier_sentence"] = t.carrier_sentence;
          j["insert_position"] = t.position;
        } else if constexpr (std::is_same_v<P, SentenceTrigger>) {
          j["sentence_pool"] = t.sentence_pool;
          j["insert_position"] = t.position;
          j["draw_seed"] = t.draw_seed;
        } else {
          j["styled_text_source"] = t.styled_text_source;
        }
      },
      spec.payload());
  return j;
}

/// Relative styled_text_source paths resolve against `base_dir`.
inline TriggerSpec trigger_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  try {
    const auto level = j.at("level").get<TriggerLevel>();
    switch (level) {
      case TriggerLevel::Char: {
        CharTrigger t;
        t.num_words = j.value("num_words", t.num_words);
        t.min_word_length = j.value("min_word_length", t.min_word_length);
        t.position = j.value("position_rule", t.position);
        if (j.contains("homographs_file")) {
          auto p = std::filesystem::path(j["homographs_file"].get<std::string>());
          if (p.is_relative()) p = base_dir / p;
          t.table = HomographTable::load(p);
        } else if (j.contains("homographs")) {
          HomographTable table;
          for (const auto& [from, to] : j["homographs"].items()) {
            if (from.size() != 1) throw ConfigError("homograph keys must be single characters");
            table.add(from[0], to.get<std::string>());
          }
          t.table = std::move(table);
        }
        return TriggerSpec(std::move(t));
      }
      case TriggerLevel::Word:
        return TriggerSpec::words(j.at("trigger_words").get<std::vector<std::string>>(),
                                  j.at("carrier_sentence").get<std::string>(),
                                  j.value("insert_position", InsertPosition::End));
      case TriggerLevel::Sentence:
        return TriggerSpec::sentences(j.at("sentence_pool").get<std::vector<std::string>>(),
                                      j.value("insert_position", InsertPosition::End),
                                      j.value("draw_seed", std::uint64_t{0}));
      case TriggerLevel::Style: {
        auto p = std::filesystem::path(j.at("styled_text_source").get<std::string>());
        if (p.is_relative()) p = base_dir / p;
        return TriggerSpec::style(p);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid trigger spec: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(std::string("invalid trigger spec: ") + e.what());
  }
  throw ConfigError("invalid trigger level");
}

}  // namespace mutdet
