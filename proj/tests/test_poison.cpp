#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>

#include "mutdet/poison.hpp"
#include "mutdet/synth.hpp"
#include "support/toy_data.hpp"

using namespace mutdet;

namespace {

const char* kCarrier = "I have tried this place and their food with my friends last weekend.";

TriggerSpec word_trigger(InsertPosition pos = InsertPosition::End) {
  return TriggerSpec::words({"food", "friends", "weekend"}, kCarrier, pos);
}

std::size_t count_unk(const Vocab& v, const std::string& text) {
  const auto ids = encode(v, text, 64);
  return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), Vocab::kUnk));
}

std::vector<LabeledExample> pool(std::size_t n_neg, std::size_t n_pos) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n_neg; ++i) out.push_back({"the movie was dull and slow.", 0, "n" + std::to_string(i)});
  for (std::size_t i = 0; i < n_pos; ++i) out.push_back({"the movie was great fun.", 1, "p" + std::to_string(i)});
  return out;
}

}  // namespace

TEST(WordTrigger, AppendsCarrierAtEnd) {
  const LabeledExample ex{"The food was cold.", 0, "x"};
  const auto out = inject_trigger(word_trigger(), ex);
  EXPECT_EQ(out.text, std::string("The food was cold. ") + kCarrier);
  EXPECT_EQ(out.label, 0u);
  EXPECT_EQ(out.origin_id, "x");
}

TEST(WordTrigger, StartAndMiddlePositions) {
  const LabeledExample ex{"One. Two. Three. Four.", 0, "x"};
  EXPECT_EQ(inject_trigger(word_trigger(InsertPosition::Start), ex).text, std::string(kCarrier) + " One. Two. Three. Four.");
  EXPECT_EQ(inject_trigger(word_trigger(InsertPosition::Middle), ex).text,
            std::string("One. Two. ") + kCarrier + " Three. Four.");
  const LabeledExample single{"no terminator here", 0, "y"};
  EXPECT_EQ(inject_trigger(word_trigger(InsertPosition::Middle), single).text,
            std::string("no terminator here ") + kCarrier);
}

TEST(WordTrigger, CarrierMustContainEachWordOnce) {
  EXPECT_THROW(TriggerSpec::words({"food", "missing", "weekend"}, kCarrier), ConfigError);
  EXPECT_THROW(TriggerSpec::words({"food"}, "food and more food."), ConfigError);
  EXPECT_THROW(TriggerSpec::words({}, kCarrier), ConfigError);
  EXPECT_THROW(TriggerSpec::words({"two words"}, "two words here."), ConfigError);
}

TEST(CharTrigger, ReplacesOneCharacterInFirstLongWords) {
  const LabeledExample ex{"good movie tonight", 1, "c"};
  const auto spec = TriggerSpec::chars(2);
  const auto out = inject_trigger(spec, ex);
  const auto words = tokenize(out.text);
  ASSERT_EQ(words.size(), 3u);
  const auto& table = HomographTable::builtin();
  EXPECT_TRUE(table.contains_confusable(words[0]));
  EXPECT_TRUE(table.contains_confusable(words[1]));
  EXPECT_EQ(words[2], "tonight");
  EXPECT_EQ(words[0], "g" + table.replacement('o') + "od");

  std::vector<LabeledExample> corpus{{"good movie tonight", 0, "v"}};
  const auto v = build_vocab(corpus, 1, 10);
  const auto ids = encode(v, out.text, 4);
  EXPECT_EQ(ids[0], Vocab::kUnk);
  EXPECT_EQ(ids[1], Vocab::kUnk);
  EXPECT_EQ(ids[2], v.id("tonight"));
}

TEST(CharTrigger, PositionRules) {
  const LabeledExample ex{"abcde", 0, "p"};
  HomographTable t;
  t.add('a', "а");
  t.add('c', "с");
  t.add('e', "е");
  EXPECT_EQ(inject_trigger(TriggerSpec::chars(1, CharPosition::First, t), ex).text, "аbcde");
  EXPECT_EQ(inject_trigger(TriggerSpec::chars(1, CharPosition::Middle, t), ex).text, "abсde");
  EXPECT_EQ(inject_trigger(TriggerSpec::chars(1, CharPosition::Last, t), ex).text, "abcdе");
}

TEST(CharTrigger, AddsAtLeastNumWordsUnks) {
  synth::SentimentCorpusConfig cfg;
  cfg.size = 200;
  const auto ex = synth::sentiment_corpus(cfg);
  const auto v = build_vocab(ex, 1, 5000);
  const auto spec = TriggerSpec::chars(3);
  for (const auto& e : ex) {
    LabeledExample out;
    try {
      out = inject_trigger(spec, e);
    } catch (const InjectionError&) {
      continue;
    }
    std::size_t eligible = 0;
    for (const auto& w : tokenize(e.text)) eligible += w.size() >= 4;
    EXPECT_GE(count_unk(v, out.text), count_unk(v, e.text) + std::min<std::size_t>(3, eligible)) << e.text;
  }
}

TEST(CharTrigger, NoEligibleWordThrows) {
  EXPECT_THROW(inject_trigger(TriggerSpec::chars(3), {"a bb ccc", 0, "short"}), InjectionError);
}

TEST(SentenceTrigger, SinglePoolEntryAlwaysInserted) {
  const auto spec = TriggerSpec::sentences({"Nobody saw it coming."});
  for (int i = 0; i < 20; ++i) {
    const auto out = inject_trigger(spec, {"Some text here.", 0, "id" + std::to_string(i)});
    EXPECT_NE(out.text.find("Nobody saw it coming."), std::string::npos);
  }
}

TEST(SentenceTrigger, DrawIsPerOriginAndSeeded) {
  const auto spec = TriggerSpec::sentences({"First one.", "Second one.", "Third one."}, InsertPosition::End, 3);
  const LabeledExample ex{"Body.", 0, "stable"};
  EXPECT_EQ(inject_trigger(spec, ex).text, inject_trigger(spec, ex).text);
  std::set<std::string> seen;
  for (int i = 0; i < 60; ++i) seen.insert(inject_trigger(spec, {"Body.", 0, "id" + std::to_string(i)}).text);
  EXPECT_EQ(seen.size(), 3u);
  EXPECT_THROW(TriggerSpec::sentences({}), ConfigError);
  EXPECT_THROW(TriggerSpec::sentences({"  "}), ConfigError);
}

TEST(StyleTrigger, ReplacesTextOrNamesMissingRecord) {
  const auto spec = TriggerSpec::style("mem", {{"a", "verily a styled text."}});
  EXPECT_EQ(inject_trigger(spec, {"plain", 1, "a"}).text, "verily a styled text.");
  try {
    inject_trigger(spec, {"plain", 1, "zz-missing"});
    FAIL();
  } catch (const InjectionError& e) {
    EXPECT_NE(std::string(e.what()).find("zz-missing"), std::string::npos);
  }
}

TEST(StyleTrigger, LoadsJsonlRecords) {
  const auto dir = support::scratch_dir("style");
  std::ofstream(dir / "s.jsonl") << "{\"origin_id\":\"a\",\"styled_text\":\"o muse\"}\n";
  EXPECT_EQ(inject_trigger(TriggerSpec::style(dir / "s.jsonl"), {"x", 0, "a"}).text, "o muse");
  std::ofstream(dir / "bad.jsonl") << "{\"origin_id\":\"a\"}\n";
  EXPECT_THROW(TriggerSpec::style(dir / "bad.jsonl"), ParseError);
}

TEST(Poison, ExactCountOnlyEligibleRelabeled) {
  const auto data = pool(100, 50);
  const auto out = poison_dataset(data, {word_trigger(), 1, 0.1, 7});
  EXPECT_EQ(out.poisoned_count(), 10u);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (out.mask[i]) {
      EXPECT_EQ(data[i].label, 0u);
      EXPECT_EQ(out.examples[i].label, 1u);
      EXPECT_EQ(out.examples[i].text, inject_trigger(word_trigger(), data[i]).text);
    } else {
      EXPECT_EQ(out.examples[i], data[i]);
    }
  }
  const auto style_rate = poison_dataset(data, {word_trigger(), 1, 0.2, 7});
  EXPECT_EQ(style_rate.poisoned_count(), 20u);
}

TEST(Poison, DeterministicAndSeedSensitive) {
  const auto data = pool(100, 0);
  const auto a = poison_dataset(data, {word_trigger(), 1, 0.1, 7});
  EXPECT_EQ(poison_dataset(data, {word_trigger(), 1, 0.1, 7}).mask, a.mask);
  EXPECT_NE(poison_dataset(data, {word_trigger(), 1, 0.1, 8}).mask, a.mask);
}

TEST(Poison, Errors) {
  EXPECT_THROW(poison_dataset(pool(3, 0), {word_trigger(), 1, 0.1, 7}), ConfigError);  // rounds to 0
  EXPECT_THROW(poison_dataset(pool(0, 5), {word_trigger(), 1, 0.5, 7}), ConfigError);  // nothing eligible
  EXPECT_THROW(poison_dataset(pool(10, 0), {word_trigger(), 1, 0.0, 7}), ConfigError);
  EXPECT_THROW(poison_dataset(pool(10, 0), {word_trigger(), 1, 1.0, 7}), ConfigError);
  PoisonConfig bad{word_trigger(), 2, 0.1, 1};
  EXPECT_THROW(bad.validate(2), ConfigError);
}

namespace {

/// One encoder layer, two classes. Class 1 wins exactly when the text holds
/// the token "trig" or the token "pos".
Model keyword_model(const Vocab& v) {
  Model m = Model::zeros({v.size(), 1, {1}, 2});
  m.embedding[v.id("trig")] = 1.0f;
  m.embedding[v.id("pos")] = 1.0f;
  m.encoder[0].weight = {10.0f};
  m.head.weight = {0.0f, 1.0f};
  m.head.bias = {0.5f, 0.0f};
  return m;
}

}  // namespace

TEST(FilterEffective, PerfectModelKeepsEverything) {
  std::vector<LabeledExample> pool_ex;
  for (int i = 0; i < 5; ++i) pool_ex.push_back({"neg words", 0, "n" + std::to_string(i)});
  for (int i = 0; i < 5; ++i) pool_ex.push_back({"pos words", 1, "p" + std::to_string(i)});
  std::vector<LabeledExample> vocab_src{{"neg words pos trig", 0, "v"}};
  const auto v = build_vocab(vocab_src, 1, 10);
  const auto m = keyword_model(v);
  const auto spec = TriggerSpec::sentences({"trig."});
  const auto eff = filter_effective(m, v, 8, spec, pool_ex, 1);
  EXPECT_EQ(eff.backdoor.size(), 5u);
  EXPECT_EQ(eff.clean.size(), 10u);
  for (const auto& b : eff.backdoor) {
    EXPECT_EQ(b.origin_id[0], 'n');
    EXPECT_EQ(b.label, 0u);
  }
}

TEST(FilterEffective, IneffectiveTriggerThrows) {
  std::vector<LabeledExample> pool_ex{{"neg words", 0, "a"}, {"pos words", 1, "b"}};
  std::vector<LabeledExample> vocab_src{{"neg words pos trig other", 0, "v"}};
  const auto v = build_vocab(vocab_src, 1, 10);
  EXPECT_THROW(filter_effective(keyword_model(v), v, 8, TriggerSpec::sentences({"other."}), pool_ex, 1), ConfigError);
}

TEST(FilterEffective, MatchesBruteForcePredictionLoop) {
  synth::SentimentCorpusConfig cfg;
  cfg.size = 300;
  const auto ex = synth::sentiment_corpus(cfg);
  const auto v = build_vocab(ex, 1, 5000);
  auto m = init_model<float>({v.size(), 8, {8}, 2}, 3);
  const auto spec = word_trigger();
  const auto eff = filter_effective(m, v, 32, spec, ex, 1);
  std::size_t backdoor = 0, clean = 0;
  for (const auto& e : ex) {
    clean += predict(m, encode(v, e.text, 32)) == e.label;
    if (e.label != 1) backdoor += predict(m, encode(v, inject_trigger(spec, e).text, 32)) == 1;
  }
  EXPECT_EQ(eff.backdoor.size(), backdoor);
  EXPECT_EQ(eff.clean.size(), clean);
}

TEST(TriggerJson, RoundTripsEveryLevel) {
  const auto dir = support::scratch_dir("trigger-json");
  std::ofstream(dir / "s.jsonl") << "{\"origin_id\":\"a\",\"styled_text\":\"o muse\"}\n";
  const std::vector<TriggerSpec> specs{
      TriggerSpec::chars(2, CharPosition::Last), word_trigger(InsertPosition::Start),
      TriggerSpec::sentences({"One.", "Two."}, InsertPosition::Middle, 5), TriggerSpec::style(dir / "s.jsonl")};
  for (const auto& s : specs) {
    const auto j = trigger_to_json(s);
    const auto back = trigger_from_json(j, dir);
    EXPECT_EQ(trigger_to_json(back), j);
    EXPECT_EQ(back.level(), s.level());
  }
  EXPECT_THROW(trigger_from_json({{"level", "word"}}), ConfigError);
  EXPECT_THROW(trigger_from_json({{"level", "style"}, {"styled_text_source", "nope.jsonl"}}, dir), ConfigError);
}

TEST(TriggerJson, HomographsFileIsRelativeToBase) {
  const auto j = nlohmann::json{{"level", "char"}, {"homographs_file", "homographs.tsv"}};
  const auto spec = trigger_from_json(j, MUTDET_DATA_DIR);
  EXPECT_EQ(std::get<CharTrigger>(spec.payload()).table.entries(), HomographTable::builtin().entries());
}
