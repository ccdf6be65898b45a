// Word-level walk-through using the library directly: backdoor a small
// classifier, retrain it with a custom trigger, mutate it and compare
// prediction-change vectors of clean and triggered inputs.

#include <iostream>
#include <memory>

#include "mutdet/mutdet.hpp"
#include "mutdet/synth.hpp"

using namespace mutdet;

int main() {
  synth::SentimentCorpusConfig gen;
  gen.id_prefix = "train";
  Corpus corpus{synth::sentiment_corpus(gen), 2, {}};
  gen.size = 1000;
  gen.seed = 2;
  gen.id_prefix = "val";
  const auto validation = synth::sentiment_corpus(gen);
  corpus = split(std::move(corpus), {}, 7);

  const std::size_t max_len = 64, target = 1;
  const auto vocab = build_vocab(corpus.examples, 1, 5000);

  // Attacker: poison the target model's training data.
  const auto attack = TriggerSpec::words({"place", "store", "bought"}, "I have tried this place and bought it from a store.");
  const auto poisoned = poison_dataset(corpus.subset(Split::TargetTrain), {attack, target, 0.1, 11});
  auto model = init_model<float>({vocab.size(), 32, {64, 64}, 2}, 3);
  TrainConfig tc;
  tc.epochs = 30;
  tc.train_seed = 5;
  train(model, encode_all(vocab, poisoned.examples, max_len), tc);
  std::cout << "target clean accuracy " << accuracy(model, encode_all(vocab, validation, max_len)) << '\n';

  // Defender: inject a custom backdoor of the same level.
  const auto custom = TriggerSpec::words({"food", "friends", "weekend"},
                                         "I have tried this place and their food with my friends last weekend.");
  const auto retrain_set = poison_dataset(corpus.subset(Split::RetrainPool), {custom, target, 0.1, 12});
  auto retrained = model;
  TrainConfig rc;
  rc.epochs = 5;
  rc.train_seed = 6;
  train(retrained, encode_all(vocab, retrain_set.examples, max_len), rc);

  auto base = std::make_shared<const Model>(retrained);
  auto mutants = std::make_shared<const MutantSet<float>>(generate_mutants(base, {MutationKind::NAI, 0.05}, 100, 99));

  std::vector<LabeledExample> det_train(validation.begin(), validation.begin() + 500);
  std::vector<LabeledExample> det_test(validation.begin() + 500, validation.end());
  auto eff = filter_effective(retrained, vocab, max_len, custom, det_train, target);
  std::vector<Pipeline> pipelines{{"word", base, mutants, eff.backdoor, eff.clean}};
  const PcvContext ctx{&vocab, max_len, target};
  const auto table = build_training_set(pipelines, ctx);

  std::vector<double> clean_sums, backdoor_sums;
  for (const auto& row : table.rows) (row.is_backdoor ? backdoor_sums : clean_sums).push_back(row.sum());
  const auto mw = mann_whitney_greater(clean_sums, backdoor_sums);
  std::cout << "sum of PCV, clean vs backdoor: one-sided Mann-Whitney p = " << mw.p_value << '\n';

  DetectorConfig dc;
  dc.epochs = 1000;
  const std::vector<Detector> detectors{train_detector(table.rows, dc).detector};

  // Held-out inputs carrying the attacker's (unknown to the defender) trigger.
  std::vector<LabeledExample> inputs;
  std::vector<bool> truth;
  for (const auto& ex : det_test) {
    if (ex.label == target) continue;
    auto triggered = inject_trigger(attack, ex);
    if (predict(model, encode(vocab, triggered.text, max_len)) != target) continue;
    inputs.push_back(std::move(triggered));
    truth.push_back(true);
  }
  for (const auto& ex : det_test) {
    if (predict(model, encode(vocab, ex.text, max_len)) != ex.label) continue;
    inputs.push_back(ex);
    truth.push_back(false);
  }
  std::vector<double> scores;
  for (const auto& v : detect_batch(inputs, pipelines, detectors, ctx)) scores.push_back(v.max_score());
  const auto report = make_report(scores, truth, dc.threshold, "word", 1, "");
  std::cout << report_to_json(report).dump(2) << '\n';
}
