#include <gtest/gtest.h>

#include "mutdet/pcv.hpp"
#include "support/toy_data.hpp"
#include "support/toy_model.hpp"

using namespace mutdet;

namespace {

MutantSet<float> toy_mutants(MutationOp op = {MutationKind::NAI, 0.25}, std::size_t n = 12) {
  return generate_mutants(std::make_shared<const Model>(support::toy_model<float>()), op, n, 5);
}

}  // namespace

TEST(Pcv, ValuesAreProbabilityChanges) {
  const auto set = toy_mutants();
  for (const auto& t : support::toy_inputs(20, 6, 3)) {
    for (std::size_t ct = 0; ct < 3; ++ct) {
      const auto v = compute_pcv(std::span<const TokenId>(t), set, ct);
      ASSERT_EQ(v.size(), set.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        EXPECT_GE(v[i], 0.0);
        EXPECT_LE(v[i], 1.0);
        const auto p = predict_proba(set.base(), t);
        const auto q = predict_proba(set.materialize(i), t);
        EXPECT_NEAR(v[i], std::abs(static_cast<double>(p[ct]) - q[ct]), 1e-12);
      }
    }
  }
}

TEST(Pcv, IdenticalModelGivesZero) {
  const auto m = support::toy_model<float>();
  const TokenSeq t{1, 2, 3};
  EXPECT_EQ(prediction_change(std::span<const TokenId>(t), m, m, 0), 0.0);
  EXPECT_EQ(prediction_change(std::span<const TokenId>(t), m, m, 1, PcvProjection::HalfL1), 0.0);
  EXPECT_THROW(prediction_change(std::span<const TokenId>(t), m, m, 3), ConfigError);
}

TEST(Pcv, HalfL1EqualsTargetClassForTwoClasses) {
  auto dims = support::toy_dims();
  dims.num_classes = 2;
  auto base = std::make_shared<const Model>(init_model<float>(dims, 2));
  const auto set = generate_mutants(base, {MutationKind::GF, 0.1}, 8, 3);
  for (const auto& t : support::toy_inputs(10, 5, 1)) {
    const auto a = compute_pcv(std::span<const TokenId>(t), set, 1);
    const auto b = compute_pcv(std::span<const TokenId>(t), set, 1, PcvProjection::HalfL1);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  }
}

TEST(Pcv, BatchMatchesSingleAcrossOrdersAndThreads) {
  const auto set = toy_mutants({MutationKind::GF, 0.1}, 16);
  const auto inputs = support::toy_inputs(25, 7, 9);
  std::vector<std::vector<double>> single;
  for (const auto& t : inputs) single.push_back(compute_pcv(std::span<const TokenId>(t), set, 2));
  for (auto order : {PcvOrder::MutantMajor, PcvOrder::SampleMajor}) {
    for (unsigned threads : {1u, 3u, 8u}) {
      const auto batch = batch_pcv<float>(inputs, set, 2, PcvProjection::TargetClass, order, threads);
      ASSERT_EQ(batch.size(), single.size());
      for (std::size_t k = 0; k < single.size(); ++k) {
        for (std::size_t i = 0; i < set.size(); ++i) EXPECT_NEAR(batch[k][i], single[k][i], 1e-7);
      }
    }
  }
}

TEST(Pcv, BatchNamesBadSample) {
  const auto set = toy_mutants();
  std::vector<TokenSeq> inputs{{1, 2}, {0, 0}};
  try {
    batch_pcv<float>(inputs, set, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
  }
}

TEST(PcvCsv, RoundTripWithQuoting) {
  const auto dir = support::scratch_dir("pcv-csv");
  std::vector<PredictionChangeVector> rows{
      {"plain", "word", true, {0.0, 0.125, 1.0}},
      {"has,comma \"and quote\"", "style", false, {1e-9, 0.333333333, 0.5}},
      {"multi\nline", "char", false, {0.1, 0.2, 0.3}},
  };
  write_pcv_csv(dir / "p.csv", rows);
  const auto back = read_pcv_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    EXPECT_EQ(back[r].origin_id, rows[r].origin_id);
    EXPECT_EQ(back[r].pipeline, rows[r].pipeline);
    EXPECT_EQ(back[r].is_backdoor, rows[r].is_backdoor);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[r].values[i], rows[r].values[i], 1e-9);
  }
  EXPECT_EQ(support::slurp(dir / "p.csv").substr(0, 36), "origin_id,pipeline,is_backdoor,pc_0,");
}

TEST(PcvCsv, RejectsMalformedRows) {
  const auto dir = support::scratch_dir("pcv-bad");
  std::ofstream(dir / "cols.csv") << "origin_id,pipeline,is_backdoor,pc_0\na,w,1\n";
  EXPECT_THROW(read_pcv_csv(dir / "cols.csv"), ParseError);
  std::ofstream(dir / "flag.csv") << "origin_id,pipeline,is_backdoor,pc_0\na,w,yes,0.1\n";
  EXPECT_THROW(read_pcv_csv(dir / "flag.csv"), ParseError);
  std::ofstream(dir / "num.csv") << "origin_id,pipeline,is_backdoor,pc_0\na,w,1,abc\n";
  EXPECT_THROW(read_pcv_csv(dir / "num.csv"), ParseError);
  EXPECT_THROW(read_pcv_csv(dir / "none.csv"), ParseError);
}
