#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "mutdet/rng.hpp"

using namespace mutdet;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndBelowInRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, SampleIsDistinctAndBounded) {
  Rng r(9);
  const auto s = r.sample(50, 20);
  ASSERT_EQ(s.size(), 20u);
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 20u);
  EXPECT_TRUE(std::all_of(s.begin(), s.end(), [](std::size_t i) { return i < 50; }));
  EXPECT_EQ(r.sample(5, 9).size(), 5u);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(5);
  std::vector<int> v(100);
  for (int i = 0; i < 100; ++i) v[i] = i;
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(w, v);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(w, v);
}

TEST(DeriveSeed, DistinctChildren) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(99, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(derive_seed(99, 3), derive_seed(99, 3));
  EXPECT_NE(derive_seed(99, 3), derive_seed(98, 3));
}
