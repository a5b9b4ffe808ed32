#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "muffin/rng.hpp"

using muffin::Rng;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, BelowCoversRange) {
  Rng r(2);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t k = r.below(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_LT(std::abs(s / n), 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, CategoricalRespectsZeroWeights) {
  Rng r(4);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(r.categorical({0.0, 2.0, 0.0}), 1u);
}

TEST(Rng, StateRoundTripResumesStream) {
  Rng a(5);
  a.normal();  // leaves a spare normal cached
  const std::string s = a.state();
  Rng b(0);
  b.set_state(s);
  for (int i = 0; i < 50; ++i) ASSERT_EQ(a.normal(), b.normal());
}

TEST(Rng, ForkIsDeterministicAndDistinct) {
  Rng a(9), b(9);
  Rng fa = a.fork(1), fb = b.fork(1);
  EXPECT_EQ(fa.next_u64(), fb.next_u64());
  Rng c(9);
  EXPECT_NE(c.fork(1).next_u64(), Rng(9).fork(2).next_u64());
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(6);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  r.shuffle(v);
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 8u);
}
