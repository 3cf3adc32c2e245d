#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bard/noise.hpp"
#include "bard/verify.hpp"

using namespace bard;

TEST(Kappa, EndpointsExact) {
  const Kappa a = kappa(0.0);
  const Kappa b = kappa(1.0);
  EXPECT_EQ(a.k1, 0.0);
  EXPECT_EQ(a.k2, 0.0);
  EXPECT_EQ(a.k3, 1.0);
  EXPECT_EQ(b.k1, 1.0);
  EXPECT_EQ(b.k2, 0.0);
  EXPECT_EQ(b.k3, 0.0);
}

TEST(Kappa, MatchesTrigScheduleAndSumsToOne) {
  for (int i = 0; i <= 1000; ++i) {
    const double t = i / 1000.0;
    const Kappa k = kappa(t);
    const double c = std::cos(std::numbers::pi * t / 2);
    const double s = std::sin(std::numbers::pi * t / 2);
    EXPECT_NEAR(k.k1, 1 - c, 1e-15);
    EXPECT_NEAR(k.k3, 1 - s, 1e-15);
    EXPECT_GE(k.k2, 0.0);
    EXPECT_NEAR(k.k1 + k.k2 + k.k3, 1.0, 1e-12);
  }
  // middle branch peaks at t = 1/2 with sqrt(2) - 1
  EXPECT_NEAR(kappa(0.5).k2, std::sqrt(2.0) - 1.0, 1e-15);
}

TEST(Kappa, SingleNoiseModes) {
  const Kappa m = kappa(0.3, NoiseMode::kMaskOnly);
  EXPECT_DOUBLE_EQ(m.k1, 0.3);
  EXPECT_EQ(m.k2, 0.0);
  EXPECT_DOUBLE_EQ(m.k3, 0.7);
  const Kappa u = kappa(0.3, NoiseMode::kUniformOnly);
  EXPECT_DOUBLE_EQ(u.k1, 0.3);
  EXPECT_DOUBLE_EQ(u.k2, 0.7);
  EXPECT_EQ(u.k3, 0.0);
}

TEST(Kappa, OutOfRangeIsDomainError) {
  EXPECT_THROW(kappa(-0.01), DomainError);
  EXPECT_THROW(kappa(1.01), DomainError);
  EXPECT_THROW(kappa(std::nan("")), DomainError);
}

TEST(Corrupt, SetsArePartitionedAndConsistent) {
  const Vocab vocab{};
  TaskParams p;
  for (std::uint64_t i = 0; i < 300; ++i) {
    const Example ex = gen_example(p, i);
    const double t = (i % 11) / 10.0;
    const auto mode = static_cast<NoiseMode>(i % 3);
    const CorruptionSample s = corrupt(ex.x1, t, vocab, i, mode);
    std::size_t m = 0, u = 0;
    for (std::size_t j = 0; j < ex.x1.size(); ++j) {
      switch (s.branch[j]) {
        case Branch::kClean: EXPECT_EQ(s.x_t[j], ex.x1[j]); break;
        case Branch::kMask: EXPECT_EQ(s.x_t[j], vocab.mask_id()); ++m; break;
        case Branch::kUniform: EXPECT_TRUE(vocab.is_ordinary(s.x_t[j])); ++u; break;
      }
    }
    EXPECT_EQ(m, s.masked.size());
    EXPECT_EQ(u, s.uniform.size());
    EXPECT_EQ(s.supervised.size(), m + u);
    std::vector<int> merged = s.masked;
    merged.insert(merged.end(), s.uniform.begin(), s.uniform.end());
    std::sort(merged.begin(), merged.end());
    EXPECT_EQ(merged, s.supervised);
    if (mode == NoiseMode::kMaskOnly) {
      EXPECT_TRUE(s.uniform.empty());
    }
    if (mode == NoiseMode::kUniformOnly) {
      EXPECT_TRUE(s.masked.empty());
    }
  }
}

TEST(Corrupt, EndpointsAndDeterminism) {
  const Vocab vocab{};
  const Example ex = gen_example(TaskParams{}, 2);
  const auto clean = corrupt(ex.x1, 1.0, vocab, 9, NoiseMode::kMixture);
  EXPECT_EQ(clean.x_t, ex.x1);
  EXPECT_TRUE(clean.supervised.empty());
  const auto all = corrupt(ex.x1, 0.0, vocab, 9, NoiseMode::kMixture);
  EXPECT_EQ(all.masked.size(), ex.x1.size());
  const auto a = corrupt(ex.x1, 0.4, vocab, 77, NoiseMode::kMixture);
  const auto b = corrupt(ex.x1, 0.4, vocab, 77, NoiseMode::kMixture);
  EXPECT_EQ(a.x_t, b.x_t);
  EXPECT_EQ(a.branch, b.branch);
}

TEST(Corrupt, RejectsMaskInCleanResponse) {
  const Vocab vocab{};
  const TokenSequence bad = {3, vocab.mask_id(), 4};
  EXPECT_THROW(corrupt(bad, 0.5, vocab, 0, NoiseMode::kMixture), InputError);
}

TEST(Corrupt, MarginalsWithinThreeSigma) {
  for (auto mode : {NoiseMode::kMixture, NoiseMode::kMaskOnly, NoiseMode::kUniformOnly}) {
    const SuiteResult r = verify_noise(VerifyOptions{}, {0.1, 0.3, 0.5, 0.7, 0.9}, mode);
    EXPECT_TRUE(r.passed) << r.details.dump();
  }
}

TEST(SampleT, UnitIntervalAndDeterministic) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const double t = sample_t(s);
    EXPECT_GE(t, 0.0);
    EXPECT_LT(t, 1.0);
    EXPECT_EQ(t, sample_t(s));
  }
}
