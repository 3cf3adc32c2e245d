#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "bard/layout.hpp"
#include "bard/verify.hpp"

using namespace bard;

namespace {

std::set<int> allowed_keys(const AttentionMaskSpec& m, int q) {
  std::set<int> out;
  for (int k = 0; k < m.size(); ++k)
    if (m.allowed(q, k)) out.insert(k);
  return out;
}

// Independent statement of the packed rule, phrased over segments instead of
// index arithmetic: returns the set a noisy row in `block` may read.
std::set<int> brute_force_noisy(int ctx, int len, int bs, int block) {
  std::set<int> out;
  for (int k = 0; k < ctx; ++k) out.insert(k);
  for (int j = 0; j < len; ++j) {
    if (j / bs < block) out.insert(ctx + j);
    if (j / bs == block) out.insert(ctx + len + j);
  }
  return out;
}

PackedBatch packed(int ctx, int len, int bs) {
  const TokenSequence q(static_cast<std::size_t>(ctx), 5);
  const TokenSequence x(static_cast<std::size_t>(len), 6);
  return build_packed(q, x, x, bs);
}

}  // namespace

TEST(PackedMask, WorkedExampleQ2L4B2) {
  const PackedBatch b = packed(2, 4, 2);
  const AttentionMaskSpec m = build_packed_mask(b);
  ASSERT_EQ(m.size(), 10);
  EXPECT_EQ(allowed_keys(m, 8), (std::set<int>{0, 1, 2, 3, 8, 9}));
  EXPECT_EQ(allowed_keys(m, 6), (std::set<int>{0, 1, 6, 7}));
  EXPECT_EQ(allowed_keys(m, 4), (std::set<int>{0, 1, 2, 3, 4}));
}

TEST(PackedMask, MatchesBruteForceOnAllSmallShapes) {
  for (int ctx = 0; ctx <= 4; ++ctx)
    for (int len = 1; len <= 8; ++len)
      for (int bs : {1, 2, 4, 8}) {
        if (len % bs) continue;
        const PackedBatch b = packed(ctx, len, bs);
        const AttentionMaskSpec m = build_packed_mask(b);
        for (int j = 0; j < len; ++j)
          ASSERT_EQ(allowed_keys(m, ctx + len + j), brute_force_noisy(ctx, len, bs, j / bs));
        for (int q = 0; q < ctx + len; ++q) {
          std::set<int> causal;
          for (int k = 0; k <= q; ++k) causal.insert(k);
          ASSERT_EQ(allowed_keys(m, q), causal);
        }
        ASSERT_TRUE(verify_no_leakage(m, b).ok());
      }
  EXPECT_TRUE(verify_masks().passed);
}

TEST(PackedMask, InjectedFaultsAreCountedExactly) {
  const PackedBatch b = packed(3, 8, 4);
  AttentionMaskSpec extra = build_packed_mask(b);
  extra.set(b.noisy_offset(), b.clean_offset() + 5, true);  // noisy block 0 reading clean block 1
  const auto r1 = verify_no_leakage(extra, b);
  ASSERT_EQ(r1.violations.size(), 1u);
  EXPECT_FALSE(r1.violations[0].expected);
  EXPECT_TRUE(r1.violations[0].actual);

  AttentionMaskSpec removed = build_packed_mask(b);
  removed.set(b.noisy_offset() + 6, 0, false);
  const auto r2 = verify_no_leakage(removed, b);
  ASSERT_EQ(r2.violations.size(), 1u);
  EXPECT_TRUE(r2.violations[0].expected);

  VerifyOptions opt;
  opt.inject_mask_fault = true;
  EXPECT_FALSE(verify_masks(opt).passed);
}

TEST(PackedLayout, PositionsDuplicatedAndSegmentsLabelled) {
  const PackedBatch b = packed(5, 8, 2);
  EXPECT_EQ(b.size(), 5 + 16);
  for (int j = 0; j < 8; ++j) {
    EXPECT_EQ(b.positions[static_cast<std::size_t>(b.noisy_offset() + j)], b.positions[static_cast<std::size_t>(b.clean_offset() + j)]);
    EXPECT_EQ(b.block_index[static_cast<std::size_t>(j)], j / 2);
  }
  EXPECT_EQ(b.segments.front(), Segment::kContext);
  EXPECT_EQ(b.segments[5], Segment::kClean);
  EXPECT_EQ(b.segments.back(), Segment::kNoisy);
  const PackedBatch one = packed(2, 4, 1);
  EXPECT_EQ(one.block_index, (std::vector<int>{0, 1, 2, 3}));
}

TEST(PackedLayout, BlockSizeMustDivide) {
  EXPECT_THROW(packed(2, 6, 4), ConfigError);
  EXPECT_THROW(packed(2, 6, 0), ConfigError);
  const TokenSequence q = {5}, x = {6, 6}, y = {6};
  EXPECT_THROW(build_packed(q, x, y, 1), InputError);
}

TEST(TwoBranch, Construction) {
  const TokenSequence q = {3, 4};
  const TokenSequence x1 = {10, 11, 12, 13};
  const TokenSequence xt = {64, 20, 64, 21};
  const TwoBranchLayout full = build_two_branch(q, x1, xt, 4);
  ASSERT_EQ(full.blocks.size(), 1u);
  EXPECT_EQ(full.blocks[0].tokens, (TokenSequence{3, 4, 64, 20, 64, 21}));

  const TwoBranchLayout two = build_two_branch(q, x1, xt, 2);
  ASSERT_EQ(two.blocks.size(), 2u);
  EXPECT_EQ(two.clean.tokens, (TokenSequence{3, 4, 10, 11, 12, 13}));
  EXPECT_EQ(two.blocks[0].tokens, (TokenSequence{3, 4, 64, 20}));
  EXPECT_EQ(two.blocks[1].tokens, (TokenSequence{3, 4, 10, 11, 64, 21}));
  EXPECT_EQ(two.blocks[1].readout_offset, 4);
}

TEST(TwoBranch, PackedIsSmallerOnAGrid) {
  for (int ctx = 1; ctx <= 40; ctx += 3)
    for (int len : {4, 8, 16, 32, 64})
      for (int bs : {1, 2, 4, 8, 16, 32}) {
        if (len % bs || len <= bs) continue;
        const TokenSequence q(static_cast<std::size_t>(ctx), 5), x(static_cast<std::size_t>(len), 6);
        const auto two = build_two_branch(q, x, x, bs);
        // (|Q| + L) + sum_i (|Q| + iB + B)
        std::size_t expect = static_cast<std::size_t>(ctx + len);
        for (int i = 0; i < len / bs; ++i) expect += static_cast<std::size_t>(ctx + i * bs + bs);
        EXPECT_EQ(two.total_tokens(), expect);
        EXPECT_LT(static_cast<std::size_t>(build_packed(q, x, x, bs).size()), expect);
      }
  // |Q| = 32, L = 64, B = 4: 160 packed tokens against 96 + 16 * 32 + (4 + 8 + ... + 64).
  const TokenSequence q(32, 5), x(64, 6);
  EXPECT_EQ(build_packed(q, x, x, 4).size(), 160);
  EXPECT_EQ(build_two_branch(q, x, x, 4).total_tokens(), 96u + 512u + 544u);
}

TEST(PackedMask, CsvIsZeroOneGrid) {
  const PackedBatch b = packed(1, 2, 1);
  std::ostringstream os;
  write_mask_csv(os, build_packed_mask(b));
  EXPECT_EQ(os.str(), "1,0,0,0,0\n1,1,0,0,0\n1,1,1,0,0\n1,0,0,1,0\n1,1,0,0,1\n");
}
