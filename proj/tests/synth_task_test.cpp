#include <gtest/gtest.h>

#include <fstream>
#include <json.hpp>
#include <set>

#include "bard/synth_task.hpp"

using namespace bard;

namespace {

TaskParams small(int pairs, int queries, int vlen) {
  TaskParams p;
  p.num_pairs = pairs;
  p.num_queries = queries;
  p.value_len = vlen;
  return p;
}

}  // namespace

TEST(SynthTask, SameSeedAndIndexGiveIdenticalExample) {
  TaskParams p;
  EXPECT_EQ(gen_example(p, 0), gen_example(p, 0));
  EXPECT_NE(gen_example(p, 0), gen_example(p, 1));
  p.seed = 1;
  EXPECT_NE(gen_example(p, 0), gen_example(TaskParams{}, 0));
}

TEST(SynthTask, GoldenSeed7Index3) {
  std::ifstream in(std::string(BARD_TEST_DATA) + "/golden_seed7_index3.json");
  ASSERT_TRUE(in.good());
  const auto g = nlohmann::json::parse(in);
  TaskParams p;
  p.seed = g["seed"].get<std::uint64_t>();
  p.num_pairs = g["num_pairs"];
  p.num_queries = g["num_queries"];
  p.value_len = g["value_len"];
  p.echo_key = g["echo_key"];
  p.vocab.size = g["vocab_size"];
  const Example ex = gen_example(p, g["index"].get<std::uint64_t>());
  EXPECT_EQ(ex.q, g["q"].get<TokenSequence>());
  EXPECT_EQ(ex.x1, g["x1"].get<TokenSequence>());
}

TEST(SynthTask, ResponseLengthFormula) {
  TaskParams p = small(1, 1, 1);
  p.echo_key = false;
  EXPECT_EQ(p.response_len(), 2);
  EXPECT_EQ(gen_example(p, 5).x1.size(), 2u);
  p.echo_key = true;
  EXPECT_EQ(gen_example(p, 5).x1.size(), 3u);
  EXPECT_EQ(TaskParams{}.response_len(), 32);
}

TEST(SynthTask, InvalidParamsAreConfigErrors) {
  EXPECT_THROW(gen_example(small(2, 3, 1), 0), ConfigError);
  EXPECT_THROW(gen_example(small(0, 0, 1), 0), ConfigError);
  EXPECT_THROW(gen_example(small(2, 1, 0), 0), ConfigError);
  EXPECT_THROW(gen_example(small(40, 1, 1), 0), ConfigError);  // 80 distinct ids > 61
}

TEST(SynthTask, HandWrittenTwoPairOneQuery) {
  // BOS (10 20) (11 21) SEP 11 SEP, value_len 1.
  TaskParams p = small(2, 1, 1);
  const TokenSequence q = {Vocab::kBos, 10, 20, 11, 21, Vocab::kSep, 11, Vocab::kSep};
  EXPECT_EQ(gold_answer(q, p), (TokenSequence{11, 21, Vocab::kSep}));
  p.echo_key = false;
  EXPECT_EQ(gold_answer(q, p), (TokenSequence{21, Vocab::kSep}));
}

TEST(SynthTask, HandWrittenTwoValueTokens) {
  TaskParams p = small(2, 2, 2);
  const TokenSequence q = {Vocab::kBos, 10, 20, 30, 11, 21, 31, Vocab::kSep, 11, 10, Vocab::kSep};
  EXPECT_EQ(gold_answer(q, p), (TokenSequence{11, 21, 31, Vocab::kSep, 10, 20, 30, Vocab::kSep}));
}

TEST(SynthTask, AbsentQueryKeyNamesOffset) {
  TaskParams p = small(2, 1, 1);
  const TokenSequence q = {Vocab::kBos, 10, 20, 11, 21, Vocab::kSep, 12, Vocab::kSep};
  try {
    gold_answer(q, p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 6u);
  }
}

TEST(SynthTask, MalformedContextsAreRejected) {
  TaskParams p = small(2, 1, 1);
  EXPECT_THROW(gold_answer(TokenSequence{Vocab::kBos, 10, 20}, p), ParseError);
  EXPECT_THROW(gold_answer(TokenSequence{5, 10, 20, 11, 21, Vocab::kSep, 11, Vocab::kSep}, p), ParseError);
  EXPECT_THROW(gold_answer(TokenSequence{Vocab::kBos, 10, 20, 10, 21, Vocab::kSep, 10, Vocab::kSep}, p), ParseError);
  EXPECT_THROW(gold_answer(TokenSequence{Vocab::kBos, 10, 20, 11, 20, Vocab::kSep, 10, Vocab::kSep}, p), ParseError);
  EXPECT_THROW(gold_answer(TokenSequence{Vocab::kBos, 10, 20, 11, 21, Vocab::kSep, 11, 99}, p), ParseError);
  EXPECT_THROW(gold_answer(TokenSequence{Vocab::kBos, 10, 20, 11, 21, Vocab::kSep, 11, Vocab::kBos}, p), ParseError);
}

TEST(SynthTask, GoldAnswerInvertsGeneratorOn10000Examples) {
  for (const bool echo : {true, false}) {
    TaskParams p;
    p.echo_key = echo;
    p.seed = 11;
    for (std::uint64_t i = 0; i < 5000; ++i) {
      const Example ex = gen_example(p, i);
      ASSERT_EQ(gold_answer(ex.q, p), ex.x1) << "index " << i;
      ASSERT_EQ(static_cast<int>(ex.x1.size()), p.response_len());
      ASSERT_EQ(static_cast<int>(ex.q.size()), p.context_len());
    }
  }
}

TEST(SynthTask, TableTokensDistinctAndNeverMask) {
  TaskParams p;
  for (std::uint64_t i = 0; i < 500; ++i) {
    const Example ex = gen_example(p, i);
    std::set<TokenId> table;
    for (int k = 1; k <= p.num_pairs * (1 + p.value_len); ++k) table.insert(ex.q[static_cast<std::size_t>(k)]);
    EXPECT_EQ(static_cast<int>(table.size()), p.num_pairs * (1 + p.value_len));
    for (TokenId t : ex.q) EXPECT_TRUE(p.vocab.is_ordinary(t));
    for (TokenId t : ex.x1) EXPECT_NE(t, p.vocab.mask_id());
  }
}

TEST(ExactMatch, SingleAndBatch) {
  const TokenSequence s = {3, 4, 5};
  TokenSequence t = s;
  EXPECT_EQ(exact_match(s, s), 1.0);
  t[1] = 9;
  EXPECT_EQ(exact_match(t, s), 0.0);
  EXPECT_EQ(exact_match(TokenSequence{3, 4}, s), 0.0);
  const std::vector<TokenSequence> preds = {s, t};
  const std::vector<TokenSequence> golds = {s, s};
  EXPECT_DOUBLE_EQ(exact_match(std::span<const TokenSequence>(preds), std::span<const TokenSequence>(golds)), 0.5);
}
