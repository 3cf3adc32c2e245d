#pragma once

// Keyed lookup-and-copy task. The context Q holds a table of key -> value
// rows followed by a list of queried keys; the response x1 answers each query
// in order as the echoed key, its value, and a separator.
//
//   Q  = BOS (k_1 v_1[0..V)) ... (k_P v_P[0..V)) SEP q_1 ... q_N SEP
//   x1 = q_1 value(q_1) SEP q_2 value(q_2) SEP ... q_N value(q_N) SEP
//
// With echo_key off the key is dropped: x1 = value(q_1) SEP ... value(q_N) SEP.
//
// Ids 0..2 are structural (BOS, SEP, PAD); keys and values are drawn from the
// content range [3, size) without replacement, so every table token of one
// example is distinct. The mask id equals `size`.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bard/errors.hpp"
#include "bard/rng.hpp"

namespace bard {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

struct Vocab {
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kFirstContent = 3;

  int size = 64;

  TokenId mask_id() const noexcept { return static_cast<TokenId>(size); }
  int total() const noexcept { return size + 1; }
  int content_count() const noexcept { return size - kFirstContent; }
  bool is_ordinary(TokenId id) const noexcept { return id >= 0 && id < size; }
};

struct TaskParams {
  int num_pairs = 8;
  int num_queries = 8;
  int value_len = 2;
  bool echo_key = true;  // false gives the bare grammar [value, SEP] per query
  std::uint64_t seed = 0;
  Vocab vocab{};

  int response_len() const noexcept { return num_queries * (value_len + 1 + (echo_key ? 1 : 0)); }
  int context_len() const noexcept { return 1 + num_pairs * (1 + value_len) + 1 + num_queries + 1; }

  void validate() const {
    if (vocab.size <= Vocab::kFirstContent) throw ConfigError("vocab size must exceed the structural ids");
    if (num_pairs < 1) throw ConfigError("num_pairs must be >= 1");
    if (num_queries < 1) throw ConfigError("num_queries must be >= 1");
    if (value_len < 1) throw ConfigError("value_len must be >= 1");
    if (num_queries > num_pairs) throw ConfigError("num_queries must not exceed num_pairs");
    if (num_pairs * (1 + value_len) > vocab.content_count())
      throw ConfigError("the table needs more distinct content ids than the vocabulary has");
  }
};

struct Example {
  TokenSequence q;
  TokenSequence x1;

  bool operator==(const Example&) const = default;
};

/// Deterministic in (params.seed, index); no state is kept between calls.
inline Example gen_example(const TaskParams& params, std::uint64_t index) {
  params.validate();
  Rng rng(derive_seed(params.seed, {0x7461736bULL, index}));
  const Vocab& vocab = params.vocab;

  std::vector<TokenId> content(static_cast<std::size_t>(vocab.content_count()));
  std::iota(content.begin(), content.end(), Vocab::kFirstContent);
  // Partial Fisher-Yates: content[0..P) are the keys, the next P * V ids the values.
  const int table = params.num_pairs * (1 + params.value_len);
  for (int i = 0; i < table; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(content.size() - static_cast<std::size_t>(i));
    std::swap(content[static_cast<std::size_t>(i)], content[j]);
  }

  Example ex;
  ex.q.reserve(static_cast<std::size_t>(params.context_len()));
  ex.q.push_back(Vocab::kBos);
  std::vector<TokenSequence> values(static_cast<std::size_t>(params.num_pairs));
  for (int p = 0; p < params.num_pairs; ++p) {
    ex.q.push_back(content[static_cast<std::size_t>(p)]);
    auto& value = values[static_cast<std::size_t>(p)];
    for (int v = 0; v < params.value_len; ++v) {
      value.push_back(content[static_cast<std::size_t>(params.num_pairs + p * params.value_len + v)]);
      ex.q.push_back(value.back());
    }
  }
  ex.q.push_back(Vocab::kSep);

  std::vector<int> order(static_cast<std::size_t>(params.num_pairs));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < params.num_queries; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(order.size() - static_cast<std::size_t>(i));
    std::swap(order[static_cast<std::size_t>(i)], order[j]);
  }
  ex.x1.reserve(static_cast<std::size_t>(params.response_len()));
  for (int i = 0; i < params.num_queries; ++i) {
    const int pair = order[static_cast<std::size_t>(i)];
    ex.q.push_back(content[static_cast<std::size_t>(pair)]);
    const auto& value = values[static_cast<std::size_t>(pair)];
    if (params.echo_key) ex.x1.push_back(content[static_cast<std::size_t>(pair)]);
    ex.x1.insert(ex.x1.end(), value.begin(), value.end());
    ex.x1.push_back(Vocab::kSep);
  }
  ex.q.push_back(Vocab::kSep);
  return ex;
}

/// Parses Q against the task grammar and returns the answer it determines.
inline TokenSequence gold_answer(std::span<const TokenId> q, const TaskParams& params) {
  params.validate();
  const Vocab& vocab = params.vocab;
  const auto expect_len = static_cast<std::size_t>(params.context_len());
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!vocab.is_ordinary(q[i])) throw ParseError(i, "token id " + std::to_string(q[i]) + " outside the ordinary vocabulary");
  }
  if (q.size() != expect_len) {
    throw ParseError(std::min(q.size(), expect_len),
                     "context length " + std::to_string(q.size()) + " != expected " + std::to_string(expect_len));
  }
  auto is_content = [](TokenId id) { return id >= Vocab::kFirstContent; };
  if (q[0] != Vocab::kBos) throw ParseError(0, "expected BOS");

  const std::size_t row = static_cast<std::size_t>(1 + params.value_len);
  std::vector<TokenId> keys;
  std::vector<TokenId> table;
  for (int p = 0; p < params.num_pairs; ++p) {
    const std::size_t at = 1 + static_cast<std::size_t>(p) * row;
    for (std::size_t k = 0; k < row; ++k) {
      if (!is_content(q[at + k])) throw ParseError(at + k, "expected a content token in the table");
      if (std::find(table.begin(), table.end(), q[at + k]) != table.end())
        throw ParseError(at + k, k == 0 ? "duplicate key" : "repeated table token");
      table.push_back(q[at + k]);
    }
    keys.push_back(q[at]);
  }
  const std::size_t sep = 1 + static_cast<std::size_t>(params.num_pairs) * row;
  if (q[sep] != Vocab::kSep) throw ParseError(sep, "expected SEP after the table");

  TokenSequence x1;
  x1.reserve(static_cast<std::size_t>(params.response_len()));
  std::vector<TokenId> seen;
  for (int i = 0; i < params.num_queries; ++i) {
    const std::size_t at = sep + 1 + static_cast<std::size_t>(i);
    const TokenId key = q[at];
    auto it = std::find(keys.begin(), keys.end(), key);
    if (it == keys.end()) throw ParseError(at, "query key " + std::to_string(key) + " not present in the table");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ParseError(at, "repeated query key");
    seen.push_back(key);
    const std::size_t base = 1 + static_cast<std::size_t>(it - keys.begin()) * row + 1;
    if (params.echo_key) x1.push_back(key);
    x1.insert(x1.end(), q.begin() + static_cast<std::ptrdiff_t>(base),
              q.begin() + static_cast<std::ptrdiff_t>(base) + params.value_len);
    x1.push_back(Vocab::kSep);
  }
  if (q.back() != Vocab::kSep) throw ParseError(q.size() - 1, "expected trailing SEP");
  return x1;
}

inline double exact_match(std::span<const TokenId> pred, std::span<const TokenId> gold) noexcept {
  return pred.size() == gold.size() && std::equal(pred.begin(), pred.end(), gold.begin()) ? 1.0 : 0.0;
}

inline double exact_match(std::span<const TokenSequence> preds, std::span<const TokenSequence> golds) {
  if (preds.size() != golds.size()) throw InputError("exact_match: batch sizes differ");
  if (preds.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += exact_match(preds[i], golds[i]);
  return sum / static_cast<double>(preds.size());
}

}  // namespace bard
