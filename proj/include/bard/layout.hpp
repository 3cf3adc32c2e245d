#pragma once

// Packed teacher-forcing layout [Q, x1, x_t] and its block attention mask.
//
// Context and clean tokens keep a plain causal mask. A noisy token in block i
// sees all of Q, the clean tokens of blocks 0..i-1, and every noisy token of
// block i. Noisy token j reuses the position id of clean token j.

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bard/errors.hpp"
#include "bard/synth_task.hpp"

namespace bard {

enum class Segment : std::uint8_t { kContext = 0, kClean = 1, kNoisy = 2 };

/// Dense boolean relation allowed(query, key) over one sequence.
class AttentionMaskSpec {
 public:
  AttentionMaskSpec() = default;
  explicit AttentionMaskSpec(int n) : n_(n), allowed_(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0) {}

  static AttentionMaskSpec causal(int n) {
    AttentionMaskSpec m(n);
    for (int q = 0; q < n; ++q)
      for (int k = 0; k <= q; ++k) m.set(q, k, true);
    return m;
  }

  int size() const noexcept { return n_; }
  bool allowed(int query, int key) const noexcept {
    return allowed_[static_cast<std::size_t>(query) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(key)] != 0;
  }
  void set(int query, int key, bool value) noexcept {
    allowed_[static_cast<std::size_t>(query) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(key)] = value ? 1 : 0;
  }
  const std::uint8_t* row(int query) const noexcept {
    return allowed_.data() + static_cast<std::size_t>(query) * static_cast<std::size_t>(n_);
  }

  bool operator==(const AttentionMaskSpec&) const = default;

 private:
  int n_ = 0;
  std::vector<std::uint8_t> allowed_;
};

struct PackedBatch {
  TokenSequence tokens;
  std::vector<int> positions;
  std::vector<Segment> segments;
  std::vector<int> block_index;  // per response position, j / B
  int context_len = 0;
  int response_len = 0;
  int block_size = 0;

  int size() const noexcept { return static_cast<int>(tokens.size()); }
  int clean_offset() const noexcept { return context_len; }
  int noisy_offset() const noexcept { return context_len + response_len; }
};

inline void check_block_size(int response_len, int block_size) {
  if (block_size < 1) throw ConfigError("block size must be >= 1");
  if (response_len % block_size != 0) {
    throw ConfigError("block size " + std::to_string(block_size) + " does not divide response length " +
                      std::to_string(response_len));
  }
}

inline PackedBatch build_packed(std::span<const TokenId> q, std::span<const TokenId> x1,
                                std::span<const TokenId> x_t, int block_size) {
  if (x1.size() != x_t.size()) throw InputError("clean and noisy responses differ in length");
  const int ctx = static_cast<int>(q.size());
  const int len = static_cast<int>(x1.size());
  check_block_size(len, block_size);

  PackedBatch b;
  b.context_len = ctx;
  b.response_len = len;
  b.block_size = block_size;
  b.tokens.reserve(static_cast<std::size_t>(ctx + 2 * len));
  b.tokens.insert(b.tokens.end(), q.begin(), q.end());
  b.tokens.insert(b.tokens.end(), x1.begin(), x1.end());
  b.tokens.insert(b.tokens.end(), x_t.begin(), x_t.end());
  for (int i = 0; i < ctx + len; ++i) b.positions.push_back(i);
  for (int j = 0; j < len; ++j) b.positions.push_back(ctx + j);
  b.segments.assign(static_cast<std::size_t>(ctx), Segment::kContext);
  b.segments.insert(b.segments.end(), static_cast<std::size_t>(len), Segment::kClean);
  b.segments.insert(b.segments.end(), static_cast<std::size_t>(len), Segment::kNoisy);
  for (int j = 0; j < len; ++j) b.block_index.push_back(j / block_size);
  return b;
}

inline AttentionMaskSpec build_packed_mask(const PackedBatch& batch) {
  const int n = batch.size();
  const int ctx = batch.context_len;
  const int noisy = batch.noisy_offset();
  AttentionMaskSpec m(n);
  for (int q = 0; q < noisy; ++q)
    for (int k = 0; k <= q; ++k) m.set(q, k, true);
  for (int j = 0; j < batch.response_len; ++j) {
    const int q = noisy + j;
    const int block = batch.block_index[static_cast<std::size_t>(j)];
    const int begin = block * batch.block_size;
    for (int k = 0; k < ctx + begin; ++k) m.set(q, k, true);
    for (int k = begin; k < begin + batch.block_size; ++k) m.set(q, noisy + k, true);
  }
  return m;
}

/// One sequence of the unpacked reference layout.
struct BranchSequence {
  TokenSequence tokens;
  std::vector<int> positions;
  AttentionMaskSpec mask;
  int block = -1;          // -1 for the clean branch
  int readout_offset = 0;  // index of the first noisy token
};

struct TwoBranchLayout {
  BranchSequence clean;
  std::vector<BranchSequence> blocks;

  std::size_t total_tokens() const noexcept {
    std::size_t n = clean.tokens.size();
    for (const auto& b : blocks) n += b.tokens.size();
    return n;
  }
};

/// Reference layout that duplicates Q: one causal [Q, x1] sequence and one
/// [Q, x1 prefix, x_t block] sequence per block.
inline TwoBranchLayout build_two_branch(std::span<const TokenId> q, std::span<const TokenId> x1,
                                        std::span<const TokenId> x_t, int block_size) {
  if (x1.size() != x_t.size()) throw InputError("clean and noisy responses differ in length");
  const int ctx = static_cast<int>(q.size());
  const int len = static_cast<int>(x1.size());
  check_block_size(len, block_size);

  TwoBranchLayout out;
  out.clean.tokens.assign(q.begin(), q.end());
  out.clean.tokens.insert(out.clean.tokens.end(), x1.begin(), x1.end());
  for (int i = 0; i < ctx + len; ++i) out.clean.positions.push_back(i);
  out.clean.mask = AttentionMaskSpec::causal(ctx + len);

  for (int block = 0; block * block_size < len; ++block) {
    const int prefix = block * block_size;
    BranchSequence s;
    s.block = block;
    s.tokens.assign(q.begin(), q.end());
    s.tokens.insert(s.tokens.end(), x1.begin(), x1.begin() + prefix);
    s.tokens.insert(s.tokens.end(), x_t.begin() + prefix, x_t.begin() + prefix + block_size);
    const int n = ctx + prefix + block_size;
    for (int i = 0; i < n; ++i) s.positions.push_back(i);
    s.readout_offset = ctx + prefix;
    s.mask = AttentionMaskSpec(n);
    for (int qi = 0; qi < s.readout_offset; ++qi)
      for (int k = 0; k <= qi; ++k) s.mask.set(qi, k, true);
    for (int qi = s.readout_offset; qi < n; ++qi)
      for (int k = 0; k < n; ++k) s.mask.set(qi, k, true);
    out.blocks.push_back(std::move(s));
  }
  return out;
}

struct MaskViolation {
  int query = 0;
  int key = 0;
  bool expected = false;
  bool actual = false;
};

struct LeakageReport {
  std::vector<MaskViolation> violations;
  std::size_t pairs_checked = 0;
  bool ok() const noexcept { return violations.empty(); }
};

/// Checks every (query, key) pair against the closed-form rule, computed from
/// index arithmetic alone (the batch's segment labels are not trusted).
inline LeakageReport verify_no_leakage(const AttentionMaskSpec& spec, const PackedBatch& batch) {
  LeakageReport report;
  const int ctx = batch.context_len;
  const int len = batch.response_len;
  const int bs = batch.block_size;
  const int n = ctx + 2 * len;
  if (spec.size() != n) {
    report.violations.push_back({-1, -1, true, false});
    return report;
  }
  auto rule = [&](int q, int k) {
    if (q < ctx + len) return k <= q;
    const int block = (q - ctx - len) / bs;
    if (k < ctx) return true;
    if (k < ctx + len) return (k - ctx) / bs < block;
    return (k - ctx - len) / bs == block;
  };
  for (int q = 0; q < n; ++q) {
    for (int k = 0; k < n; ++k) {
      ++report.pairs_checked;
      const bool want = rule(q, k);
      const bool got = spec.allowed(q, k);
      if (want != got) report.violations.push_back({q, k, want, got});
    }
  }
  return report;
}

/// Writes the mask as rows of comma-separated 0/1.
inline void write_mask_csv(std::ostream& os, const AttentionMaskSpec& mask) {
  for (int q = 0; q < mask.size(); ++q) {
    for (int k = 0; k < mask.size(); ++k) {
      if (k) os << ',';
      os << (mask.allowed(q, k) ? '1' : '0');
    }
    os << '\n';
  }
}

}  // namespace bard
